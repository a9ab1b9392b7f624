"""Conquering stage: sub-problems, constraint dispatch, policies and merging."""
from .exact import conquer_exact
from .merge import ACCEPT_EPS, MergeError, accept_and_merge, best_candidate
from .policy import ConquerConfig, conquer_batch, conquer_neural, init_conquering, replay_log_probs, symmetric
from .subproblem import (
    BudgetLedger,
    Decomposition,
    SubProblem,
    SubProblemError,
    Transform,
    decompose,
    extract_subproblems,
    fit_transform,
    normalize,
    normalize_points,
    objective_terms,
    prepare_constraints,
    sub_cost,
    sub_violation,
    window_positions,
)

__all__ = [
    "ACCEPT_EPS",
    "BudgetLedger",
    "ConquerConfig",
    "Decomposition",
    "MergeError",
    "SubProblem",
    "SubProblemError",
    "Transform",
    "accept_and_merge",
    "best_candidate",
    "conquer_batch",
    "conquer_exact",
    "conquer_neural",
    "decompose",
    "extract_subproblems",
    "fit_transform",
    "init_conquering",
    "normalize",
    "normalize_points",
    "objective_terms",
    "prepare_constraints",
    "replay_log_probs",
    "sub_cost",
    "sub_violation",
    "symmetric",
    "window_positions",
]
