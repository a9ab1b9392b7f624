"""Inference pipeline: α initial solutions followed by r conquering stages."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .conquer import (
    Decomposition,
    accept_and_merge,
    best_candidate,
    conquer_batch,
    conquer_exact,
    decompose,
    sub_cost,
    symmetric,
)
from .conquer.exact import LIMITS
from .conquer.policy import BatchRollout
from .divide import decode_t_revisit, heuristic_initial
from .graph import build_sparse_graph
from .model import Models
from .problems import Instance, Kind, Solution, cost


def default_beta(kind: Kind) -> int:
    return 2 if symmetric(kind) else 1


@dataclass
class SolveConfig:
    stages: int = 2
    alpha: int = 1
    n: int = 10
    beta: int | None = None
    T: int = 1
    mode: str = "greedy"
    conquer_mode: str = "greedy"
    seed: int = 0
    margin_recycling: bool = True
    backend: str = "neural"
    initial: str = "policy"
    K: int | None = None
    normalize: bool = True

    def __post_init__(self):
        if self.stages < 0:
            raise ValueError("stages must be >= 0")
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if self.n < 2:
            raise ValueError("sub-problem size n must be >= 2")
        if self.backend not in ("neural", "exact"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.initial not in ("policy", "random", "nearest_greedy", "random_insertion"):
            raise ValueError(f"unknown initializer {self.initial!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def stage_offset(i: int, n: int, rng: np.random.Generator) -> int:
    """Offset of conquering stage ``i`` (1-based): n/2·i for the first two, then uniform."""
    if i <= 2:
        return (n // 2) * i
    return int(rng.integers(1, n + 1))


@dataclass
class StageOutcome:
    solutions: list[Solution]
    decompositions: list[Decomposition]
    accepted: list[list[bool]]
    batch: BatchRollout | None = None
    reward_costs: np.ndarray | None = None  # (sub-problems, β) costs used as rewards
    exact_skipped: int = 0


def effective_n(inst: Instance, sol: Solution, n: int) -> int:
    if inst.kind in (Kind.KP, Kind.MIS):
        return min(n, inst.n)
    return min(n, int(sol.order.size))


def stage(
    inst: Instance,
    sols: list[Solution],
    p: int,
    models: Models | None,
    n: int,
    rng: np.random.Generator,
    beta: int = 1,
    two_sided: bool = True,
    conquer_mode: str = "greedy",
    backend: str = "neural",
    margin_recycling: bool = True,
    normalized: bool = True,
    record: bool = False,
    memo: set | None = None,
) -> StageOutcome:
    """Decompose every solution at offset ``p``, conquer all windows, merge improvements.

    ``memo`` holds keys of windows that a deterministic conqueror already failed
    to improve; such windows are skipped and keep their fragment.
    """
    decs = []
    for sol in sols:
        m = effective_n(inst, sol, n)
        if m < 2 or (inst.kind in (Kind.TSP, Kind.CVRP) and m < 3):
            decs.append(Decomposition(inst.kind, [], np.arange(0), p))
            continue
        margin_window = None
        if margin_recycling and inst.kind in (Kind.OP, Kind.KP):
            count = _window_count(inst, sol, m)
            margin_window = int(rng.integers(count)) if count else None
        decs.append(decompose(inst, sol, m, p, rng, margin_window, normalized))
    every = [sp for d in decs for sp in d.subproblems]
    keys = [window_key(sp) for sp in every] if memo is not None else None
    run = [i for i in range(len(every)) if keys is None or keys[i] not in memo]
    all_sps = [every[i] for i in run]

    skipped = 0
    batch = None
    costs = None
    if backend == "exact":
        picks = []
        for sp in all_sps:
            size = sp.size - 1 if inst.kind is Kind.CVRP else sp.size
            if size > LIMITS[inst.kind]:
                picks.append(None)
                skipped += 1
            else:
                picks.append(conquer_exact(inst, sp, normalized))
    else:
        if models is None:
            raise ValueError("the neural backend needs models")
        batch = conquer_batch(inst, all_sps, models.conquer, beta, two_sided, conquer_mode, rng, record)
        picks = []
        if batch is not None:
            costs = np.zeros((len(all_sps), beta)) if record else None
            for i, sp in enumerate(all_sps):
                cands = batch.seqs[i * beta:(i + 1) * beta]
                if record:
                    reward_xy = sp.coords if inst.kind in (Kind.TSP, Kind.CVRP) else None
                    costs[i] = [sub_cost(inst, sp, s, reward_xy) for s in cands]
                picks.append(best_candidate(inst, sp, cands, sp.original_cost)[0])

    if len(run) < len(every):
        full: list = [None] * len(every)
        for i, pick in zip(run, picks):
            full[i] = pick
        picks = full

    out, accepted, at = [], [], 0
    for sol, dec in zip(sols, decs):
        k = len(dec.subproblems)
        if k == 0:
            out.append(sol)
            accepted.append([])
            continue
        new, acc = accept_and_merge(inst, sol, dec, picks[at:at + k])
        at += k
        out.append(new)
        accepted.append(acc)
    if memo is not None:
        flat = [a for acc in accepted for a in acc]
        memo.update(keys[i] for i in run if not flat[i])
    return StageOutcome(out, decs, accepted, batch, costs, skipped)


def window_key(sp) -> tuple:
    """Everything a deterministic conqueror sees of a window."""
    cons = []
    for k, v in sorted(sp.constraints.items()):
        if isinstance(v, np.ndarray):
            v = v.tobytes()
        elif isinstance(v, list):
            v = tuple(v)
        cons.append((k, v))
    return sp.nodes.tobytes(), tuple(sp.original), tuple(cons)


def _window_count(inst: Instance, sol: Solution, n: int) -> int:
    if inst.kind is Kind.KP:
        return inst.n // n
    tau = int(sol.order.size)
    if tau < 3:
        return 0
    return tau // min(n, tau)


@dataclass
class SolveResult:
    best: Solution
    trace: list[float]
    rollout_traces: list[list[float]]
    offsets: list[int]
    stage_solutions: list[list[Solution]] = field(default_factory=list)
    ledgers: list = field(default_factory=list)
    exact_skipped: int = 0
    wall_ms: float = 0.0

    def to_dict(self) -> dict:
        return {
            "best": self.best.to_dict(),
            "trace": self.trace,
            "rollout_traces": self.rollout_traces,
            "offsets": self.offsets,
            "exact_skipped": self.exact_skipped,
            "wall_ms": self.wall_ms,
        }


def initial_solutions(inst: Instance, models: Models | None, cfg: SolveConfig) -> list[Solution]:
    if cfg.initial != "policy":
        return [heuristic_initial(inst, cfg.initial, cfg.seed + i) for i in range(cfg.alpha)]
    if models is None:
        raise ValueError("policy initialization needs models")
    graph = build_sparse_graph(inst, cfg.K)
    ro = decode_t_revisit(inst, graph, models.divide, models.agnn, cfg.T, cfg.alpha, cfg.mode, cfg.seed, record=False)
    return [r.solution for r in ro]


def solve(inst: Instance, models: Models | None, cfg: SolveConfig, keep_history: bool = False) -> SolveResult:
    """Run the full pipeline; the returned trace holds the incumbent objective per stage."""
    t0 = time.perf_counter()
    if models is not None:
        models.require_kind(inst.kind)
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    beta = cfg.beta if cfg.beta is not None else default_beta(inst.kind)
    sols = initial_solutions(inst, models, cfg)
    best = min(sols, key=lambda s: cost(inst, s))
    trace = [best.objective]
    per = [[s.objective] for s in sols]
    history = [list(sols)] if keep_history else []
    offsets, ledgers, skipped = [], [], 0
    deterministic = cfg.backend == "exact" or cfg.conquer_mode == "greedy"
    memo: set | None = set() if deterministic else None
    for i in range(1, cfg.stages + 1):
        p = stage_offset(i, cfg.n, rng)
        offsets.append(p)
        res = stage(inst, sols, p, models, cfg.n, rng, beta, beta % 2 == 0 and beta >= 2, cfg.conquer_mode,
                    cfg.backend, cfg.margin_recycling, cfg.normalize, memo=memo)
        sols = res.solutions
        skipped += res.exact_skipped
        ledgers.append([d.ledger for d in res.decompositions])
        for j, s in enumerate(sols):
            per[j].append(s.objective)
            if cost(inst, s) < cost(inst, best):
                best = s
        trace.append(best.objective)
        if keep_history:
            history.append(list(sols))
    wall = (time.perf_counter() - t0) * 1000.0
    return SolveResult(best, trace, per, offsets, history, ledgers, skipped, wall)
