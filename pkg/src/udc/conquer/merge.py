"""Acceptance of improved sub-solutions and merging back into the parent solution."""
from __future__ import annotations

import numpy as np

from ..problems import Instance, Kind, ProblemError, Solution, cost, make_solution
from .subproblem import Decomposition, SubProblem, sub_cost, sub_violation

# improvements smaller than this are treated as ties, so float round-off in the
# parent recomputation can never turn an accepted window into a regression
ACCEPT_EPS = 1e-10


class MergeError(ProblemError):
    """A merged solution broke feasibility or monotonicity; this indicates a bug."""


def best_candidate(inst: Instance, sp: SubProblem, candidates, improve_on: float | None = None) -> tuple[list[int] | None, float]:
    """Lowest-cost sub-feasible candidate (ties keep the earliest).

    With ``improve_on`` set, candidates that would not be accepted against that
    cost are dropped before the (slower) feasibility check.
    """
    scored = [(sub_cost(inst, sp, seq), i) for i, seq in enumerate(candidates) if seq is not None]
    if improve_on is not None:
        scored = [(c, i) for c, i in scored if c < improve_on - ACCEPT_EPS]
    for c, i in sorted(scored):
        if sub_violation(inst, sp, candidates[i]) is None:
            return list(candidates[i]), c
    return None, np.inf


def accept_and_merge(inst: Instance, sol: Solution, dec: Decomposition, chosen: list) -> tuple[Solution, list[bool]]:
    """Replace every window whose chosen sub-solution strictly improves its sub-objective."""
    subs = dec.subproblems
    if len(chosen) != len(subs):
        raise ValueError("one chosen sub-solution per sub-problem is required")
    accepted = []
    for sp, seq in zip(subs, chosen):
        better = seq is not None and sub_cost(inst, sp, seq) < sp.original_cost - ACCEPT_EPS
        accepted.append(bool(better and sub_violation(inst, sp, seq) is None))
    if not any(accepted):
        return sol, accepted

    k = inst.kind
    if k is Kind.TSP:
        # windows keep their positions so the stage offsets stay meaningful
        order = sol.order.copy()
        for sp, seq, acc in zip(subs, chosen, accepted):
            if acc:
                order[sp.positions] = sp.nodes[np.asarray(seq)]
        new = make_solution(inst, order=order)
    elif k in (Kind.OP, Kind.PCTSP):
        parts = []
        for sp, seq, acc in zip(subs, chosen, accepted):
            frag = sp.nodes[np.asarray(seq)] if acc else sp.nodes[sp.original]
            parts.append(frag)
        parts.append(sol.order[dec.leftover])
        order = np.concatenate(parts)
        order = np.roll(order, -int(np.flatnonzero(order == 0)[0]))
        new = make_solution(inst, order=order)
    elif k is Kind.CVRP:
        order, flags = sol.order.tolist(), sol.flags.tolist()
        for sp, seq, acc in zip(subs, chosen, accepted):
            if not acc:
                continue
            depot = sp.constraints["depot"]
            pos = sp.positions
            keep_last = flags[pos[-1]]
            o, f = [], []
            for t in seq:
                if t == depot:
                    f[-1] = 1
                else:
                    o.append(int(sp.nodes[t]))
                    f.append(0)
            f[-1] = keep_last
            order[pos[0]:pos[-1] + 1] = o
            flags[pos[0]:pos[-1] + 1] = f
        new = make_solution(inst, order=order, flags=flags)
    elif k is Kind.KP:
        chosen_mask = np.zeros(inst.n, dtype=bool)
        chosen_mask[sol.subset] = True
        for sp, seq, acc in zip(subs, chosen, accepted):
            if acc:
                chosen_mask[sp.nodes] = False
                chosen_mask[sp.nodes[np.asarray(seq, dtype=np.int64)]] = True
        new = make_solution(inst, subset=np.flatnonzero(chosen_mask))
    else:
        chosen_mask = np.zeros(inst.n, dtype=bool)
        chosen_mask[sol.subset] = True
        nbrs = inst.neighbors()
        for i, (sp, seq, acc) in enumerate(zip(subs, chosen, accepted)):
            if not acc:
                continue
            trial = chosen_mask.copy()
            trial[sp.nodes] = False
            picks = sp.nodes[np.asarray(seq, dtype=np.int64)]
            # windows are merged one by one; a pick next to another window's new pick is dropped
            if any(trial[nbrs[v]].any() for v in picks.tolist()):
                accepted[i] = False
                continue
            trial[picks] = True
            chosen_mask = trial
        new = make_solution(inst, subset=np.flatnonzero(chosen_mask))

    if not new.feasible:
        raise MergeError(f"merged {k.value} solution is infeasible")
    if cost(inst, new) > cost(inst, sol):
        raise MergeError(f"merged {k.value} solution is worse: {new.objective} vs {sol.objective}")
    return new, accepted
