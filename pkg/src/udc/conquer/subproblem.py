"""Sub-problem extraction, constraint dispatch and coordinate normalization."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..problems import FEAS_TOL, Instance, Kind, ProblemError, Solution, loop_length, path_length


class SubProblemError(ProblemError):
    pass


# ---------------------------------------------------------------------------
# Coordinate transformation


@dataclass(frozen=True)
class Transform:
    shift: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0
    swap: bool = False
    degenerate: bool = False

    def apply(self, xy: np.ndarray) -> np.ndarray:
        z = (np.asarray(xy, dtype=np.float64) - np.asarray(self.shift)) * self.scale
        return z[:, ::-1].copy() if self.swap else z

    def invert(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if self.swap:
            z = z[:, ::-1]
        return z / self.scale + np.asarray(self.shift)


IDENTITY = Transform()


def fit_transform(xy: np.ndarray) -> Transform:
    """Translate to the origin and scale the larger span to 1; swap axes when y dominates."""
    xy = np.asarray(xy, dtype=np.float64)
    lo = xy.min(0)
    span = xy.max(0) - lo
    top = float(span.max())
    if top <= 0.0 or not np.isfinite(1.0 / top):  # subnormal spans overflow the scale
        return Transform(degenerate=True)
    return Transform((float(lo[0]), float(lo[1])), 1.0 / top, swap=bool(span[0] <= span[1]))


def normalize_points(xy: np.ndarray) -> tuple[np.ndarray, Transform]:
    t = fit_transform(xy)
    return t.apply(xy), t


# ---------------------------------------------------------------------------
# Sub-problems


@dataclass
class SubProblem:
    """One window of a parent solution.

    Tokens are local indices into ``nodes``. ``original`` is the current
    fragment as a token sequence (a walk for routing kinds, with the depot
    token marking returns for CVRP; a subset for KP and MIS).
    """

    kind: Kind
    index: int
    positions: np.ndarray
    nodes: np.ndarray
    original: list[int]
    constraints: dict = field(default_factory=dict)
    transform: Transform = IDENTITY
    coords: np.ndarray | None = None
    features: dict = field(default_factory=dict)
    original_cost: float = math.nan

    @property
    def size(self) -> int:
        return int(self.nodes.size)


@dataclass
class BudgetLedger:
    """Stage-level accounting of a shared length (OP) or weight (KP) budget."""

    total: float
    fixed: float
    budgets: list[float]
    margin: float
    assigned: int | None

    @property
    def unassigned(self) -> float:
        return 0.0 if self.assigned is not None else self.margin

    def imbalance(self) -> float:
        return abs(math.fsum(self.budgets) + self.unassigned - (self.total - self.fixed))


@dataclass
class Decomposition:
    kind: Kind
    subproblems: list[SubProblem]
    leftover: np.ndarray  # parent positions (routing) or items/nodes (KP, MIS) outside all windows
    offset: int
    ledger: BudgetLedger | None = None


def window_positions(tau: int, n: int, p: int, cyclic: bool) -> tuple[list[np.ndarray], np.ndarray]:
    """Windows of ``n`` consecutive positions starting at ``p`` plus the leftover positions."""
    if n < 2:
        raise SubProblemError("window size must be >= 2")
    if n > tau:
        raise SubProblemError(f"window size {n} exceeds solution length {tau}")
    if not 0 <= p < tau:
        raise SubProblemError(f"offset {p} outside [0, {tau})")
    if cyclic:
        count = tau // n
        idx = (p + np.arange(count * n)) % tau
        wins = [idx[k * n:(k + 1) * n] for k in range(count)]
        left = (p + np.arange(count * n, tau)) % tau
    else:
        count = (tau - p) // n
        wins = [p + np.arange(k * n, (k + 1) * n) for k in range(count)]
        left = np.concatenate([np.arange(p), np.arange(p + count * n, tau)])
    return wins, left.astype(np.int64)


def extract_subproblems(inst: Instance, sol: Solution, n: int, p: int, rng: np.random.Generator | None = None) -> Decomposition:
    """Split a solution into windows of ``n`` nodes at offset ``p``.

    Closed tours (TSP, OP, PCTSP) use cyclic windows, CVRP uses linear
    windows over its customer sequence, KP and MIS use random-membership
    windows drawn from ``rng``. For OP and PCTSP a tour shorter than ``n``
    yields a single window covering it.
    """
    k = inst.kind
    if k in (Kind.KP, Kind.MIS):
        if rng is None:
            raise SubProblemError("KP/MIS windows need an rng")
        return _subset_windows(inst, sol, n, p, rng)

    order = sol.order
    tau = int(order.size)
    if k in (Kind.OP, Kind.PCTSP):
        if tau < 3:
            return Decomposition(k, [], np.arange(tau), p)
        n = min(n, tau)
        p = p % tau
        wins, left = window_positions(tau, n, p, cyclic=True)
    elif k is Kind.TSP:
        wins, left = window_positions(tau, n, p % tau, cyclic=True)
    else:
        wins, left = window_positions(tau, n, p % n if tau > n else 0, cyclic=False)

    subs = []
    taken = np.zeros(inst.n_nodes, dtype=bool)
    if k in (Kind.OP, Kind.PCTSP):
        taken[order] = True
    for i, pos in enumerate(wins):
        nodes = order[pos]
        if k is Kind.CVRP:
            tokens = np.concatenate([nodes, [0]])
            walk = []
            for j, f in enumerate(sol.flags[pos[:-1]]):
                walk.append(j)
                if f:
                    walk.append(nodes.size)
            walk.append(nodes.size - 1)
            subs.append(SubProblem(k, i, pos, tokens, walk))
        elif k in (Kind.OP, Kind.PCTSP):
            extra = _inject(inst, nodes, taken, n)
            subs.append(SubProblem(k, i, pos, np.concatenate([nodes, extra]), list(range(nodes.size))))
        else:
            subs.append(SubProblem(k, i, pos, nodes.copy(), list(range(nodes.size))))
    return Decomposition(k, subs, left, p)


def _inject(inst: Instance, window: np.ndarray, taken: np.ndarray, cap: int) -> np.ndarray:
    """Unvisited nodes inside the window's bounding box, nearest to its centre first."""
    xy = inst.coords[window]
    lo, hi = xy.min(0), xy.max(0)
    c = inst.coords
    inside = ~taken & np.all((c >= lo) & (c <= hi), axis=1)
    cand = np.flatnonzero(inside)
    if cand.size > cap:
        d = np.linalg.norm(c[cand] - (lo + hi) / 2, axis=1)
        cand = cand[np.argsort(d, kind="stable")[:cap]]
    taken[cand] = True
    return cand.astype(np.int64)


def _subset_windows(inst: Instance, sol: Solution, n: int, p: int, rng: np.random.Generator) -> Decomposition:
    N = inst.n
    if n > N:
        raise SubProblemError(f"window size {n} exceeds instance size {N}")
    count = N // n
    chosen = np.zeros(N, dtype=bool)
    chosen[sol.subset] = True
    if inst.kind is Kind.MIS:
        perm = np.roll(rng.permutation(N), -p)
        wins = [perm[i * n:(i + 1) * n] for i in range(count)]
    else:
        # contiguous chunk of the selection, topped up with random unselected items
        sel = np.flatnonzero(chosen)
        if sel.size:
            sel = np.roll(sel, -(p % sel.size))
        uns = rng.permutation(np.flatnonzero(~chosen))
        take = min(sel.size, count * n)
        sizes = np.full(count, take // count)
        sizes[: take % count] += 1
        wins, a, b = [], 0, 0
        for s in sizes:
            wins.append(np.concatenate([sel[a:a + s], uns[b:b + n - s]]))
            a += s
            b += n - s
    used = np.zeros(N, dtype=bool)
    subs = []
    for i, items in enumerate(wins):
        items = items.astype(np.int64)
        used[items] = True
        subs.append(SubProblem(inst.kind, i, items, items.copy(), np.flatnonzero(chosen[items]).tolist()))
    return Decomposition(inst.kind, subs, np.flatnonzero(~used), p)


# ---------------------------------------------------------------------------
# Constraint dispatch


def prepare_constraints(
    inst: Instance, sol: Solution, dec: Decomposition, margin_window: int | None = None
) -> Decomposition:
    """Attach constraints that make every feasible sub-solution merge into a feasible parent.

    ``margin_window`` selects the window that receives the unused global
    budget (OP length, KP capacity); ``None`` disables recycling.
    """
    k = inst.kind
    subs = dec.subproblems
    if k is Kind.TSP:
        for sp in subs:
            sp.constraints = {"start": 0, "end": sp.size - 1}
    elif k is Kind.CVRP:
        _cvrp_caps(inst, sol, dec)
    elif k in (Kind.OP, Kind.PCTSP):
        _tour_constraints(inst, sol, dec, margin_window)
    elif k is Kind.KP:
        w = inst.weights
        used = math.fsum(w[sol.subset].tolist())
        margin = inst.capacity - used
        budgets = []
        for sp in subs:
            cap = math.fsum(w[sp.nodes[sp.original]].tolist())
            if margin_window is not None and sp.index == margin_window:
                cap += margin
            sp.constraints = {"capacity": cap}
            budgets.append(cap)
        inside = np.zeros(inst.n, dtype=bool)
        for sp in subs:
            inside[sp.nodes] = True
        chosen = np.zeros(inst.n, dtype=bool)
        chosen[sol.subset] = True
        fixed = math.fsum(w[chosen & ~inside].tolist())
        dec.ledger = BudgetLedger(float(inst.capacity), fixed, budgets, margin, margin_window if subs else None)
    else:
        chosen = np.zeros(inst.n, dtype=bool)
        chosen[sol.subset] = True
        ptr, idx = inst.neighbor_csr()
        # selected neighbours per node, minus those inside the window
        cs = np.concatenate([[0], np.cumsum(chosen[idx])])
        sel_deg = cs[ptr[1:]] - cs[ptr[:-1]]
        for sp in subs:
            adj = _sub_adjacency(inst, sp)
            inner = adj[:, chosen[sp.nodes]].sum(1)
            sp.constraints = {"forbidden": sel_deg[sp.nodes] - inner > 0}
            sp.features = {"adjacency": adj}
    for sp in subs:
        sp.original_cost = sub_cost(inst, sp, sp.original)
    return dec


def _cvrp_caps(inst: Instance, sol: Solution, dec: Decomposition) -> None:
    order, flags = sol.order, sol.flags
    tau = order.size
    C = float(inst.capacity)
    route = np.concatenate([[0], np.cumsum(flags[:-1])])
    owner = np.full(tau, -1, dtype=np.int64)
    for sp in dec.subproblems:
        owner[sp.positions] = sp.index
    if dec.subproblems:
        owner[dec.subproblems[-1].positions[-1] + 1:] = -2
    change = np.concatenate([[True], (np.diff(route) != 0) | (np.diff(owner) != 0)])
    seg = np.cumsum(change) - 1
    dem = inst.demands[order]
    seg_load = np.bincount(seg, weights=dem)
    seg_route = route[change]
    seg_owner = owner[change]
    slack = C - np.bincount(route, weights=dem)
    bound = seg_load.copy()
    for r in np.unique(seg_route):
        in_win = np.flatnonzero((seg_route == r) & (seg_owner >= 0))
        if in_win.size:
            bound[in_win[-1]] += slack[r]
    for sp in dec.subproblems:
        f, l = seg[sp.positions[0]], seg[sp.positions[-1]]
        cap_first, cap_last = float(bound[f]), float(bound[l])
        cap_single = cap_first if f == l else cap_first + cap_last - C
        if cap_first < -FEAS_TOL or cap_last < -FEAS_TOL:
            raise SubProblemError(f"negative residual capacity in window {sp.index}")
        sp.constraints = {
            "start": 0,
            "end": sp.size - 2,
            "depot": sp.size - 1,
            "capacity": C,
            "cap_first": cap_first,
            "cap_last": cap_last,
            "cap_single": cap_single,
        }


def _tour_constraints(inst: Instance, sol: Solution, dec: Decomposition, margin_window: int | None) -> None:
    k = inst.kind
    subs = dec.subproblems
    total = loop_length(inst, sol.order)
    within = []
    for sp in subs:
        m = sp.positions.size
        forced = [i for i in range(1, m - 1) if sp.nodes[i] == 0]
        cons = {"start": 0, "end": m - 1, "forced": forced, "window": m}
        if k is Kind.OP:
            length = path_length(inst, sp.nodes[:m])
            within.append(length)
            cons["budget"] = length
        else:
            cons["prize_floor"] = math.fsum(inst.prizes[sp.nodes[1:m - 1]].tolist())
        sp.constraints = cons
    if k is Kind.OP:
        margin = max(float(inst.budget) - total, 0.0)
        if margin_window is not None and subs:
            subs[margin_window].constraints["budget"] += margin
        budgets = [sp.constraints["budget"] for sp in subs]
        fixed = total - math.fsum(within)
        dec.ledger = BudgetLedger(float(inst.budget), fixed, budgets, margin, margin_window if subs else None)


# ---------------------------------------------------------------------------
# Sub-objectives and sub-feasibility (raw parent units, minimization sense)


def _walk_nodes(sp: SubProblem, seq) -> np.ndarray:
    return sp.nodes[np.asarray(seq, dtype=np.int64)]


def sub_cost(inst: Instance, sp: SubProblem, seq, coords: np.ndarray | None = None) -> float:
    """Objective of a sub-solution; ``coords`` overrides the token coordinates."""
    k = sp.kind
    seq = np.asarray(seq, dtype=np.int64)
    if k in (Kind.TSP, Kind.CVRP, Kind.PCTSP):
        xy = inst.coords[sp.nodes] if coords is None else coords
        if seq.size < 2:
            length = 0.0
        else:
            d = xy[seq[1:]] - xy[seq[:-1]]
            length = float(np.sqrt((d * d).sum(1)).sum())
        if k is Kind.PCTSP:
            missed = np.ones(sp.size, dtype=bool)
            missed[seq] = False
            return length + math.fsum(inst.penalties[sp.nodes[missed]].tolist())
        return length
    if k is Kind.OP:
        return -math.fsum(inst.prizes[sp.nodes[seq]].tolist())
    if k is Kind.KP:
        return -math.fsum(inst.values[sp.nodes[seq]].tolist())
    return -float(seq.size)


def sub_violation(inst: Instance, sp: SubProblem, seq) -> str | None:
    """Name of the first violated sub-constraint, or None."""
    k = sp.kind
    c = sp.constraints
    seq = [int(x) for x in seq]
    if k in (Kind.KP, Kind.MIS):
        if len(set(seq)) != len(seq) or any(not 0 <= x < sp.size for x in seq):
            return "shape"
        if k is Kind.KP:
            w = math.fsum(inst.weights[sp.nodes[seq]].tolist())
            return "weight" if w > c["capacity"] + FEAS_TOL else None
        if np.any(c["forbidden"][seq]):
            return "forbidden"
        adj = sp.features.get("adjacency") if sp.features else None
        if adj is None:
            adj = _sub_adjacency(inst, sp)
        return "independence" if adj[seq][:, seq].any() else None
    if not seq or seq[0] != c["start"] or seq[-1] != c["end"]:
        return "endpoints"
    if k is Kind.TSP:
        return None if sorted(seq) == list(range(sp.size)) else "permutation"
    if k is Kind.CVRP:
        arr = np.asarray(seq, dtype=np.int64)
        at_depot = arr == c["depot"]
        custom = arr[~at_depot]
        if custom.size != sp.size - 1 or not np.array_equal(np.sort(custom), np.arange(sp.size - 1)):
            return "permutation"
        if (at_depot[1:] & at_depot[:-1]).any():
            return "depot"
        route = np.cumsum(at_depot)[~at_depot]
        loads = np.bincount(route, weights=inst.demands[sp.nodes[custom]], minlength=int(at_depot.sum()) + 1)
        if loads.size == 1:
            return "capacity" if loads[0] > c["cap_single"] + FEAS_TOL else None
        if loads[0] > c["cap_first"] + FEAS_TOL or loads[-1] > c["cap_last"] + FEAS_TOL:
            return "capacity"
        if (loads[1:-1] > c["capacity"] + FEAS_TOL).any():
            return "capacity"
        return None
    if len(set(seq)) != len(seq) or any(not 0 <= x < sp.size for x in seq):
        return "permutation"
    if any(f not in seq for f in c["forced"]):
        return "depot"
    if k is Kind.OP:
        if path_length(inst, sp.nodes[seq]) > c["budget"] + FEAS_TOL:
            return "length"
        return None
    got = math.fsum(inst.prizes[sp.nodes[seq[1:-1]]].tolist())
    return "prize" if got < c["prize_floor"] - FEAS_TOL else None


# ---------------------------------------------------------------------------
# Normalized payload for the conquering policy


def normalize(inst: Instance, sp: SubProblem, enabled: bool = True) -> SubProblem:
    """Fill ``sp.coords``/``sp.features`` with the policy's view of the sub-problem.

    Coordinates are normalized for TSP and CVRP, PCTSP prizes are divided by
    the prize floor. ``enabled=False`` keeps raw coordinates.
    """
    k = sp.kind
    if k in (Kind.TSP, Kind.CVRP, Kind.OP, Kind.PCTSP):
        xy = inst.coords[sp.nodes]
        if enabled and k in (Kind.TSP, Kind.CVRP):
            sp.coords, sp.transform = normalize_points(xy)
        else:
            sp.coords, sp.transform = xy.astype(np.float64), IDENTITY
    c = sp.constraints
    f: dict = {}
    if k is Kind.CVRP:
        C = c["capacity"]
        f["demand"] = inst.demands[sp.nodes] / C
        pair = np.array([c["cap_first"], c["cap_last"]], dtype=np.float64)
        f["residual_pair"] = pair / pair.sum() if pair.sum() > 0 else np.array([0.5, 0.5])
    elif k is Kind.OP:
        f["prize"] = inst.prizes[sp.nodes]
    elif k is Kind.PCTSP:
        floor = c["prize_floor"]
        f["prize"] = inst.prizes[sp.nodes] / floor if floor > 0 else inst.prizes[sp.nodes] * 0.0
        f["penalty"] = inst.penalties[sp.nodes] * inst.n / 3.0
    elif k is Kind.KP:
        cap = max(c["capacity"], 1e-12)
        f["value"] = inst.values[sp.nodes]
        f["weight"] = inst.weights[sp.nodes] / cap
    elif k is Kind.MIS:
        sub = sp.features.get("adjacency") if sp.features else None
        if sub is None:
            sub = _sub_adjacency(inst, sp)
        f["adjacency"] = sub
        f["degree"] = sub.sum(1) / max(sp.size - 1, 1)
    sp.features = f
    return sp


def _sub_adjacency(inst: Instance, sp: SubProblem) -> np.ndarray:
    local = np.full(inst.n, -1, dtype=np.int64)
    local[sp.nodes] = np.arange(sp.size)
    adj = np.zeros((sp.size, sp.size), dtype=bool)
    ptr, idx = inst.neighbor_csr()
    lo, hi = ptr[sp.nodes], ptr[sp.nodes + 1]
    cnt = hi - lo
    if cnt.sum() == 0:
        return adj
    row = np.repeat(np.arange(sp.size), cnt)
    flat = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt) + np.repeat(lo, cnt)
    col = local[idx[flat]]
    keep = col >= 0
    adj[row[keep], col[keep]] = True
    return adj


def decompose(inst: Instance, sol: Solution, n: int, p: int, rng: np.random.Generator | None = None,
              margin_window: int | None = None, normalized: bool = True) -> Decomposition:
    dec = extract_subproblems(inst, sol, n, p, rng)
    prepare_constraints(inst, sol, dec, margin_window)
    for sp in dec.subproblems:
        normalize(inst, sp, normalized)
    return dec


# ---------------------------------------------------------------------------
# Objective decomposition (TSP and CVRP)


def objective_terms(inst: Instance, sol: Solution, dec: Decomposition) -> tuple[list[float], float]:
    """Window sub-objectives and the remaining connection/leftover cost.

    The parent objective equals ``sum(windows) + rest``.
    """
    if inst.kind not in (Kind.TSP, Kind.CVRP):
        raise SubProblemError("objective decomposition is defined for TSP and CVRP")
    windows = [sub_cost(inst, sp, sp.original) for sp in dec.subproblems]
    order = sol.order
    tau = order.size
    inside = np.full(tau, -1)
    for sp in dec.subproblems:
        inside[sp.positions] = sp.index
    rest = []
    if inst.kind is Kind.TSP:
        for i in range(tau):
            j = (i + 1) % tau
            if inside[i] < 0 or inside[i] != inside[j] or _is_window_end(dec, i):
                rest.append(float(inst.dist(order[i], order[j])))
    else:
        flags = sol.flags
        rest.append(float(inst.dist(0, order[0])))
        for i in range(tau):
            last_in_window = inside[i] >= 0 and _is_window_end(dec, i)
            same = inside[i] >= 0 and not last_in_window
            nxt = order[i + 1] if i + 1 < tau else None
            if flags[i]:
                if not same:
                    rest.append(float(inst.dist(order[i], 0)))
                    if nxt is not None:
                        rest.append(float(inst.dist(0, nxt)))
            elif not same and nxt is not None:
                rest.append(float(inst.dist(order[i], nxt)))
        # walks inside a window already contain their depot legs
    return windows, math.fsum(rest)


def _is_window_end(dec: Decomposition, pos: int) -> bool:
    for sp in dec.subproblems:
        if sp.positions[-1] == pos:
            return True
    return False
