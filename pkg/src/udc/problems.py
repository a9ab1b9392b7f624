"""Problem definitions: instances, solutions, objectives, feasibility and generators.

Six problems are supported. Routing kinds (TSP, CVRP, OP, PCTSP) carry
coordinates in the unit square; the depot, when present, is node 0 and the
problem size ``n`` counts the non-depot nodes. KP and MIS are subset problems.

Solution encodings:

* TSP   -- ``order`` is a permutation of ``0..n-1`` (closed tour).
* CVRP  -- ``order`` is a permutation of the customers ``1..n`` and ``flags[i] = 1``
  when the vehicle returns to the depot right after ``order[i]``.
* OP, PCTSP -- ``order`` starts with the depot and lists the visited nodes of a
  closed loop.
* KP, MIS -- ``subset`` holds the chosen indices.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

FEAS_TOL = 1e-9


class Kind(str, enum.Enum):
    TSP = "tsp"
    CVRP = "cvrp"
    OP = "op"
    PCTSP = "pctsp"
    KP = "kp"
    MIS = "mis"

    @classmethod
    def parse(cls, value: "Kind | str") -> "Kind":
        if isinstance(value, Kind):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unsupported problem kind: {value!r}") from None


ROUTING = frozenset({Kind.TSP, Kind.CVRP, Kind.OP, Kind.PCTSP})
DEPOT_KINDS = frozenset({Kind.CVRP, Kind.OP, Kind.PCTSP})
SENSE = {
    Kind.TSP: "min",
    Kind.CVRP: "min",
    Kind.OP: "max",
    Kind.PCTSP: "min",
    Kind.KP: "max",
    Kind.MIS: "max",
}


class ProblemError(ValueError):
    """Base class for structured problem errors."""


class ShapeError(ProblemError):
    pass


class InfeasibleError(ProblemError):
    def __init__(self, constraint: str, detail: str = ""):
        self.constraint = constraint
        super().__init__(f"infeasible solution: {constraint}" + (f" ({detail})" if detail else ""))


class NoFeasibleAction(ProblemError):
    def __init__(self, detail: str = ""):
        super().__init__("no_feasible_action" + (f": {detail}" if detail else ""))


@dataclass
class Instance:
    kind: Kind
    n: int
    coords: np.ndarray | None = None
    demands: np.ndarray | None = None
    capacity: float | None = None
    prizes: np.ndarray | None = None
    penalties: np.ndarray | None = None
    budget: float | None = None
    values: np.ndarray | None = None
    weights: np.ndarray | None = None
    edges: np.ndarray | None = None
    _neighbors: list[np.ndarray] | None = field(default=None, repr=False, compare=False)
    _csr: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False, compare=False)

    @property
    def has_depot(self) -> bool:
        return self.kind in DEPOT_KINDS

    @property
    def n_nodes(self) -> int:
        """Number of graph nodes, depot included."""
        return self.n + 1 if self.has_depot else self.n

    @property
    def sense(self) -> str:
        return SENSE[self.kind]

    def dist(self, i, j) -> np.ndarray | float:
        """Euclidean distance between node index arrays (computed on demand)."""
        d = self.coords[np.asarray(i)] - self.coords[np.asarray(j)]
        return np.sqrt((d * d).sum(-1))

    def neighbors(self) -> list[np.ndarray]:
        """Adjacency lists for MIS instances."""
        if self._neighbors is None:
            adj: list[list[int]] = [[] for _ in range(self.n)]
            for a, b in self.edges:
                adj[a].append(int(b))
                adj[b].append(int(a))
            self._neighbors = [np.array(sorted(x), dtype=np.int64) for x in adj]
        return self._neighbors

    def neighbor_csr(self) -> tuple[np.ndarray, np.ndarray]:
        """(indptr, indices) form of :meth:`neighbors`."""
        if self._csr is None:
            nb = self.neighbors()
            ptr = np.zeros(self.n + 1, dtype=np.int64)
            ptr[1:] = np.cumsum([len(x) for x in nb])
            idx = np.concatenate(nb) if self.n else np.zeros(0, dtype=np.int64)
            self._csr = (ptr, idx.astype(np.int64))
        return self._csr

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind.value, "n": self.n}
        for key in ("coords", "demands", "prizes", "penalties", "values", "weights"):
            arr = getattr(self, key)
            if arr is not None:
                out[key] = _round9(np.asarray(arr).tolist())
        for key in ("capacity", "budget"):
            val = getattr(self, key)
            if val is not None:
                out[key] = _round9(val)
        if self.edges is not None:
            out["edges"] = np.asarray(self.edges).astype(int).tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Instance":
        kind = Kind.parse(data["kind"])
        kw: dict[str, Any] = {"kind": kind, "n": int(data["n"])}
        for key in ("coords", "demands", "prizes", "penalties", "values", "weights"):
            if data.get(key) is not None:
                kw[key] = np.asarray(data[key], dtype=np.float64)
        for key in ("capacity", "budget"):
            if data.get(key) is not None:
                kw[key] = float(data[key])
        if data.get("edges") is not None:
            kw["edges"] = np.asarray(data["edges"], dtype=np.int64).reshape(-1, 2)
        inst = cls(**kw)
        validate_instance(inst)
        return inst

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "Instance":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _round9(x):
    if isinstance(x, list):
        return [_round9(v) for v in x]
    return float(format(float(x), ".9g"))


def validate_instance(inst: Instance) -> None:
    """Raise ShapeError when the payload breaks the per-kind invariants."""
    k = inst.kind
    if inst.n < 2:
        raise ShapeError("instances need at least 2 nodes")
    if k in ROUTING:
        if inst.coords is None or inst.coords.shape != (inst.n_nodes, 2):
            raise ShapeError(f"coords must have shape ({inst.n_nodes}, 2)")
        if inst.coords.min() < 0 or inst.coords.max() > 1:
            raise ShapeError("coordinates must lie in [0,1]^2")
    if k is Kind.CVRP:
        if inst.demands is None or inst.capacity is None:
            raise ShapeError("CVRP needs demands and capacity")
        d = inst.demands[1:]
        if inst.demands[0] != 0 or np.any(d <= 0) or np.any(d > inst.capacity):
            raise ShapeError("demands must lie in (0, C] with a zero-demand depot")
    if k in (Kind.OP, Kind.PCTSP) and (inst.prizes is None or inst.prizes.shape != (inst.n_nodes,)):
        raise ShapeError("prizes must cover every node")
    if k is Kind.OP and inst.budget is None:
        raise ShapeError("OP needs a length budget")
    if k is Kind.PCTSP and (inst.penalties is None or inst.penalties.shape != (inst.n_nodes,)):
        raise ShapeError("penalties must cover every node")
    if k is Kind.KP:
        if inst.values is None or inst.weights is None or inst.capacity is None:
            raise ShapeError("KP needs values, weights and capacity")
        for arr in (inst.values, inst.weights):
            if arr.shape != (inst.n,) or np.any(arr <= 0) or np.any(arr > 1):
                raise ShapeError("KP values/weights must lie in (0,1]")
    if k is Kind.MIS:
        e = inst.edges
        if e is None or e.ndim != 2 or (e.size and e.shape[1] != 2):
            raise ShapeError("MIS needs an (m, 2) edge list")
        if e.size and (np.any(e[:, 0] == e[:, 1]) or e.min() < 0 or e.max() >= inst.n):
            raise ShapeError("MIS edges must be in range and loop-free")


# ---------------------------------------------------------------------------
# Solutions


@dataclass
class Solution:
    kind: Kind
    order: np.ndarray | None = None
    flags: np.ndarray | None = None
    subset: np.ndarray | None = None
    objective: float = math.nan
    feasible: bool = False

    def copy(self) -> "Solution":
        return Solution(
            self.kind,
            None if self.order is None else self.order.copy(),
            None if self.flags is None else self.flags.copy(),
            None if self.subset is None else self.subset.copy(),
            self.objective,
            self.feasible,
        )

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind.value, "objective": self.objective, "feasible": self.feasible}
        if self.order is not None:
            out["order"] = self.order.tolist()
        if self.flags is not None:
            out["flags"] = self.flags.tolist()
        if self.subset is not None:
            out["subset"] = self.subset.tolist()
        return out


def make_solution(inst: Instance, order=None, flags=None, subset=None) -> Solution:
    """Build a Solution with its cached objective and feasibility verdict."""
    sol = Solution(
        inst.kind,
        None if order is None else np.asarray(order, dtype=np.int64),
        None if flags is None else np.asarray(flags, dtype=np.int8),
        None if subset is None else np.sort(np.asarray(subset, dtype=np.int64)),
    )
    verdict = check_feasibility(inst, sol)
    sol.feasible = verdict.ok
    sol.objective = raw_objective(inst, sol) if verdict.violation != "shape" else math.nan
    return sol


def cvrp_routes(order: np.ndarray, flags: np.ndarray) -> list[np.ndarray]:
    cuts = np.flatnonzero(flags) + 1
    return [r for r in np.split(order, cuts) if r.size]


def path_length(inst: Instance, seq: np.ndarray) -> float:
    if len(seq) < 2:
        return 0.0
    return float(inst.dist(seq[:-1], seq[1:]).sum())


def loop_length(inst: Instance, seq: np.ndarray) -> float:
    if len(seq) < 2:
        return 0.0
    return path_length(inst, seq) + float(inst.dist(seq[-1], seq[0]))


def raw_objective(inst: Instance, sol: Solution) -> float:
    """Objective in the problem's natural sense, without feasibility checks."""
    k = inst.kind
    if k is Kind.TSP:
        return loop_length(inst, sol.order)
    if k is Kind.CVRP:
        seq = _cvrp_with_depots(sol.order, sol.flags)
        return path_length(inst, seq)
    if k is Kind.OP:
        return math.fsum(inst.prizes[sol.order].tolist())
    if k is Kind.PCTSP:
        unvisited = np.ones(inst.n_nodes, dtype=bool)
        unvisited[sol.order] = False
        return loop_length(inst, sol.order) + math.fsum(inst.penalties[unvisited].tolist())
    if k is Kind.KP:
        return math.fsum(inst.values[sol.subset].tolist())
    return float(len(sol.subset))


def _cvrp_with_depots(order: np.ndarray, flags: np.ndarray) -> np.ndarray:
    """Expand the flag encoding into an explicit depot-delimited node walk."""
    out = [0]
    for node, flag in zip(order.tolist(), flags.tolist()):
        out.append(node)
        if flag:
            out.append(0)
    if out[-1] != 0:
        out.append(0)
    return np.asarray(out, dtype=np.int64)


def cost(inst: Instance, sol: Solution) -> float:
    """Objective converted to a minimization cost."""
    f = sol.objective if not math.isnan(sol.objective) else raw_objective(inst, sol)
    return f if inst.sense == "min" else -f


@dataclass(frozen=True)
class Verdict:
    ok: bool
    violation: str | None = None

    def __bool__(self) -> bool:
        return self.ok


OK = Verdict(True)


def check_feasibility(inst: Instance, sol: Solution) -> Verdict:
    k = inst.kind
    if sol.kind is not k:
        return Verdict(False, "shape")
    if k in ROUTING and sol.order is None:
        return Verdict(False, "shape")
    if k in (Kind.KP, Kind.MIS) and sol.subset is None:
        return Verdict(False, "shape")

    if k is Kind.TSP:
        o = sol.order
        if o.size != inst.n or not np.array_equal(np.sort(o), np.arange(inst.n)):
            return Verdict(False, "permutation")
        return OK
    if k is Kind.CVRP:
        o, fl = sol.order, sol.flags
        if fl is None or fl.shape != o.shape:
            return Verdict(False, "shape")
        if o.size != inst.n or not np.array_equal(np.sort(o), np.arange(1, inst.n + 1)):
            return Verdict(False, "permutation")
        if fl[-1] != 1:
            return Verdict(False, "depot")
        for route in cvrp_routes(o, fl):
            if math.fsum(inst.demands[route].tolist()) > inst.capacity + FEAS_TOL:
                return Verdict(False, "capacity")
        return OK
    if k in (Kind.OP, Kind.PCTSP):
        o = sol.order
        if o.size == 0 or o[0] != 0:
            return Verdict(False, "depot")
        if np.unique(o).size != o.size or o.max() >= inst.n_nodes or o.min() < 0:
            return Verdict(False, "permutation")
        if k is Kind.OP and loop_length(inst, o) > inst.budget + FEAS_TOL:
            return Verdict(False, "length")
        if k is Kind.PCTSP and math.fsum(inst.prizes[o].tolist()) < 1.0 - FEAS_TOL:
            return Verdict(False, "prize")
        return OK
    s = sol.subset
    if np.unique(s).size != s.size or (s.size and (s.min() < 0 or s.max() >= inst.n)):
        return Verdict(False, "shape")
    if k is Kind.KP:
        if math.fsum(inst.weights[s].tolist()) > inst.capacity + FEAS_TOL:
            return Verdict(False, "weight")
        return OK
    chosen = np.zeros(inst.n, dtype=bool)
    chosen[s] = True
    e = inst.edges
    if e.size and np.any(chosen[e[:, 0]] & chosen[e[:, 1]]):
        return Verdict(False, "independence")
    return OK


def evaluate_objective(inst: Instance, sol: Solution) -> float:
    """Exact objective of a feasible solution (cost for min kinds, value for max kinds)."""
    verdict = check_feasibility(inst, sol)
    if verdict.violation == "shape":
        raise ShapeError(f"solution does not match a {inst.kind.value} instance")
    if not verdict.ok:
        raise InfeasibleError(verdict.violation)
    return raw_objective(inst, sol)


def gap(obj: float, reference: float, sense: str) -> float:
    """Relative gap to a reference objective, in percent."""
    if not reference > 0:
        raise ValueError(f"reference objective must be positive, got {reference}")
    if sense == "min":
        return 100.0 * (obj - reference) / reference
    if sense == "max":
        return 100.0 * (reference - obj) / reference
    raise ValueError(f"sense must be 'min' or 'max', got {sense!r}")


# ---------------------------------------------------------------------------
# Construction states (feasibility masks for autoregressive decoding)


class ConstructionState:
    """Partial solution under construction; actions are node indices.

    For depot kinds, action 0 means "go to the depot" (CVRP) or "close the
    route" (OP, PCTSP).
    """

    def __init__(self, inst: Instance):
        self.inst = inst
        self.visited = np.zeros(inst.n_nodes, dtype=bool)
        self.actions: list[int] = []
        self.current: int | None = None
        self.done = False

    def mask(self) -> np.ndarray:
        raise NotImplementedError

    def step(self, a: int) -> None:
        raise NotImplementedError

    def solution(self) -> Solution:
        raise NotImplementedError

    def require(self, m: np.ndarray) -> np.ndarray:
        if not m.any():
            raise NoFeasibleAction(f"{self.inst.kind.value} prefix {self.actions}")
        return m


class TSPState(ConstructionState):
    def mask(self):
        return self.require(~self.visited)

    def step(self, a):
        self.visited[a] = True
        self.actions.append(a)
        self.current = a
        self.done = bool(self.visited.all())

    def solution(self):
        return make_solution(self.inst, order=self.actions)


class CVRPState(ConstructionState):
    def __init__(self, inst):
        super().__init__(inst)
        self.visited[0] = True
        self.current = 0
        self.load = 0.0
        self.order: list[int] = []
        self.flags: list[int] = []

    def mask(self):
        inst = self.inst
        m = ~self.visited & (inst.demands <= inst.capacity - self.load + FEAS_TOL)
        m[0] = self.current != 0
        return self.require(m)

    def step(self, a):
        self.actions.append(a)
        if a == 0:
            self.flags[-1] = 1
            self.load = 0.0
        else:
            self.visited[a] = True
            self.load += float(self.inst.demands[a])
            self.order.append(a)
            self.flags.append(0)
        self.current = a
        self.done = bool(self.visited.all())

    def solution(self):
        flags = list(self.flags)
        if flags:
            flags[-1] = 1
        return make_solution(self.inst, order=self.order, flags=flags)


class OPState(ConstructionState):
    def __init__(self, inst):
        super().__init__(inst)
        self.visited[0] = True
        self.current = 0
        self.length = 0.0
        self.order = [0]

    def mask(self):
        inst = self.inst
        cur = self.current
        idx = np.arange(inst.n_nodes)
        reach = self.length + inst.dist(cur, idx) + inst.dist(idx, 0)
        m = ~self.visited & (reach <= inst.budget)
        m[0] = True
        return m

    def step(self, a):
        self.actions.append(a)
        if a == 0:
            self.done = True
            return
        self.length += float(self.inst.dist(self.current, a))
        self.visited[a] = True
        self.order.append(a)
        self.current = a

    def solution(self):
        return make_solution(self.inst, order=self.order)


class PCTSPState(ConstructionState):
    def __init__(self, inst):
        super().__init__(inst)
        self.visited[0] = True
        self.current = 0
        self.collected = 0.0
        self.order = [0]

    def mask(self):
        m = ~self.visited
        m[0] = self.collected >= 1.0 - FEAS_TOL or not m[1:].any()
        return self.require(m)

    def step(self, a):
        self.actions.append(a)
        if a == 0:
            self.done = True
            return
        self.visited[a] = True
        self.collected += float(self.inst.prizes[a])
        self.order.append(a)
        self.current = a

    def solution(self):
        return make_solution(self.inst, order=self.order)


class KPState(ConstructionState):
    def __init__(self, inst):
        super().__init__(inst)
        self.remaining = float(inst.capacity)

    def mask(self):
        return ~self.visited & (self.inst.weights <= self.remaining + FEAS_TOL)

    def step(self, a):
        self.actions.append(a)
        self.visited[a] = True
        self.remaining -= float(self.inst.weights[a])
        self.current = a
        self.done = not self.mask().any()

    def solution(self):
        return make_solution(self.inst, subset=self.actions)


class MISState(ConstructionState):
    def __init__(self, inst):
        super().__init__(inst)
        self.blocked = np.zeros(inst.n, dtype=bool)

    def mask(self):
        return ~self.visited & ~self.blocked

    def step(self, a):
        self.actions.append(a)
        self.visited[a] = True
        self.blocked[self.inst.neighbors()[a]] = True
        self.current = a
        self.done = not self.mask().any()

    def solution(self):
        return make_solution(self.inst, subset=self.actions)


_STATES = {
    Kind.TSP: TSPState,
    Kind.CVRP: CVRPState,
    Kind.OP: OPState,
    Kind.PCTSP: PCTSPState,
    Kind.KP: KPState,
    Kind.MIS: MISState,
}


def new_state(inst: Instance) -> ConstructionState:
    return _STATES[inst.kind](inst)


def replay(inst: Instance, actions) -> ConstructionState:
    state = new_state(inst)
    for a in actions:
        state.step(int(a))
    return state


def feasible_actions(inst: Instance, partial: ConstructionState | list[int]) -> np.ndarray:
    """Boolean mask over nodes of actions that keep the prefix completable."""
    state = partial if isinstance(partial, ConstructionState) else replay(inst, partial)
    return state.mask()


# ---------------------------------------------------------------------------
# Instance generation


def default_cvrp_capacity(n: int) -> float:
    if n <= 20:
        return 30.0
    if n <= 50:
        return 40.0
    if n < 500:
        return 50.0
    if n < 1000:
        return 100.0
    if n < 2000:
        return 200.0
    return 300.0


def default_op_budget(n: int) -> float:
    if n <= 20:
        return 2.0
    if n <= 50:
        return 3.0
    return 4.0


def default_pctsp_kn(n: int) -> float:
    for limit, kn in ((20, 2.0), (50, 3.0), (100, 4.0), (500, 9.0), (1000, 12.0)):
        if n <= limit:
            return kn
    return 15.0


def generate_instance(kind: Kind | str, n: int, seed: int, params: dict | None = None) -> Instance:
    """Sample a random instance; equal arguments give bit-identical instances.

    Recognised ``params``: ``capacity`` / ``capacity_range`` (CVRP, KP),
    ``budget`` (OP), ``kn`` / ``kn_range`` (PCTSP penalty scale), ``p`` (MIS
    edge probability).
    """
    kind = Kind.parse(kind)
    params = dict(params or {})
    if n < 2:
        raise ValueError("instances need N >= 2")
    rng = np.random.default_rng(seed)

    if kind is Kind.TSP:
        inst = Instance(kind, n, coords=rng.random((n, 2)))
    elif kind is Kind.CVRP:
        coords = rng.random((n + 1, 2))
        demands = np.concatenate([[0.0], rng.integers(1, 10, size=n).astype(np.float64)])
        if "capacity_range" in params:
            lo, hi = params["capacity_range"]
            cap = float(rng.integers(int(lo), int(hi) + 1))
        else:
            cap = float(params.get("capacity", default_cvrp_capacity(n)))
        if demands.max() > cap:
            raise ValueError(f"capacity {cap} is below the largest demand")
        inst = Instance(kind, n, coords=coords, demands=demands, capacity=cap)
    elif kind is Kind.OP:
        coords = rng.random((n + 1, 2))
        d0 = np.sqrt(((coords - coords[0]) ** 2).sum(1))
        prizes = (1.0 + np.floor(99.0 * d0 / d0[1:].max())) / 100.0
        prizes[0] = 0.0
        budget = float(params.get("budget", default_op_budget(n)))
        inst = Instance(kind, n, coords=coords, prizes=prizes, budget=budget)
    elif kind is Kind.PCTSP:
        coords = rng.random((n + 1, 2))
        if "kn_range" in params:
            lo, hi = params["kn_range"]
            kn = float(rng.uniform(lo, hi))
        else:
            kn = float(params.get("kn", default_pctsp_kn(n)))
        while True:
            prizes = rng.uniform(0.0, 4.0 / n, size=n + 1)
            prizes[0] = 0.0
            if math.fsum(prizes.tolist()) >= 1.0:
                break
        penalties = rng.uniform(0.0, 3.0 * kn / n, size=n + 1)
        penalties[0] = 0.0
        inst = Instance(kind, n, coords=coords, prizes=prizes, penalties=penalties)
    elif kind is Kind.KP:
        values = 1.0 - rng.random(n)
        weights = 1.0 - rng.random(n)
        if "capacity_range" in params:
            lo, hi = params["capacity_range"]
            cap = float(rng.uniform(lo, hi))
        else:
            cap = float(params.get("capacity", n / 10.0))
        inst = Instance(kind, n, values=values, weights=weights, capacity=cap)
    else:
        p = float(params.get("p", 0.15))
        iu, ju = np.triu_indices(n, k=1)
        keep = rng.random(iu.size) < p
        edges = np.stack([iu[keep], ju[keep]], axis=1).astype(np.int64)
        inst = Instance(kind, n, edges=edges)
    validate_instance(inst)
    return inst
