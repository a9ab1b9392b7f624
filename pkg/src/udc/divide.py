"""Dividing policy: anisotropic GNN, heatmap head and initial-solution decoding."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import nnet
from .graph import EDGE_FEATURES, NODE_FEATURES, SparseGraph, build_sparse_graph
from .nnet import ParamStore
from .problems import (
    DEPOT_KINDS,
    ROUTING,
    Instance,
    Kind,
    NoFeasibleAction,
    Solution,
    make_solution,
    new_state,
)

# score given to node pairs that are not sparse-graph edges
FALLBACK_SCORE = -10.0
SUMMARY_WINDOW = 10


@dataclass
class AgnnConfig:
    kind: Kind
    layers: int = 4
    width: int = 32

    def __post_init__(self):
        self.kind = Kind.parse(self.kind)
        if self.layers < 1 or self.width < 2:
            raise ValueError("AGNN needs layers >= 1 and width >= 2")

    @property
    def node_in(self) -> int:
        return len(NODE_FEATURES[self.kind])

    @property
    def edge_in(self) -> int:
        return len(EDGE_FEATURES[self.kind])

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "layers": self.layers, "width": self.width}


def init_dividing(cfg: AgnnConfig, seed: int = 0, lr: float = 1e-4) -> ParamStore:
    rng = np.random.default_rng(seed)
    d = cfg.width
    s = ParamStore(lr=lr)
    s.add("in_node.W", nnet.linear_init(rng, cfg.node_in, d))
    s.add("in_node.b", np.zeros(d))
    s.add("in_edge.W", nnet.linear_init(rng, cfg.edge_in, d))
    s.add("in_edge.b", np.zeros(d))
    for l in range(cfg.layers):
        for m in "UVPQR":
            s.add(f"layer{l}.{m}", nnet.linear_init(rng, d, d))
        for bn in ("bn_h", "bn_e"):
            s.add(f"layer{l}.{bn}.gamma", np.ones(d))
            s.add(f"layer{l}.{bn}.beta", np.zeros(d))
            s.add_buffer(f"layer{l}.{bn}.mean", np.zeros(d))
            s.add_buffer(f"layer{l}.{bn}.var", np.ones(d))
    s.add("head.Ws", nnet.linear_init(rng, 2 * d, d))
    s.add("head.W1", nnet.linear_init(rng, d, d))
    s.add("head.b1", np.zeros(d))
    s.add("head.w2", nnet.linear_init(rng, d, 1))
    s.add("head.b2", np.zeros(1))
    return s


def agnn_forward(graph: SparseGraph, store: ParamStore, cfg: AgnnConfig, training: bool = False):
    """Node and edge embeddings after ``cfg.layers`` gated message-passing layers."""
    dt = store.dtype
    x = torch.as_tensor(graph.node_features, dtype=dt)
    ef = torch.as_tensor(graph.edge_features, dtype=dt)
    if x.shape[1] != cfg.node_in or ef.shape[1] != cfg.edge_in:
        raise nnet.NNError(
            f"graph feature widths ({x.shape[1]}, {ef.shape[1]}) do not match config ({cfg.node_in}, {cfg.edge_in})"
        )
    src = torch.as_tensor(graph.src)
    dst = torch.as_tensor(graph.dst)
    n = graph.n_nodes
    h = x @ store["in_node.W"] + store["in_node.b"]
    e = ef @ store["in_edge.W"] + store["in_edge.b"]
    buf = store.buffers
    for l in range(cfg.layers):
        p = f"layer{l}."
        Vh = h @ store[p + "V"]
        if e.shape[0]:
            msg = torch.sigmoid(e) * Vh[dst]
            agg = nnet.mean_aggregate(msg, src, n)
        else:
            agg = torch.zeros_like(Vh)
        h_new = h @ store[p + "U"] + agg
        h_new = nnet.batch_norm(
            h_new, store[p + "bn_h.gamma"], store[p + "bn_h.beta"], buf[p + "bn_h.mean"], buf[p + "bn_h.var"], training
        )
        if e.shape[0]:
            e_new = e @ store[p + "P"] + (h @ store[p + "Q"])[src] + (h @ store[p + "R"])[dst]
            e_new = nnet.batch_norm(
                e_new, store[p + "bn_e.gamma"], store[p + "bn_e.beta"], buf[p + "bn_e.mean"], buf[p + "bn_e.var"], training
            )
            e = e + nnet.silu(e_new)
        h = h + nnet.silu(h_new)
    return h, e


def partial_summary(h: torch.Tensor, committed: list[int]) -> torch.Tensor:
    """Mean of the last few committed node embeddings next to the last one."""
    d = h.shape[1]
    if not committed:
        return torch.zeros(2 * d, dtype=h.dtype)
    recent = torch.as_tensor(committed[-SUMMARY_WINDOW:])
    return torch.cat([h[recent].mean(0), h[committed[-1]]])


def heatmap_head(emb: torch.Tensor, summaries: torch.Tensor, store: ParamStore) -> torch.Tensor:
    """Scores for every row of ``emb`` (edges, or nodes for MIS) under each summary.

    ``summaries`` has shape (S, 2d); the result has shape (S, rows).
    """
    if summaries.dim() == 1:
        summaries = summaries[None]
    ctx = summaries @ store["head.Ws"]
    z = emb[None, :, :] + ctx[:, None, :]
    z = nnet.silu(z @ store["head.W1"] + store["head.b1"])
    return (z @ store["head.w2"]).squeeze(-1) + store["head.b2"]


@dataclass
class Heatmap:
    graph: SparseGraph
    scores: np.ndarray  # per edge, or per node when ``per_node``
    per_node: bool = False

    def row(self, node: int, ptr: np.ndarray) -> np.ndarray:
        out = np.full(self.graph.n_nodes, FALLBACK_SCORE)
        lo, hi = ptr[node], ptr[node + 1]
        out[self.graph.dst[lo:hi]] = self.scores[lo:hi]
        return out

    def dense(self) -> np.ndarray:
        n = self.graph.n_nodes
        if n > 2000:
            raise ValueError("dense heatmap views are limited to N <= 2000")
        out = np.full((n, n), FALLBACK_SCORE)
        out[self.graph.src, self.graph.dst] = self.scores
        return out


# ---------------------------------------------------------------------------
# Decoding


@dataclass
class Step:
    prev: int | None  # node whose heatmap row produced this choice (None: uniform start)
    mask: np.ndarray | None
    action: int
    segment: int
    log_prob: float


@dataclass
class Rollout:
    solution: Solution
    actions: list[int]
    log_prob: float
    steps: list[Step] = field(default_factory=list)
    # committed prefixes that conditioned each heatmap segment
    prefixes: list[list[int]] = field(default_factory=list)
    head_calls: list[int] = field(default_factory=list)


def _start_nodes(inst: Instance, alpha: int, mode: str, rng: np.random.Generator) -> list[int | None]:
    if inst.kind in DEPOT_KINDS or inst.kind is Kind.MIS:
        return [None] * alpha
    n = inst.n_nodes
    if mode == "greedy":
        perm = rng.permutation(n)
        return [int(perm[i % n]) for i in range(alpha)]
    return [None] * alpha  # sampled uniformly inside the rollout


def _pick(logits: np.ndarray, mask: np.ndarray, mode: str, rng: np.random.Generator) -> tuple[int, float]:
    z = np.where(mask, logits, -np.inf)
    z = z - z.max()
    p = np.exp(z)
    total = p.sum()
    p /= total
    if mode == "greedy":
        a = int(np.argmax(np.where(mask, logits, -np.inf)))
    else:
        cdf = np.cumsum(p)
        a = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        a = min(a, len(p) - 1)
        while not mask[a]:  # guard against round-off landing on a zero-probability slot
            a -= 1
    return a, float(np.log(p[a]))


def decode(
    inst: Instance,
    graph: SparseGraph,
    scores_for,
    alpha: int,
    mode: str = "sample",
    seed: int = 0,
    T: int = 1,
    record: bool = True,
) -> list[Rollout]:
    """Decode ``alpha`` feasible solutions from heatmap scores.

    ``scores_for(committed)`` returns the heatmap (per-edge or per-node scores)
    conditioned on the committed prefix; it is invoked once at the start and
    again every ``N // T`` decode steps.
    """
    if mode not in ("sample", "greedy"):
        raise ValueError(f"unknown decode mode {mode!r}")
    n = graph.n_nodes
    T = max(1, min(int(T), n))
    seg_len = n // T
    rng = np.random.default_rng(seed)
    ptr, _ = graph.csr()
    per_node = inst.kind is Kind.MIS
    starts = _start_nodes(inst, alpha, mode, rng)
    first: list[int] = [0] if inst.kind in DEPOT_KINDS else []
    base = scores_for(first)
    out = []
    for r in range(alpha):
        state = new_state(inst)
        committed = list(first)
        scores = base
        segment = 0
        steps: list[Step] = []
        prefixes = [list(committed)]
        head_calls = [0]
        logp = 0.0
        n_actions = 0
        while not state.done:
            if segment < T - 1 and n_actions == (segment + 1) * seg_len:
                segment += 1
                scores = scores_for(committed)
                prefixes.append(list(committed))
                head_calls.append(n_actions)
            mask = state.mask()
            if not mask.any():
                if inst.kind in (Kind.KP, Kind.MIS):
                    break
                raise NoFeasibleAction(f"{inst.kind.value} decode")
            if per_node:
                prev = None
                a, lp = _pick(scores, mask, mode, rng)
            elif state.current is None:
                prev = None
                if starts[r] is not None and mask[starts[r]]:
                    a = starts[r]
                else:
                    choices = np.flatnonzero(mask)
                    a = int(choices[rng.integers(choices.size)])
                lp = -math.log(int(mask.sum()))
            else:
                prev = state.current
                lo, hi = ptr[prev], ptr[prev + 1]
                row = np.full(n, FALLBACK_SCORE)
                row[graph.dst[lo:hi]] = scores[lo:hi]
                a, lp = _pick(row, mask, mode, rng)
            if record:
                steps.append(Step(prev, mask.copy(), a, segment, lp))
            logp += lp
            state.step(a)
            committed.append(a)
            n_actions += 1
            if inst.kind in (Kind.KP, Kind.MIS) and not state.mask().any():
                break
        out.append(Rollout(state.solution(), list(state.actions), logp, steps, prefixes, head_calls))
    return out


def decode_initial(heatmap: Heatmap, inst: Instance, mode: str, alpha: int, seed: int) -> list[Rollout]:
    return decode(inst, heatmap.graph, lambda _prefix: heatmap.scores, alpha, mode, seed, T=1)


def heatmap_scores(h: torch.Tensor, e: torch.Tensor, store: ParamStore, kind: Kind, committed: list[int]) -> torch.Tensor:
    emb = h if kind is Kind.MIS else e
    return heatmap_head(emb, partial_summary(h, committed), store)[0]


def decode_t_revisit(
    inst: Instance,
    graph: SparseGraph,
    store: ParamStore,
    cfg: AgnnConfig,
    T: int,
    alpha: int,
    mode: str,
    seed: int,
    record: bool = True,
    embeddings=None,
) -> list[Rollout]:
    with torch.no_grad():
        h, e = embeddings if embeddings is not None else agnn_forward(graph, store, cfg, training=False)
        h, e = h.detach(), e.detach()

        def scores_for(committed):
            return heatmap_scores(h, e, store, cfg.kind, committed).double().numpy()

        return decode(inst, graph, scores_for, alpha, mode, seed, T=T, record=record)


def rollout_log_probs(h: torch.Tensor, e: torch.Tensor, store: ParamStore, cfg: AgnnConfig, graph: SparseGraph, rollouts: list[Rollout]) -> torch.Tensor:
    """Differentiable log-probabilities of recorded rollouts (replay of their steps)."""
    n = graph.n_nodes
    src = torch.as_tensor(graph.src)
    dst = torch.as_tensor(graph.dst)
    out = []
    for ro in rollouts:
        if not ro.steps and ro.actions:
            raise ValueError("rollout was decoded without step records")
        total = torch.zeros((), dtype=torch.float64)
        const = 0.0
        for seg, prefix in enumerate(ro.prefixes):
            steps = [s for s in ro.steps if s.segment == seg]
            if not steps:
                continue
            scores = heatmap_scores(h, e, store, cfg.kind, prefix).double()
            scored = [s for s in steps if s.prev is not None or cfg.kind is Kind.MIS]
            const += sum(s.log_prob for s in steps if s.prev is None and cfg.kind is not Kind.MIS)
            if not scored:
                continue
            masks = torch.as_tensor(np.stack([s.mask for s in scored]))
            acts = torch.as_tensor([s.action for s in scored])
            if cfg.kind is Kind.MIS:
                logits = scores[None, :].expand(len(scored), n)
            else:
                dense = torch.full((n, n), FALLBACK_SCORE, dtype=torch.float64)
                dense = dense.index_put((src, dst), scores)
                logits = dense[torch.as_tensor([s.prev for s in scored])]
            lp = nnet.masked_log_softmax(logits, masks)
            total = total + lp.gather(1, acts[:, None]).sum()
        out.append(total + const)
    return torch.stack(out) if out else torch.zeros(0, dtype=torch.float64)


# ---------------------------------------------------------------------------
# Heuristic initial solutions


def _nearest(inst: Instance, cur: int, cand: np.ndarray) -> int:
    d = inst.dist(np.full(cand.size, cur), cand)
    return int(cand[np.argmin(d)])


def _cheapest_insertion(inst: Instance, tour: list[int], node: int, closed: bool = True) -> tuple[int, float]:
    t = np.asarray(tour)
    nxt = np.roll(t, -1) if closed else t[1:]
    prv = t if closed else t[:-1]
    delta = inst.dist(prv, node) + inst.dist(np.full(prv.size, node), nxt) - inst.dist(prv, nxt)
    i = int(np.argmin(delta))
    return i + 1, float(delta[i])


def _split_giant(inst: Instance, order: list[int]) -> Solution:
    flags, load = [], 0.0
    for i, v in enumerate(order):
        if flags and load + inst.demands[v] > inst.capacity:
            flags[-1] = 1
            load = 0.0
        load += inst.demands[v]
        flags.append(0)
    flags[-1] = 1
    return make_solution(inst, order=order, flags=flags)


def heuristic_initial(inst: Instance, method: str, seed: int = 0) -> Solution:
    """Random, nearest-greedy or random-insertion initial solutions for routing kinds."""
    if inst.kind not in ROUTING:
        raise ValueError(f"heuristic initial solutions are defined for routing kinds, not {inst.kind.value}")
    if method not in ("random", "nearest_greedy", "random_insertion"):
        raise ValueError(f"unknown heuristic {method!r}")
    rng = np.random.default_rng(seed)
    k = inst.kind
    customers = np.arange(inst.n) if k is Kind.TSP else np.arange(1, inst.n + 1)

    if method == "nearest_greedy":
        state = new_state(inst)
        if k is Kind.TSP:
            state.step(0)
        while not state.done:
            mask = state.mask()
            cur = state.current
            cand = np.flatnonzero(mask)
            if k in (Kind.CVRP, Kind.OP, Kind.PCTSP):
                nodes = cand[cand != 0]
                if k is Kind.PCTSP and mask[0]:
                    state.step(0)
                    continue
                if nodes.size == 0:
                    state.step(0)
                    continue
                cand = nodes
            state.step(_nearest(inst, cur, cand))
        return state.solution()

    order = rng.permutation(customers).tolist()
    if method == "random":
        if k is Kind.TSP:
            return make_solution(inst, order=order)
        if k is Kind.CVRP:
            return _split_giant(inst, order)
        route = [0]
        if k is Kind.OP:
            length = 0.0
            for v in order:
                extra = float(inst.dist(route[-1], v) + inst.dist(v, 0) - inst.dist(route[-1], 0))
                if length + extra <= inst.budget:
                    length += extra
                    route.append(v)
        else:
            got = 0.0
            for v in order:
                if got >= 1.0:
                    break
                route.append(v)
                got += float(inst.prizes[v])
        return make_solution(inst, order=route)

    # random insertion
    if k in (Kind.TSP, Kind.CVRP):
        tour = order[:2] if k is Kind.TSP else order[:1]
        for v in order[len(tour):]:
            pos, _ = _cheapest_insertion(inst, tour, v)
            tour.insert(pos, v)
        if k is Kind.TSP:
            return make_solution(inst, order=tour)
        return _split_giant(inst, tour)
    route = [0]
    length = 0.0
    got = 0.0
    for v in order:
        if k is Kind.PCTSP and got >= 1.0:
            break
        pos, delta = _cheapest_insertion(inst, route, v)
        if k is Kind.OP and length + delta > inst.budget:
            continue
        route.insert(pos, v)
        length += delta
        got += float(inst.prizes[v])
    return make_solution(inst, order=route)


def initial_embeddings(inst: Instance, store: ParamStore, cfg: AgnnConfig, k: int | None = None, training: bool = False):
    graph = build_sparse_graph(inst, k)
    h, e = agnn_forward(graph, store, cfg, training=training)
    return graph, h, e
