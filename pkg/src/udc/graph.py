"""Sparse input graphs for the dividing network."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .problems import Instance, Kind

log = logging.getLogger(__name__)

# bumped whenever node/edge feature layouts change; stored in checkpoints
FEATURE_VERSION = 1

NODE_FEATURES = {
    Kind.TSP: ("x", "y"),
    Kind.CVRP: ("x", "y", "demand/C", "is_depot"),
    Kind.OP: ("x", "y", "prize", "is_depot"),
    Kind.PCTSP: ("x", "y", "prize*N/4", "penalty/max", "is_depot"),
    Kind.KP: ("value", "weight", "ratio/max"),
    Kind.MIS: ("bias", "degree/max"),
}
EDGE_FEATURES = {k: ("affinity",) if k is Kind.KP else ("const",) if k is Kind.MIS else ("distance",) for k in Kind}


@dataclass
class SparseGraph:
    n_nodes: int
    node_features: np.ndarray  # (n_nodes, F)
    src: np.ndarray  # (E,)
    dst: np.ndarray  # (E,)
    edge_features: np.ndarray  # (E, 1)
    k: int
    warnings: tuple[str, ...] = ()

    @property
    def n_edges(self) -> int:
        return int(self.src.size)

    def csr(self) -> tuple[np.ndarray, np.ndarray]:
        """Row pointer over ``src`` (edges are stored grouped by source)."""
        counts = np.bincount(self.src, minlength=self.n_nodes)
        ptr = np.zeros(self.n_nodes + 1, dtype=np.int64)
        np.cumsum(counts, out=ptr[1:])
        return ptr, self.dst


def node_features(inst: Instance) -> np.ndarray:
    k = inst.kind
    if k is Kind.TSP:
        return inst.coords.astype(np.float64)
    if k in (Kind.CVRP, Kind.OP, Kind.PCTSP):
        depot = np.zeros(inst.n_nodes)
        depot[0] = 1.0
        if k is Kind.CVRP:
            extra = [inst.demands / inst.capacity]
        elif k is Kind.OP:
            extra = [inst.prizes]
        else:
            pen = inst.penalties / max(inst.penalties.max(), 1e-12)
            extra = [inst.prizes * inst.n / 4.0, pen]
        return np.column_stack([inst.coords, *extra, depot])
    if k is Kind.KP:
        ratio = inst.values / inst.weights
        return np.column_stack([inst.values, inst.weights, ratio / ratio.max()])
    deg = np.bincount(inst.edges.ravel(), minlength=inst.n).astype(np.float64)
    return np.column_stack([np.ones(inst.n), deg / max(deg.max(), 1.0)])


def _top_k_rows(score: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest entries per row; ties go to the lower index."""
    # stable argsort keeps equal scores in index order
    return np.argsort(score, axis=1, kind="stable")[:, :k]


def knn_edges(points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Directed KNN edges by Euclidean distance, grouped by source node.

    A KD-tree supplies k+2 candidates per node (self included); rows whose
    cut-off distance is tied with the last candidate fall back to a dense scan
    so that ties always go to the lower index.
    """
    n = len(points)
    m = min(n, k + 2)
    d, idx = cKDTree(points).query(points, m)
    d, idx = np.atleast_2d(d), np.atleast_2d(idx)
    rows = np.arange(n)
    self_hit = idx == rows[:, None]
    d = np.where(self_hit, np.inf, d)
    order = np.lexsort((idx, d), axis=1)
    d = np.take_along_axis(d, order, 1)
    idx = np.take_along_axis(idx, order, 1)
    nbr = idx[:, :k].copy()
    if m < n:
        # the k-th distance equals the largest fetched one: the tie may continue past the candidates
        for r in np.flatnonzero(d[:, k - 1] >= np.max(np.where(np.isinf(d), -np.inf, d), 1)):
            diff = points - points[r]
            dr = np.sqrt((diff * diff).sum(-1))
            dr[r] = np.inf
            nbr[r] = _top_k_rows(dr[None], k)[0]
    return np.repeat(rows, k), nbr.ravel()


def kp_affinity(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Neighbourhood weight 1 - d'_ij / max_q d'_iq with d'_ij = (v_i+v_j)/(w_i+w_j)."""
    d = (values[:, None] + values[None, :]) / (weights[:, None] + weights[None, :])
    np.fill_diagonal(d, -np.inf)
    return 1.0 - d / d.max(axis=1, keepdims=True)


def build_sparse_graph(inst: Instance, k: int | None = None) -> SparseGraph:
    """Sparse graph of an instance: KNN for routing and KP, native edges for MIS."""
    feats = node_features(inst)
    n = inst.n_nodes
    warnings: list[str] = []

    if inst.kind is Kind.MIS:
        e = inst.edges
        src = np.concatenate([e[:, 0], e[:, 1]])
        dst = np.concatenate([e[:, 1], e[:, 0]])
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
        return SparseGraph(n, feats, src, dst, np.ones((src.size, 1)), k=0)

    if k is None:
        k = min(20, n - 1)
    if k < 1:
        raise ValueError("K must be >= 1")
    if k >= n:
        msg = f"K={k} >= N={n}; clamped to {n - 1}"
        log.warning(msg)
        warnings.append(msg)
        k = n - 1

    if inst.kind is Kind.KP:
        w = kp_affinity(inst.values, inst.weights)
        np.fill_diagonal(w, np.inf)
        nbr = _top_k_rows(w, k)
        src = np.repeat(np.arange(n), k)
        dst = nbr.ravel()
        ef = w[src, dst][:, None]
    else:
        src, dst = knn_edges(inst.coords, k)
        ef = inst.dist(src, dst)[:, None]
    return SparseGraph(n, feats, src.astype(np.int64), dst.astype(np.int64), ef, k=k, warnings=tuple(warnings))
