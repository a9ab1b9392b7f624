"""Lightweight constructive conquering policy and batched sub-problem environments.

Every environment runs a batch of sub-problems in lock step with numpy state;
the policy scores tokens with a pointer-style attention query built from the
current token, the target token, the mean token and a few state scalars.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .. import nnet
from ..nnet import ParamStore
from ..problems import FEAS_TOL, Instance, Kind
from .subproblem import SubProblem

N_SCALARS = 4
CLIP = 10.0
# slack for sums compared against dispatched budgets, kept far below FEAS_TOL so
# many windows cannot accumulate a parent-level violation
SUM_TOL = 1e-12

TOKEN_FEATURES = {
    Kind.TSP: ("x", "y", "is_start", "is_end"),
    Kind.CVRP: ("x", "y", "demand/C", "is_depot", "is_start", "is_end", "pair_first", "pair_last"),
    Kind.OP: ("x", "y", "prize", "is_depot", "is_start", "is_end", "is_forced"),
    Kind.PCTSP: ("x", "y", "prize/floor", "penalty", "is_depot", "is_start", "is_end", "is_forced"),
    Kind.KP: ("value", "weight/cap", "ratio"),
    Kind.MIS: ("degree", "forbidden"),
}


@dataclass
class ConquerConfig:
    kind: Kind
    width: int = 32

    def __post_init__(self):
        self.kind = Kind.parse(self.kind)
        if self.width < 2:
            raise ValueError("conquering width must be >= 2")

    @property
    def token_in(self) -> int:
        return len(TOKEN_FEATURES[self.kind])

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "width": self.width}


def init_conquering(cfg: ConquerConfig, seed: int = 0, lr: float = 1e-4) -> ParamStore:
    rng = np.random.default_rng(seed)
    d = cfg.width
    s = ParamStore(lr=lr)
    s.add("in.W", nnet.linear_init(rng, cfg.token_in, d))
    s.add("in.b", np.zeros(d))
    for blk in ("enc1", "enc2"):
        s.add(f"{blk}.W", nnet.linear_init(rng, d, d))
        s.add(f"{blk}.M", nnet.linear_init(rng, d, d))
        s.add(f"{blk}.b", np.zeros(d))
    s.add("q.W", nnet.linear_init(rng, 3 * d + N_SCALARS, d))
    s.add("k.W", nnet.linear_init(rng, d, d))
    s.add("lam", np.full(1, -4.0))
    return s


# ---------------------------------------------------------------------------
# Environments


class BatchEnv:
    """Lock-step construction over a batch of sub-problems (padded to M tokens)."""

    def __init__(self, inst: Instance, sps: list[SubProblem], reverse: list[bool]):
        self.inst = inst
        self.sps = sps
        self.reverse = np.asarray(reverse, dtype=bool)
        self.B = len(sps)
        self.M = max(sp.size for sp in sps)
        self.valid = np.zeros((self.B, self.M), dtype=bool)
        for b, sp in enumerate(sps):
            self.valid[b, : sp.size] = True
        self.cur = np.full(self.B, -1, dtype=np.int64)
        self.end = np.full(self.B, -1, dtype=np.int64)
        self.done = np.zeros(self.B, dtype=bool)
        self.head = np.full(self.B, -1, dtype=np.int64)  # pinned first token, if any
        self._hist: list[tuple[np.ndarray, np.ndarray]] = []
        self.xy = None
        self._D = None

    def _pad(self, key_fn, width: int) -> np.ndarray:
        out = np.zeros((self.B, self.M, width))
        for b, sp in enumerate(self.sps):
            out[b, : sp.size] = key_fn(b, sp)
        return out

    def features(self) -> np.ndarray:
        raise NotImplementedError

    def mask(self) -> np.ndarray:
        raise NotImplementedError

    def scalars(self) -> np.ndarray:
        return np.zeros((self.B, N_SCALARS))

    def step(self, actions: np.ndarray) -> None:
        raise NotImplementedError

    def _advance(self, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Record one step; returns the live rows and their actions."""
        idx = np.flatnonzero(~self.done)
        a = np.asarray(actions, dtype=np.int64)[idx]
        self._hist.append((idx, a))
        self.cur[idx] = a
        return idx, a

    def sequences(self) -> list[list[int]]:
        grid = np.full((self.B, len(self._hist) + 1), -1, dtype=np.int64)
        grid[:, 0] = self.head
        for t, (idx, a) in enumerate(self._hist, start=1):
            grid[idx, t] = a
        return [row[row >= 0].tolist() for row in grid]

    def _finish(self, seq: list[int], b: int) -> list[int]:
        return seq[::-1] if self.reverse[b] else seq

    def results(self) -> list[list[int]]:
        return [self._finish(seq, b) for b, seq in enumerate(self.sequences())]

    def _finish_mask(self, m: np.ndarray) -> np.ndarray:
        m = m & self.valid
        m[self.done] = False
        m[self.done, 0] = True
        return m


class _PathEnv(BatchEnv):
    """Shared start/end handling for pinned-endpoint kinds."""

    def _pins(self):
        s = np.array([sp.constraints["start"] for sp in self.sps])
        t = np.array([sp.constraints["end"] for sp in self.sps])
        start = np.where(self.reverse, t, s)
        end = np.where(self.reverse, s, t)
        return start, end

    def _dist_from(self, cur: np.ndarray) -> np.ndarray:
        if self._D is None:
            d = self.xy[:, None, :, :] - self.xy[:, :, None, :]
            self._D = np.sqrt((d * d).sum(-1))
        return self._D[np.arange(self.B), cur]


class TSPEnv(_PathEnv):
    def __init__(self, inst, sps, reverse):
        super().__init__(inst, sps, reverse)
        self.xy = self._pad(lambda b, sp: sp.coords, 2)
        self.start, self.end = self._pins()
        ar = np.arange(self.B)
        self.visited = ~self.valid.copy()
        self.visited[ar, self.start] = True
        self.cur = self.start.copy()
        self.left = self.valid.sum(1) - 1
        self.head = self.start.copy()

    def features(self):
        f = np.zeros((self.B, self.M, 4))
        f[..., :2] = self.xy
        ar = np.arange(self.B)
        f[ar, self.start, 2] = 1
        f[ar, self.end, 3] = 1
        return f

    def mask(self):
        m = ~self.visited
        ar = np.arange(self.B)
        m[ar, self.end] = self.left == 1
        return self._finish_mask(m)

    def scalars(self):
        s = np.zeros((self.B, N_SCALARS))
        s[:, 0] = self.left / self.M
        return s

    def step(self, actions):
        idx, a = self._advance(actions)
        self.visited[idx, a] = True
        self.left[idx] -= 1
        self.done[idx] |= a == self.end[idx]


class CVRPEnv(_PathEnv):
    def __init__(self, inst, sps, reverse):
        super().__init__(inst, sps, reverse)
        self.xy = self._pad(lambda b, sp: sp.coords, 2)
        self.dem = self._pad(lambda b, sp: inst.demands[sp.nodes][:, None], 1)[..., 0]
        self.start, self.end = self._pins()
        self.depot = np.array([sp.constraints["depot"] for sp in sps])
        c = [sp.constraints for sp in sps]
        self.C = np.array([x["capacity"] for x in c])
        cf = np.array([x["cap_first"] for x in c])
        cl = np.array([x["cap_last"] for x in c])
        self.cap_first = np.where(self.reverse, cl, cf)
        self.cap_last = np.where(self.reverse, cf, cl)
        self.cap_single = np.array([x["cap_single"] for x in c])
        ar = np.arange(self.B)
        self.visited = ~self.valid.copy()
        self.visited[ar, self.start] = True
        self.visited[ar, self.depot] = True
        self.cur = self.start.copy()
        self.load = self.dem[ar, self.start].copy()
        self.first = np.ones(self.B, dtype=bool)
        self.left = self.valid.sum(1) - 3  # interior nodes still to visit
        self.head = self.start.copy()

    def features(self):
        f = np.zeros((self.B, self.M, 8))
        f[..., :2] = self.xy
        ar = np.arange(self.B)
        f[..., 2] = self.dem / self.C[:, None]
        f[ar, self.depot, 3] = 1
        f[ar, self.start, 4] = 1
        f[ar, self.end, 5] = 1
        tot = self.cap_first + self.cap_last
        safe = np.where(tot > 0, tot, 1.0)
        f[..., 6] = np.where(tot > 0, self.cap_first / safe, 0.5)[:, None]
        f[..., 7] = np.where(tot > 0, self.cap_last / safe, 0.5)[:, None]
        return f

    def mask(self):
        ar = np.arange(self.B)
        at_depot = self.cur == self.depot
        room = np.where(self.first, self.cap_first, self.C) - self.load
        m = ~self.visited & (self.dem <= room[:, None] + SUM_TOL)
        m[ar, self.end] = False
        m[ar, self.depot] = ~at_depot
        end_cap = np.where(self.first, self.cap_single, self.cap_last)
        d_end = self.dem[ar, self.end]
        can_end = np.where(at_depot, d_end <= self.cap_last + SUM_TOL, self.load + d_end <= end_cap + SUM_TOL)
        m[ar, self.end] = (self.left == 0) & can_end
        return self._finish_mask(m)

    def scalars(self):
        s = np.zeros((self.B, N_SCALARS))
        s[:, 0] = self.load / self.C
        s[:, 1] = (np.where(self.first, self.cap_first, self.C) - self.load) / self.C
        s[:, 2] = self.first
        s[:, 3] = self.left / self.M
        return s

    def step(self, actions):
        idx, a = self._advance(actions)
        dep = a == self.depot[idx]
        fin = a == self.end[idx]
        self.load[idx[dep]] = 0.0
        self.first[idx[dep]] = False
        self.done[idx[fin]] = True
        o, ao = idx[~dep & ~fin], a[~dep & ~fin]
        self.visited[o, ao] = True
        self.load[o] += self.dem[o, ao]
        self.left[o] -= 1


class TourSubsetEnv(_PathEnv):
    """Sub-OP and sub-PCTSP: pinned ends, optional interior nodes, forced depot."""

    def __init__(self, inst, sps, reverse):
        super().__init__(inst, sps, reverse)
        self.op = inst.kind is Kind.OP
        self.xy = self._pad(lambda b, sp: sp.coords, 2)
        self.start, self.end = self._pins()
        ar = np.arange(self.B)
        self.forced = np.array([sp.constraints["forced"][0] if sp.constraints["forced"] else -1 for sp in sps])
        self.prize = self._pad(lambda b, sp: inst.prizes[sp.nodes][:, None], 1)[..., 0]
        self.nprize = self._pad(lambda b, sp: sp.features["prize"][:, None], 1)[..., 0]
        if self.op:
            self.budget = np.array([sp.constraints["budget"] for sp in sps])
        else:
            self.floor = np.array([sp.constraints["prize_floor"] for sp in sps])
            self.pen = self._pad(lambda b, sp: sp.features["penalty"][:, None], 1)[..., 0]
        self.visited = ~self.valid.copy()
        self.visited[ar, self.start] = True
        self.cur = self.start.copy()
        self.length = np.zeros(self.B)
        self.collected = np.zeros(self.B)
        self.head = self.start.copy()

    def features(self):
        w = 7 if self.op else 8
        f = np.zeros((self.B, self.M, w))
        f[..., :2] = self.xy
        f[..., 2] = self.nprize
        col = 3
        if not self.op:
            f[..., 3] = self.pen
            col = 4
        ar = np.arange(self.B)
        for b, sp in enumerate(self.sps):
            f[b, : sp.size, col] = sp.nodes == 0
        f[ar, self.start, col + 1] = 1
        f[ar, self.end, col + 2] = 1
        has = self.forced >= 0
        f[ar[has], self.forced[has], col + 3] = 1
        return f

    def mask(self):
        ar = np.arange(self.B)
        pending = (self.forced >= 0) & ~self.visited[ar, np.maximum(self.forced, 0)]
        m = ~self.visited.copy()
        m[ar, self.end] = False
        if self.op:
            d_cur = self._dist_from(self.cur)
            d_end = self._dist_from(self.end)
            via = d_end
            if pending.any():
                d_f = self._dist_from(np.maximum(self.forced, 0))
                f_to_end = d_end[ar, np.maximum(self.forced, 0)]
                via = np.where(pending[:, None], d_f + f_to_end[:, None], d_end)
            reach = self.length[:, None] + d_cur + via
            m &= reach <= self.budget[:, None]
            fidx = np.flatnonzero(pending)
            m[fidx, self.forced[fidx]] = True
            m[ar, self.end] = ~pending
        else:
            m[ar, self.end] = ~pending & (self.collected >= self.floor - SUM_TOL)
            rest = (~self.visited & self.valid).copy()
            rest[ar, self.end] = False
            exhausted = ~rest.any(1)
            m[ar[exhausted & ~pending], self.end[exhausted & ~pending]] = True
        return self._finish_mask(m)

    def scalars(self):
        s = np.zeros((self.B, N_SCALARS))
        if self.op:
            s[:, 0] = self.budget - self.length
            s[:, 1] = self.collected
        else:
            floor = np.where(self.floor > 0, self.floor, 1.0)
            s[:, 0] = self.collected / floor
            s[:, 1] = self.length
        s[:, 2] = self._dist_from(self.cur)[np.arange(self.B), self.end]
        return s

    def step(self, actions):
        prev = self.cur.copy()
        idx, a = self._advance(actions)
        d = self.xy[idx, a] - self.xy[idx, prev[idx]]
        self.length[idx] += np.sqrt((d * d).sum(1))
        self.visited[idx, a] = True
        self.collected[idx] += self.prize[idx, a]
        self.done[idx] |= a == self.end[idx]


class KPEnv(BatchEnv):
    def __init__(self, inst, sps, reverse):
        super().__init__(inst, sps, reverse)
        self.w = self._pad(lambda b, sp: inst.weights[sp.nodes][:, None], 1)[..., 0]
        self.cap = np.array([sp.constraints["capacity"] for sp in sps])
        self.room = self.cap.copy()
        self.visited = ~self.valid.copy()
        self.done = ~self.mask_raw().any(1)

    def features(self):
        f = np.zeros((self.B, self.M, 3))
        for b, sp in enumerate(self.sps):
            v, w = sp.features["value"], sp.features["weight"]
            f[b, : sp.size, 0] = v
            f[b, : sp.size, 1] = w
            r = self.inst.values[sp.nodes] / self.inst.weights[sp.nodes]
            f[b, : sp.size, 2] = r / r.max()
        return f

    def mask_raw(self):
        return ~self.visited & (self.w <= self.room[:, None] + SUM_TOL)

    def mask(self):
        return self._finish_mask(self.mask_raw())

    def scalars(self):
        s = np.zeros((self.B, N_SCALARS))
        s[:, 0] = self.room / np.where(self.cap > 0, self.cap, 1.0)
        return s

    def step(self, actions):
        idx, a = self._advance(actions)
        self.visited[idx, a] = True
        self.room[idx] -= self.w[idx, a]
        self.done |= ~self.mask_raw().any(1)

    def _finish(self, seq, b):
        return sorted(seq)


class MISEnv(BatchEnv):
    def __init__(self, inst, sps, reverse):
        super().__init__(inst, sps, reverse)
        self.adj = np.zeros((self.B, self.M, self.M), dtype=bool)
        self.blocked = ~self.valid.copy()
        for b, sp in enumerate(sps):
            self.adj[b, : sp.size, : sp.size] = sp.features["adjacency"]
            self.blocked[b, : sp.size] |= sp.constraints["forbidden"]
        self.visited = np.zeros((self.B, self.M), dtype=bool)
        self.done = ~self.mask_raw().any(1)

    def features(self):
        f = np.zeros((self.B, self.M, 2))
        for b, sp in enumerate(self.sps):
            f[b, : sp.size, 0] = sp.features["degree"]
            f[b, : sp.size, 1] = sp.constraints["forbidden"]
        return f

    def mask_raw(self):
        return ~self.visited & ~self.blocked

    def mask(self):
        return self._finish_mask(self.mask_raw())

    def scalars(self):
        s = np.zeros((self.B, N_SCALARS))
        s[:, 0] = self.visited.sum(1) / self.M
        s[:, 1] = self.mask_raw().sum(1) / self.M
        return s

    def step(self, actions):
        idx, a = self._advance(actions)
        self.visited[idx, a] = True
        self.blocked[idx] |= self.adj[idx, a]
        self.done |= ~self.mask_raw().any(1)

    def _finish(self, seq, b):
        return sorted(seq)


ENVS = {Kind.TSP: TSPEnv, Kind.CVRP: CVRPEnv, Kind.OP: TourSubsetEnv, Kind.PCTSP: TourSubsetEnv, Kind.KP: KPEnv, Kind.MIS: MISEnv}


# ---------------------------------------------------------------------------
# Policy


def encode(store: ParamStore, feats: np.ndarray, valid: np.ndarray):
    dt = store.dtype
    x = torch.as_tensor(feats, dtype=dt)
    v = torch.as_tensor(valid, dtype=dt)[..., None]
    cnt = v.sum(1).clamp_min(1.0)
    h = x @ store["in.W"] + store["in.b"]
    for blk in ("enc1", "enc2"):
        ctx = (h * v).sum(1) / cnt
        h = h + nnet.silu(h @ store[f"{blk}.W"] + (ctx @ store[f"{blk}.M"])[:, None, :] + store[f"{blk}.b"])
    h_mean = (h * v).sum(1) / cnt
    keys = h @ store["k.W"]
    zero = torch.zeros(h.shape[0], 1, h.shape[2], dtype=dt)
    return torch.cat([h, zero], 1), keys, h_mean


@dataclass
class Trace:
    """Recorded decisions of one batched rollout, enough to replay log-probabilities."""

    feats: np.ndarray
    valid: np.ndarray
    masks: list = field(default_factory=list)
    cur: list = field(default_factory=list)
    end: list = field(default_factory=list)
    scal: list = field(default_factory=list)
    dist: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    active: list = field(default_factory=list)


@dataclass
class BatchRollout:
    env: BatchEnv
    seqs: list[list[int]]
    log_probs: np.ndarray
    trace: Trace | None


def _numpy_params(store: ParamStore) -> dict[str, np.ndarray]:
    # cached per store; in-place optimizer updates bump tensor versions
    stamp = tuple((id(t), t._version) for t in store.params.values())
    hit = getattr(store, "_np_cache", None)
    if hit is not None and hit[0] == stamp:
        return hit[1]
    P = {name: t.detach().double().numpy().copy() for name, t in store.params.items()}
    store._np_cache = (stamp, P)
    return P


class _FastLogits:
    """No-grad logits with the query projection folded into per-token tables.

    The query is linear in (h_cur, h_end, h_mean, scalars), so its dot product
    with every key splits into lookups of precomputed (B, M+1, M) tables.
    """

    def __init__(self, store: ParamStore, feats: np.ndarray, valid: np.ndarray):
        P = _numpy_params(store)
        v = valid[..., None].astype(np.float64)
        cnt = np.maximum(v.sum(1), 1.0)
        h = feats @ P["in.W"] + P["in.b"]
        for blk in ("enc1", "enc2"):
            ctx = (h * v).sum(1) / cnt
            z = h @ P[f"{blk}.W"] + (ctx @ P[f"{blk}.M"])[:, None, :] + P[f"{blk}.b"]
            h = h + 0.5 * z * (1.0 + np.tanh(0.5 * z))  # SiLU without exp overflow
        h_mean = (h * v).sum(1) / cnt
        d = h.shape[2]
        k = (h @ P["k.W"]) / math.sqrt(d)
        h = np.concatenate([h, np.zeros((h.shape[0], 1, d))], 1)
        W = P["q.W"]
        kt = k.transpose(0, 2, 1)
        self.t_cur = (h @ W[:d]) @ kt
        self.t_end = (h @ W[d:2 * d]) @ kt
        self.base = ((h_mean @ W[2 * d:3 * d])[:, None, :] @ kt)[:, 0]
        self.t_scal = W[3 * d:] @ kt
        self.lam = float(np.logaddexp(0.0, P["lam"][0]))
        self.M = k.shape[1]
        self.bi = np.arange(k.shape[0])

    def __call__(self, cur, end, scal, dist):
        ci = np.where(cur < 0, self.M, cur)
        ei = np.where(end < 0, self.M, end)
        logit = self.t_cur[self.bi, ci] + self.t_end[self.bi, ei] + self.base
        logit += (scal[:, None, :] @ self.t_scal)[:, 0]
        if dist is not None:
            logit -= self.lam * dist
        return CLIP * np.tanh(logit / CLIP)


def _masked_log_softmax_np(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # every row keeps at least one legal action, so ``top`` is finite
    z = np.where(mask, logits, -np.inf)
    z -= z.max(1, keepdims=True)
    z -= np.log(np.exp(z).sum(1, keepdims=True))
    return z


def rollout(store: ParamStore, env: BatchEnv, mode: str, rng: np.random.Generator, record: bool = True) -> BatchRollout:
    if mode not in ("sample", "greedy"):
        raise ValueError(f"unknown conquer mode {mode!r}")
    feats = env.features()
    trace = Trace(feats, env.valid.copy()) if record else None
    logp = np.zeros(env.B)
    routing = env.xy is not None
    rows = np.arange(env.B)
    fast = _FastLogits(store, feats, env.valid)
    while not env.done.all():
        m = env.mask()
        active = ~env.done
        scal = env.scalars()
        dist = env._dist_from(np.maximum(env.cur, 0)) * (env.cur >= 0)[:, None] if routing else None
        lp = _masked_log_softmax_np(fast(env.cur, env.end, scal, dist), m)
        if mode == "greedy":
            acts = lp.argmax(1)
        else:
            p = np.exp(lp)
            cdf = np.cumsum(p, 1)
            u = rng.random(env.B) * cdf[:, -1]
            acts = np.minimum((cdf <= u[:, None]).sum(1), env.M - 1)
            bad = ~m[rows, acts]
            for b in np.flatnonzero(bad):  # round-off at the cdf edge
                acts[b] = np.flatnonzero(m[b])[-1]
        logp += np.where(active, lp[rows, acts], 0.0)
        if record:
            trace.masks.append(m)
            trace.cur.append(env.cur.copy())
            trace.end.append(env.end.copy())
            trace.scal.append(scal)
            trace.dist.append(dist)
            trace.actions.append(acts)
            trace.active.append(active)
        env.step(acts)
    return BatchRollout(env, env.results(), logp, trace)


def replay_log_probs(store: ParamStore, trace: Trace) -> torch.Tensor:
    """Differentiable per-element log-probabilities of a recorded rollout (float64)."""
    h_ext, keys, h_mean = encode(store, trace.feats, trace.valid)
    B = trace.valid.shape[0]
    total = torch.zeros(B, dtype=torch.float64)
    if not trace.actions:
        return total
    S = len(trace.actions)
    cur = np.stack(trace.cur)
    end = np.stack(trace.end)
    scal = np.stack(trace.scal)
    dist = None if trace.dist[0] is None else np.stack(trace.dist)
    dt = store.dtype
    M = keys.shape[1]
    bi = torch.arange(B)
    ci = torch.as_tensor(np.where(cur < 0, M, cur))
    ei = torch.as_tensor(np.where(end < 0, M, end))
    h_cur = h_ext[bi[None, :], ci]
    h_end = h_ext[bi[None, :], ei]
    hm = h_mean[None].expand(S, B, -1)
    q = torch.cat([h_cur, h_end, hm, torch.as_tensor(scal, dtype=dt)], -1) @ store["q.W"]
    logit = torch.einsum("sbd,bmd->sbm", q, keys) / math.sqrt(keys.shape[-1])
    if dist is not None:
        logit = logit - torch.nn.functional.softplus(store["lam"]) * torch.as_tensor(dist, dtype=dt)
    logit = CLIP * torch.tanh(logit / CLIP)
    lp = nnet.masked_log_softmax(logit.double(), torch.as_tensor(np.stack(trace.masks)))
    acts = torch.as_tensor(np.stack(trace.actions))
    picked = lp.gather(2, acts[..., None])[..., 0]
    active = torch.as_tensor(np.stack(trace.active))
    return torch.where(active, picked, torch.zeros((), dtype=torch.float64)).sum(0)


def symmetric(kind: Kind) -> bool:
    return kind in (Kind.TSP, Kind.CVRP, Kind.OP, Kind.PCTSP)


def make_env(inst: Instance, sps: list[SubProblem], beta: int, two_sided: bool) -> BatchEnv:
    if two_sided and beta % 2:
        raise ValueError("two-sided conquering needs an even beta")
    batch, rev = [], []
    for sp in sps:
        for b in range(beta):
            batch.append(sp)
            rev.append(two_sided and b >= beta // 2)
    return ENVS[inst.kind](inst, batch, rev)


def conquer_batch(
    inst: Instance,
    sps: list[SubProblem],
    store: ParamStore,
    beta: int,
    two_sided: bool,
    mode: str,
    rng: np.random.Generator,
    record: bool = False,
) -> BatchRollout | None:
    """β rollouts per sub-problem, laid out sub-problem major (index = i*β + b)."""
    if not sps:
        return None
    env = make_env(inst, sps, beta, two_sided and symmetric(inst.kind))
    return rollout(store, env, mode, rng, record)


def conquer_neural(inst: Instance, sp: SubProblem, store: ParamStore, beta: int, two_sided: bool, mode: str, seed: int):
    """β sub-solutions (token sequences) with their log-probabilities for one sub-problem."""
    out = conquer_batch(inst, [sp], store, beta, two_sided, mode, np.random.default_rng(seed), record=True)
    return out.seqs, out.log_probs, out.trace
