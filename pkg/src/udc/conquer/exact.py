"""Exact sub-problem solvers used as oracles and as an optional backend."""
from __future__ import annotations

import math

import numpy as np

from ..problems import FEAS_TOL, Instance, Kind
from .subproblem import SubProblem, SubProblemError

LIMITS = {Kind.TSP: 12, Kind.CVRP: 12, Kind.OP: 12, Kind.PCTSP: 12, Kind.KP: 30, Kind.MIS: 25}


def _dist_matrix(xy: np.ndarray) -> np.ndarray:
    d = xy[:, None, :] - xy[None, :, :]
    return np.sqrt((d * d).sum(-1))


def _token_coords(inst: Instance, sp: SubProblem, normalized: bool) -> np.ndarray:
    if normalized and sp.coords is not None:
        return sp.coords
    return inst.coords[sp.nodes]


def shortest_paths_over_subsets(D: np.ndarray, s: int, cand: list[int]) -> tuple[np.ndarray, np.ndarray]:
    """Held-Karp table: best[mask, j] = shortest path from ``s`` through ``mask`` ending at cand[j]."""
    m = len(cand)
    full = 1 << m
    best = np.full((full, max(m, 1)), np.inf)
    back = np.full((full, max(m, 1)), -1, dtype=np.int64)
    if m == 0:
        return best, back
    c = np.asarray(cand)
    Dc = D[np.ix_(c, c)]
    for j in range(m):
        best[1 << j, j] = D[s, c[j]]
    bits = 1 << np.arange(m)
    for mask in range(1, full):
        row = best[mask]
        if not np.isfinite(row).any():
            continue
        ext = row[:, None] + Dc
        arg = ext.argmin(0)
        val = ext[arg, np.arange(m)]
        for k in np.flatnonzero((mask & bits) == 0):
            nm = mask | int(bits[k])
            if val[k] < best[nm, k]:
                best[nm, k] = val[k]
                back[nm, k] = arg[k]
    return best, back


def _unwind(back: np.ndarray, mask: int, j: int, cand: list[int]) -> list[int]:
    out = []
    while j >= 0:
        out.append(cand[j])
        prev = int(back[mask, j])
        mask ^= 1 << j
        j = prev
    return out[::-1]


def pinned_path(D: np.ndarray, s: int, t: int, interior: list[int]) -> list[int]:
    """Shortest Hamiltonian path from s to t through every interior node."""
    m = len(interior)
    if m == 0:
        return [s, t]
    best, back = shortest_paths_over_subsets(D, s, interior)
    full = (1 << m) - 1
    tot = best[full] + D[np.asarray(interior), t]
    j = int(np.argmin(tot))
    return [s, *_unwind(back, full, j, interior), t]


def conquer_exact(inst: Instance, sp: SubProblem, normalized: bool = True) -> list[int]:
    """Provably optimal sub-solution as a token sequence (or token subset)."""
    k = sp.kind
    limit = LIMITS[k]
    size = sp.size - 1 if k is Kind.CVRP else sp.size
    if size > limit:
        raise SubProblemError(f"exact {k.value} conqueror is limited to {limit} nodes, got {size}")
    if k is Kind.TSP:
        D = _dist_matrix(_token_coords(inst, sp, normalized))
        return pinned_path(D, 0, sp.size - 1, list(range(1, sp.size - 1)))
    if k is Kind.CVRP:
        return _exact_cvrp(inst, sp, normalized)
    if k in (Kind.OP, Kind.PCTSP):
        return _exact_tour_subset(inst, sp)
    if k is Kind.KP:
        return exact_kp(inst.values[sp.nodes], inst.weights[sp.nodes], sp.constraints["capacity"])
    return _exact_mis(sp)


def _exact_cvrp(inst: Instance, sp: SubProblem, normalized: bool) -> list[int]:
    c = sp.constraints
    depot, s, t = c["depot"], c["start"], c["end"]
    C, cf, cl, cs = c["capacity"], c["cap_first"], c["cap_last"], c["cap_single"]
    D = _dist_matrix(_token_coords(inst, sp, normalized))
    dem = inst.demands[sp.nodes]
    interior = list(range(1, t))
    m = len(interior)
    full = (1 << m) - 1
    # labels[(mask, last, first)] -> list of (load, cost, parent label)
    start = (0, s, True)
    labels: dict = {start: [(float(dem[s]), 0.0, None)]}
    best = (math.inf, None)

    def push(key, load, cost, parent):
        lst = labels.setdefault(key, [])
        for l2, c2, _ in lst:
            if l2 <= load + 1e-12 and c2 <= cost + 1e-15:
                return
        lst[:] = [x for x in lst if not (load <= x[0] + 1e-12 and cost <= x[1] + 1e-15)]
        lst.append((load, cost, parent))

    by_size = sorted(range(full + 1), key=lambda x: bin(x).count("1"))
    for mask in by_size:
        for last in [s, *interior, depot]:
            for first in (True, False):
                key = (mask, last, first)
                for lab in list(labels.get(key, [])):
                    load, cost, _ = lab
                    cap = cf if first else C
                    ref = (key, lab)
                    if mask == full:
                        end_cap = cs if first else cl
                        if last != depot and load + dem[t] <= end_cap + FEAS_TOL or last == depot and dem[t] <= cl + FEAS_TOL:
                            tot = cost + D[last, t]
                            if tot < best[0]:
                                best = (tot, ref)
                    for j, v in enumerate(interior):
                        if mask >> j & 1:
                            continue
                        if last == depot:
                            if dem[v] <= C + FEAS_TOL:
                                push((mask | 1 << j, v, False), float(dem[v]), cost + D[last, v], ref)
                        elif load + dem[v] <= cap + FEAS_TOL:
                            push((mask | 1 << j, v, first), load + float(dem[v]), cost + D[last, v], ref)
                    if last != depot:
                        push((mask, depot, False), 0.0, cost + D[last, depot], ref)
    if best[1] is None:
        raise SubProblemError("sub-CVRP has no feasible completion")
    seq = [t]
    ref = best[1]
    while ref is not None:
        (mask, last, _), lab = ref
        seq.append(last)
        ref = lab[2]
    return seq[::-1]


def _exact_tour_subset(inst: Instance, sp: SubProblem) -> list[int]:
    c = sp.constraints
    s, t = c["start"], c["end"]
    cand = [i for i in range(sp.size) if i not in (s, t)]
    m = len(cand)
    if m > LIMITS[sp.kind]:
        raise SubProblemError(f"exact conqueror limited to {LIMITS[sp.kind]} candidates")
    D = _dist_matrix(inst.coords[sp.nodes])
    best, back = shortest_paths_over_subsets(D, s, cand)
    forced = 0
    for f in c["forced"]:
        forced |= 1 << cand.index(f)
    prize = inst.prizes[sp.nodes][cand] if cand else np.zeros(0)
    pen = inst.penalties[sp.nodes][cand] if sp.kind is Kind.PCTSP and cand else np.zeros(m)
    chosen, chosen_key = None, None
    for mask in range(1 << m):
        if mask & forced != forced:
            continue
        if mask == 0:
            length, j = float(D[s, t]), -1
        else:
            tot = best[mask, :m] + D[np.asarray(cand), t]
            j = int(np.argmin(tot))
            length = float(tot[j])
            if not np.isfinite(length):
                continue
        sel = [(mask >> i) & 1 == 1 for i in range(m)]
        got = math.fsum(prize[sel].tolist()) if m else 0.0
        if sp.kind is Kind.OP:
            if length > c["budget"] + FEAS_TOL:
                continue
            key = (-got, length)
        else:
            if got < c["prize_floor"] - FEAS_TOL:
                continue
            key = (length + math.fsum(pen[[not x for x in sel]].tolist()) if m else length,)
        if chosen_key is None or key < chosen_key:
            chosen_key, chosen = key, (mask, j)
    if chosen is None:
        raise SubProblemError("sub-problem has no feasible completion")
    mask, j = chosen
    mid = [] if mask == 0 else _unwind(back, mask, j, cand)
    return [s, *mid, t]


def exact_kp(values: np.ndarray, weights: np.ndarray, cap: float) -> list[int]:
    """Branch and bound with the fractional relaxation as bound."""
    n = values.size
    order = np.argsort(-values / weights, kind="stable")
    v, w = values[order], weights[order]
    best_val, best_set = 0.0, []

    def bound(i, room, val):
        while i < n and w[i] <= room:
            room -= w[i]
            val += v[i]
            i += 1
        return val + (v[i] * room / w[i] if i < n else 0.0)

    def dfs(i, room, val, taken):
        nonlocal best_val, best_set
        if val > best_val:
            best_val, best_set = val, list(taken)
        if i == n or bound(i, room, val) <= best_val + 1e-12:
            return
        if w[i] <= room + FEAS_TOL:
            taken.append(i)
            dfs(i + 1, room - w[i], val + v[i], taken)
            taken.pop()
        dfs(i + 1, room, val, taken)

    dfs(0, float(cap), 0.0, [])
    return sorted(int(order[i]) for i in best_set)


def _exact_mis(sp: SubProblem) -> list[int]:
    adj = sp.features.get("adjacency")
    if adj is None:
        raise SubProblemError("sub-MIS needs its adjacency (call normalize first)")
    n = sp.size
    nb = [sum(1 << int(j) for j in np.flatnonzero(adj[i])) for i in range(n)]
    allowed = sum(1 << i for i in range(n) if not sp.constraints["forbidden"][i])
    best = [0, 0]  # size, set bits

    def rec(avail: int, chosen: int, size: int):
        if size + bin(avail).count("1") <= best[0]:
            return
        if avail == 0:
            best[0], best[1] = size, chosen
            return
        # branch on the available vertex with most available neighbours
        v, deg = -1, -1
        a = avail
        while a:
            low = a & -a
            i = low.bit_length() - 1
            d = bin(nb[i] & avail).count("1")
            if d > deg:
                v, deg = i, d
            a ^= low
        if deg == 0:
            rec(0, chosen | avail, size + bin(avail).count("1"))
            return
        rec(avail & ~(1 << v) & ~nb[v], chosen | 1 << v, size + 1)
        rec(avail & ~(1 << v), chosen, size)

    rec(allowed, 0, 0)
    return [i for i in range(n) if best[1] >> i & 1]
