"""Acceptance criteria. Each test prints one PASS/FAIL line (see the terminal summary)."""
import itertools
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, random_construction, surrogate_gradient_errors
from udc.conquer import conquer_exact, decompose, objective_terms, sub_cost
from udc.model import Models
from udc.problems import Instance, Kind, check_feasibility, generate_instance, make_solution
from udc.solve import SolveConfig, solve, stage

KINDS = list(Kind)
STAGES = [0, 2, 50]


def report(num: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {num:>2} {'PASS' if ok else 'FAIL'} {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def _length(xy: np.ndarray, walk) -> float:
    w = np.asarray(walk)
    seg = xy[w[1:]] - xy[w[:-1]]
    return math.fsum(np.sqrt((seg * seg).sum(1)).tolist())


def _objective_oracle(inst: Instance, sol) -> float:
    """Tour length from coordinates alone (TSP closes the loop, CVRP returns to the depot)."""
    order = sol.order.tolist()
    if inst.kind is Kind.TSP:
        return _length(inst.coords, order + order[:1])
    walk = [0]
    for v, back in zip(order, sol.flags.tolist()):
        walk.append(v)
        if back:
            walk.append(0)
    if walk[-1] != 0:
        walk.append(0)
    return _length(inst.coords, walk)


# ---------------------------------------------------------------------------
# 1, 2 and part of 9 share one sweep of seeded end-to-end solves


@pytest.fixture(scope="module")
def sweep():
    models = {k: Models.init(k, seed=0) for k in KINDS}
    infeasible, worsened, ledgers = [], [], []
    t0 = time.perf_counter()
    for i in range(10_000):
        kind = KINDS[i % 6]
        r = STAGES[(i // 6) % 3]
        N = int(np.random.default_rng([i, 1]).integers(20, 201))
        inst = generate_instance(kind, N, i)
        res = solve(inst, models[kind], SolveConfig(stages=r, alpha=1, n=10, seed=i))
        if not check_feasibility(inst, res.best).ok:
            infeasible.append(i)
        sign = 1.0 if inst.sense == "min" else -1.0
        for per in res.rollout_traces:
            c = sign * np.asarray(per)
            if np.any(c[1:] > c[:-1]):
                worsened.append(i)
        if r == 50 and kind in (Kind.OP, Kind.KP):
            ledgers.extend(led for st in res.ledgers for led in st if led is not None)
    return {"seconds": time.perf_counter() - t0, "infeasible": infeasible, "worsened": worsened, "ledgers": ledgers}


def test_criterion_01_feasibility_suite(sweep):
    ok = not sweep["infeasible"] and sweep["seconds"] < 600
    report(1, "feasibility suite", ok,
           f"10000 solves, {len(sweep['infeasible'])} infeasible, {sweep['seconds']:.0f}s (limit 600s)")


def test_criterion_02_monotone_rollouts(sweep):
    report(2, "per-rollout monotonicity", not sweep["worsened"],
           f"{len(sweep['worsened'])} solves with a worsening stage")


# ---------------------------------------------------------------------------


def test_criterion_03_objective_decomposition():
    rng = np.random.default_rng(3)
    worst = 0.0
    for case in range(1000):
        kind = Kind.TSP if case % 2 == 0 else Kind.CVRP
        inst = generate_instance(kind, int(rng.integers(6, 101)), 30_000 + case)
        sol = random_construction(inst, rng)
        n = int(min(rng.integers(3, 13), sol.order.size))
        dec = decompose(inst, sol, n, int(rng.integers(n)))
        wins, rest = objective_terms(inst, sol, dec)
        worst = max(worst, abs(math.fsum(wins) + rest - _objective_oracle(inst, sol)))
    report(3, "objective decomposition", worst <= 1e-9, f"1000 TSP/CVRP cases, max |error| {worst:.2e} (tol 1e-9)")


def test_criterion_04_oracle_dominance():
    rng = np.random.default_rng(4)
    beaten, mismatched, enumerated = 0, 0, 0
    for case in range(1000):
        n = int(rng.integers(3, 11))
        inst = generate_instance(Kind.TSP, int(rng.integers(max(n, 10), 40)), 40_000 + case)
        sol = random_construction(inst, rng)
        dec = decompose(inst, sol, n, int(rng.integers(n)))
        sp = dec.subproblems[int(rng.integers(len(dec.subproblems)))]
        m = sp.size
        xy = inst.coords[sp.nodes]
        D = np.sqrt(((xy[:, None] - xy[None]) ** 2).sum(-1))
        seq = conquer_exact(inst, sp)
        best = float(D[seq[:-1], seq[1:]].sum())
        # 1000 random pinned orderings, scored in one shot
        inner = np.argsort(rng.random((1000, m - 2)), 1) + 1
        paths = np.concatenate([np.zeros((1000, 1), int), inner, np.full((1000, 1), m - 1)], 1)
        rand = D[paths[:, :-1], paths[:, 1:]].sum(1)
        beaten += int(np.sum(rand < best - 1e-12))
        if m <= 6:
            enumerated += 1
            opt = min(sub_cost(inst, sp, (0,) + p + (m - 1,)) for p in itertools.permutations(range(1, m - 1)))
            if abs(sub_cost(inst, sp, seq) - opt) > 1e-12:
                mismatched += 1
    ok = beaten == 0 and mismatched == 0 and enumerated > 0
    report(4, "oracle dominance", ok,
           f"1000 cases x 1000 orderings, {beaten} beat the oracle; {mismatched}/{enumerated} enumeration mismatches")


def test_criterion_05_gradient_fidelity():
    worst, _ = surrogate_gradient_errors()
    ok = worst["divide"] <= 0 and worst["conquer"] <= 0
    report(5, "gradient fidelity", ok,
           f"worst excess over (1e-5 + 1e-3 rel): divide {worst['divide']:.2e}, conquer {worst['conquer']:.2e}")


def _crossing_instance(n: int):
    """Two rows of n points; the tour crosses between the rows right at the p=0 window boundary."""
    xs = 0.05 + 0.9 * np.arange(n) / (n - 1)
    bottom = np.column_stack([xs, np.full(n, 0.3)])
    top = np.column_stack([xs, np.full(n, 0.7)])
    inst = Instance(Kind.TSP, 2 * n, coords=np.vstack([bottom, top]))
    b = list(range(n))
    t = [n + i for i in range(n)]
    order = b[:n - 1] + [t[n - 1], b[n - 1]] + t[n - 2::-1]
    return inst, make_solution(inst, order=order)


def test_criterion_06_reunion_repair():
    notes = []
    ok = True
    for n in (4, 6, 8):
        inst, sol = _crossing_instance(n)
        rng = np.random.default_rng(0)
        first = stage(inst, [sol], 0, None, n, rng, backend="exact").solutions[0]
        second = stage(inst, [first], n // 2, None, n, rng, backend="exact").solutions[0]
        good = first.objective == sol.objective and second.objective < first.objective
        good &= check_feasibility(inst, second).ok
        ok &= good
        notes.append(f"n={n}: {sol.objective:.4f} -> {first.objective:.4f} -> {second.objective:.4f}")
    report(6, "reunion repair", ok, "; ".join(notes))


def test_criterion_07_desk_scale_learning(tsp20_run):
    held = [generate_instance(Kind.TSP, 20, 10_000 + i) for i in range(100)]
    cfg = SolveConfig(stages=2, alpha=1, n=10, seed=0)
    greedy = SolveConfig(stages=2, alpha=1, n=10, seed=0, initial="nearest_greedy")

    def mean(models, c):
        return float(np.mean([solve(inst, models, c).best.objective for inst in held]))

    untrained = mean(tsp20_run["initial"], cfg)
    trained = mean(tsp20_run["models"], cfg)
    pipeline = mean(tsp20_run["models"], greedy)
    secs = tsp20_run["seconds"]
    ok = trained <= 0.9 * untrained and trained <= pipeline and secs < 1800
    report(7, "desk-scale learning signal", ok,
           f"trained {trained:.4f} vs untrained {untrained:.4f} ({100 * (1 - trained / untrained):.1f}% better), "
           f"nearest-greedy pipeline {pipeline:.4f}, training {secs:.0f}s")


def test_criterion_08_normalization_neutrality():
    rng = np.random.default_rng(8)
    differ = 0
    for case in range(1000):
        n = int(rng.integers(4, 11))
        inst = generate_instance(Kind.TSP, int(rng.integers(max(n, 10), 60)), 80_000 + case)
        sol = random_construction(inst, rng)
        p = int(rng.integers(n))
        on = decompose(inst, sol, n, p, normalized=True)
        off = decompose(inst, sol, n, p, normalized=False)
        j = int(rng.integers(len(on.subproblems)))
        if conquer_exact(inst, on.subproblems[j], True) != conquer_exact(inst, off.subproblems[j], False):
            differ += 1
    report(8, "normalization neutrality", differ == 0, f"1000 windows, {differ} differing orders")


def _independent_balance(inst, sol, dec) -> float:
    """Total budget rebuilt from the sub-constraints plus what lies outside the windows."""
    subs = dec.subproblems
    if inst.kind is Kind.KP:
        inside = {int(v) for sp in subs for v in sp.nodes}
        outside = [float(inst.weights[v]) for v in sol.subset.tolist() if v not in inside]
        parts = [sp.constraints["capacity"] for sp in subs] + outside
        return abs(math.fsum(parts) - inst.capacity) if subs else 0.0
    order = sol.order.tolist()
    tau = len(order)
    inner = {(int(a), int(b)) for sp in subs for a, b in zip(sp.positions[:-1], sp.positions[1:])}
    outside = [float(inst.dist(order[i], order[(i + 1) % tau])) for i in range(tau)
               if (i, (i + 1) % tau) not in inner]
    return abs(math.fsum([sp.constraints["budget"] for sp in subs] + outside) - inst.budget) if subs else 0.0


def test_criterion_09_budget_conservation(sweep):
    worst_ledger = max((led.imbalance() for led in sweep["ledgers"]), default=0.0)
    models = {k: Models.init(k, seed=0) for k in (Kind.OP, Kind.KP)}
    worst_rebuilt, checked = 0.0, 0
    for case in range(20):
        kind = (Kind.OP, Kind.KP)[case % 2]
        inst = generate_instance(kind, 60 + 7 * case, 90_000 + case)
        res = solve(inst, models[kind], SolveConfig(stages=50, alpha=1, n=10, seed=case), keep_history=True)
        rng = np.random.default_rng(case)
        for sols in res.stage_solutions:
            sol = sols[0]
            n = 10 if kind is Kind.KP else min(10, sol.order.size)
            if n < 2:
                continue
            dec = decompose(inst, sol, n, int(rng.integers(n)), rng, margin_window=0)
            worst_rebuilt = max(worst_rebuilt, _independent_balance(inst, sol, dec))
            checked += 1
    ok = worst_ledger <= 1e-9 and worst_rebuilt <= 1e-9 and len(sweep["ledgers"]) > 0
    report(9, "budget conservation", ok,
           f"{len(sweep['ledgers'])} stage ledgers, max imbalance {worst_ledger:.2e}; "
           f"{checked} rebuilt decompositions, max error {worst_rebuilt:.2e} (tol 1e-9)")


def test_criterion_10_complexity_trend():
    models = Models.init(Kind.TSP, seed=0)
    sizes = [100, 200, 400, 800]
    med = []
    for N in sizes:
        inst = generate_instance(Kind.TSP, N, N)
        solve(inst, models, SolveConfig(stages=2, seed=0))  # warm-up
        runs = []
        for rep in range(7):
            t0 = time.perf_counter()
            solve(inst, models, SolveConfig(stages=2, alpha=1, n=10, seed=rep))
            runs.append(time.perf_counter() - t0)
        med.append(float(np.median(runs)))
    slope, icpt = np.polyfit(sizes, med, 1)
    ratio = [t / (icpt + slope * N) for N, t in zip(sizes, med)]
    ok = all(0 < r <= 1.5 for r in ratio)
    report(10, "complexity trend", ok,
           "median ms " + ", ".join(f"N={N}: {1000 * t:.1f}" for N, t in zip(sizes, med))
           + "; time/fit " + ", ".join(f"{r:.2f}" for r in ratio) + " (limit 1.5)")
