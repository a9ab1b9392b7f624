import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import random_construction
from udc.conquer import (
    Transform,
    accept_and_merge,
    conquer_batch,
    conquer_exact,
    conquer_neural,
    decompose,
    extract_subproblems,
    fit_transform,
    normalize_points,
    objective_terms,
    replay_log_probs,
    sub_cost,
    sub_violation,
    window_positions,
)
from udc.conquer.exact import pinned_path
from udc.conquer.policy import ConquerConfig, init_conquering
from udc.conquer.subproblem import SubProblemError
from udc.divide import heuristic_initial
from udc.problems import Instance, Kind, check_feasibility, cost, generate_instance, make_solution


def test_window_arithmetic():
    wins, left = window_positions(10, 5, 0, cyclic=True)
    assert [w.tolist() for w in wins] == [[0, 1, 2, 3, 4], [5, 6, 7, 8, 9]] and left.size == 0
    wins, left = window_positions(10, 4, 2, cyclic=True)
    assert [w.tolist() for w in wins] == [[2, 3, 4, 5], [6, 7, 8, 9]] and left.tolist() == [0, 1]
    wins, left = window_positions(10, 4, 2, cyclic=False)
    assert [w.tolist() for w in wins] == [[2, 3, 4, 5], [6, 7, 8, 9]] and left.tolist() == [0, 1]
    with pytest.raises(SubProblemError):
        window_positions(5, 6, 0, cyclic=True)


@settings(max_examples=60, deadline=None)
@given(N=st.integers(4, 80), n=st.integers(2, 20), p=st.integers(0, 30), seed=st.integers(0, 999))
def test_tsp_windows_cover_all_nodes(N, n, p, seed):
    n = min(n, N)
    inst = generate_instance("tsp", N, seed)
    sol = make_solution(inst, order=np.random.default_rng(seed).permutation(N))
    dec = extract_subproblems(inst, sol, n, p % N)
    parts = [sp.nodes for sp in dec.subproblems] + [sol.order[dec.leftover]]
    allnodes = np.concatenate(parts)
    assert sorted(allnodes.tolist()) == list(range(N))
    assert all(sp.size == n for sp in dec.subproblems) and len(dec.subproblems) == N // n


def test_sub_tsp_pins_endpoints():
    inst = generate_instance("tsp", 12, 0)
    sol = make_solution(inst, order=np.arange(12))
    dec = decompose(inst, sol, 4, 1)
    for sp in dec.subproblems:
        assert sp.constraints == {"start": 0, "end": 3}
        assert sub_violation(inst, sp, [1, 0, 2, 3]) == "endpoints"
        assert sub_violation(inst, sp, [0, 2, 1, 3]) is None


def test_sub_cvrp_residual_pair():
    # route 1: a(30) | b(20) c(10)   route 2: d(15) e(25) | f(5); window = b c d e
    inst = Instance(Kind.CVRP, 6, coords=np.random.default_rng(0).random((7, 2)),
                    demands=np.array([0, 30, 20, 10, 15, 25, 5.0]), capacity=100.0)
    sol = make_solution(inst, order=[1, 2, 3, 4, 5, 6], flags=[0, 0, 1, 0, 0, 1])
    dec = decompose(inst, sol, 4, 1)
    (sp,) = dec.subproblems
    c = sp.constraints
    assert c["cap_first"] == 70.0  # 100 minus the 30 already used upstream
    assert c["cap_last"] == 95.0  # 100 minus the 5 still needed downstream
    pair = sp.features["residual_pair"]
    assert pair.sum() == pytest.approx(1.0) and pair[0] == pytest.approx(70 / 165)
    # one merged route would need 70 + 95 - 100 = 65 on a single vehicle
    assert c["cap_single"] == 65.0


def test_sub_op_budget_and_single_margin():
    inst = generate_instance("op", 40, 3)
    sol = heuristic_initial(inst, "nearest_greedy")
    tau = sol.order.size
    n = min(6, tau)
    for mw in range(tau // n):
        dec = decompose(inst, sol, n, 0, margin_window=mw)
        margin = inst.budget - sol.objective * 0 - _loop(inst, sol.order)
        for sp in dec.subproblems:
            m = sp.constraints["window"]
            length = sum(inst.dist(sp.nodes[i], sp.nodes[i + 1]) for i in range(m - 1))
            extra = margin if sp.index == mw else 0.0
            assert sp.constraints["budget"] == pytest.approx(length + max(extra, 0.0), abs=1e-12)
        assert dec.ledger.imbalance() < 1e-9


def _loop(inst, order):
    return float(sum(inst.dist(order[i], order[(i + 1) % len(order)]) for i in range(len(order))))


def test_normalize_hand_values():
    z, t = normalize_points(np.array([[0.2, 0.4], [0.6, 0.5]]))
    assert t.scale == pytest.approx(2.5) and not t.swap
    assert np.allclose(z, [[0, 0], [1, 0.25]])
    pts = np.array([[0.0, 0.0], [1.0, 0.5]])
    z, t = normalize_points(pts)
    assert t.scale == 1.0 and np.allclose(z, pts)
    z, t = normalize_points(np.array([[0.5, 0.1], [0.6, 0.5]]))
    # y span 0.4 dominates: scale 2.5 and axes exchanged
    assert t.swap and np.allclose(z, [[0, 0], [1, 0.25]])


def test_degenerate_transform_flagged():
    t = fit_transform(np.array([[0.3, 0.3], [0.3, 0.3]]))
    assert t.degenerate and t.scale == 1.0


@settings(max_examples=100, deadline=None)
@given(pts=st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=2, max_size=15))
def test_transform_round_trip(pts):
    xy = np.array(pts)
    z, t = normalize_points(xy)
    if t.degenerate:
        return
    assert np.allclose(t.invert(z), xy, atol=1e-7)
    assert z.min() >= -1e-12 and z.max() <= 1 + 1e-12
    assert max(np.ptp(z[:, 0]), np.ptp(z[:, 1])) == pytest.approx(1.0)


def _tsp_sub(N=12, n=6, seed=0):
    inst = generate_instance("tsp", N, seed)
    sol = make_solution(inst, order=np.random.default_rng(seed).permutation(N))
    return inst, sol, decompose(inst, sol, n, 0)


def test_two_sided_rollouts():
    inst, sol, dec = _tsp_sub()
    sp = dec.subproblems[0]
    store = init_conquering(ConquerConfig(Kind.TSP, 8), 0)
    seqs, logp, trace = conquer_neural(inst, sp, store, 2, True, "sample", 0)
    for s in seqs:
        assert s[0] == 0 and s[-1] == sp.size - 1 and sub_violation(inst, sp, s) is None
    out = conquer_batch(inst, [sp], store, 2, True, "sample", np.random.default_rng(0))
    assert out.env.reverse.tolist() == [False, True]
    raw = out.env.sequences()
    # the second rollout was built from the far end and reversed before scoring
    assert raw[0][0] == 0 and raw[1][0] == sp.size - 1
    assert out.seqs[1] == raw[1][::-1]


def test_forced_interior_node():
    inst = generate_instance("tsp", 9, 0)
    sol = make_solution(inst, order=np.arange(9))
    sp = decompose(inst, sol, 3, 0).subproblems[0]
    store = init_conquering(ConquerConfig(Kind.TSP, 8), 0)
    with torch.no_grad():
        for t in store.params.values():
            t.zero_()
    a = conquer_neural(inst, sp, store, 1, False, "greedy", 0)[0]
    b = conquer_neural(inst, sp, store, 1, False, "greedy", 7)[0]
    assert a == b == [[0, 1, 2]]


@pytest.mark.parametrize("kind", list(Kind))
def test_replay_matches_rollout_log_probs(kind):
    inst = generate_instance(kind, 40, 1)
    sol = random_construction(inst, np.random.default_rng(1))
    dec = decompose(inst, sol, 8, 4, np.random.default_rng(2))
    if not dec.subproblems:
        pytest.skip("solution too short to decompose")
    store = init_conquering(ConquerConfig(kind, 8), 0)
    for sp in dec.subproblems[:3]:
        beta = 4
        seqs, logp, trace = conquer_neural(inst, sp, store, beta, kind in (Kind.TSP, Kind.CVRP, Kind.OP, Kind.PCTSP), "sample", 3)
        replayed = replay_log_probs(store, trace).detach().numpy()
        assert np.allclose(replayed, logp, atol=1e-6)
        for s in seqs:
            assert sub_violation(inst, sp, s) is None


def test_exact_three_interior_nodes():
    inst, sol, dec = _tsp_sub(N=10, n=5, seed=3)
    sp = dec.subproblems[0]
    best = min(sub_cost(inst, sp, (0,) + p + (4,)) for p in itertools.permutations([1, 2, 3]))
    assert sub_cost(inst, sp, conquer_exact(inst, sp)) == pytest.approx(best, abs=1e-12)


def test_exact_dominates_random_orderings():
    rng = np.random.default_rng(0)
    for case in range(30):
        inst, sol, dec = _tsp_sub(N=16, n=8, seed=case)
        sp = dec.subproblems[0]
        opt = sub_cost(inst, sp, conquer_exact(inst, sp))
        for _ in range(100):
            seq = [0] + (rng.permutation(6) + 1).tolist() + [7]
            assert opt <= sub_cost(inst, sp, seq) + 1e-12


def test_pinned_path_matches_enumeration():
    rng = np.random.default_rng(1)
    for n in range(2, 7):
        xy = rng.random((n, 2))
        D = np.linalg.norm(xy[:, None] - xy[None], axis=-1)
        got = pinned_path(D, 0, n - 1, list(range(1, n - 1)))
        cost_of = lambda s: sum(D[s[i], s[i + 1]] for i in range(len(s) - 1))  # noqa: E731
        best = min(cost_of((0,) + p + (n - 1,)) for p in itertools.permutations(range(1, n - 1)))
        assert cost_of(got) == pytest.approx(best, abs=1e-12)


def test_exact_kp_takes_everything_when_it_fits():
    inst = Instance(Kind.KP, 6, values=np.full(6, 0.5), weights=np.full(6, 0.1), capacity=1.0)
    sol = make_solution(inst, subset=[0, 1, 2])
    dec = decompose(inst, sol, 6, 0, np.random.default_rng(0), margin_window=0)
    sp = dec.subproblems[0]
    assert sorted(conquer_exact(inst, sp)) == list(range(6))


def test_exact_size_limit():
    inst, sol, dec = _tsp_sub(N=26, n=13)
    with pytest.raises(SubProblemError):
        conquer_exact(inst, dec.subproblems[0])


def test_merge_no_op_is_bit_identical():
    inst, sol, dec = _tsp_sub(N=20, n=6)
    new, acc = accept_and_merge(inst, sol, dec, [sp.original for sp in dec.subproblems])
    assert new is sol and not any(acc)


def test_merge_delta_equals_fragment_gain():
    inst, sol, dec = _tsp_sub(N=20, n=6, seed=4)
    chosen = [sp.original for sp in dec.subproblems]
    sp = dec.subproblems[1]
    chosen[1] = conquer_exact(inst, sp)
    gain = sp.original_cost - sub_cost(inst, sp, chosen[1])
    assert gain > 0
    new, acc = accept_and_merge(inst, sol, dec, chosen)
    assert acc == [False, True, False]
    assert sol.objective - new.objective == pytest.approx(gain, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(kind=st.sampled_from([Kind.TSP, Kind.CVRP]), N=st.integers(6, 60), n=st.integers(3, 12),
       p=st.integers(0, 12), seed=st.integers(0, 9999))
def test_objective_decomposition_before_and_after_merge(kind, N, n, p, seed):
    inst = generate_instance(kind, N, seed)
    sol = random_construction(inst, np.random.default_rng(seed))
    n = min(n, sol.order.size)
    dec = decompose(inst, sol, n, p % n)
    wins, rest = objective_terms(inst, sol, dec)
    assert math.fsum(wins) + rest == pytest.approx(sol.objective, abs=1e-9)
    picks = [conquer_exact(inst, sp) if sp.size <= 9 else sp.original for sp in dec.subproblems]
    new, _ = accept_and_merge(inst, sol, dec, picks)
    dec2 = decompose(inst, new, n, p % n)
    wins2, rest2 = objective_terms(inst, new, dec2)
    assert math.fsum(wins2) + rest2 == pytest.approx(new.objective, abs=1e-9)


@settings(max_examples=80, deadline=None)
@given(kind=st.sampled_from(list(Kind)), N=st.integers(6, 50), n=st.integers(2, 10), p=st.integers(0, 10),
       seed=st.integers(0, 9999))
def test_merge_legality_and_monotonicity(kind, N, n, p, seed):
    inst = generate_instance(kind, N, seed)
    rng = np.random.default_rng(seed)
    sol = random_construction(inst, rng)
    if kind in (Kind.KP, Kind.MIS):
        m = min(n, N)
    else:
        m = min(n, sol.order.size)
        if m < 3:
            return
    dec = decompose(inst, sol, m, p % m, rng, margin_window=0)
    store = init_conquering(ConquerConfig(kind, 8), seed % 5)
    picks = []
    for sp in dec.subproblems:
        seqs, _, _ = conquer_neural(inst, sp, store, 2, False, "sample", seed)
        for s in seqs:
            assert sub_violation(inst, sp, s) is None
        picks.append(seqs[0])
    new, _ = accept_and_merge(inst, sol, dec, picks)
    assert check_feasibility(inst, new).ok
    assert cost(inst, new) <= cost(inst, sol)


def test_normalization_neutral_for_exact_order():
    rng = np.random.default_rng(0)
    for case in range(50):
        inst, sol, _ = _tsp_sub(N=30, n=9, seed=case)
        p = int(rng.integers(9))
        on = decompose(inst, sol, 9, p, normalized=True)
        off = decompose(inst, sol, 9, p, normalized=False)
        for a, b in zip(on.subproblems, off.subproblems):
            assert conquer_exact(inst, a, True) == conquer_exact(inst, b, False)
