import logging

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import surrogate_gradient_errors
from udc import nnet
from udc.conquer import replay_log_probs
from udc.model import Models
from udc.problems import generate_instance
from udc.solve import stage
from udc.train import (
    LOG_COLUMNS,
    TrainConfig,
    advantages,
    dcr_step,
    loss_conquering,
    loss_dividing,
    record_step,
    train,
)


def _leaf(values):
    return torch.tensor(values, dtype=torch.float64, requires_grad=True)


def test_dividing_advantages():
    assert advantages([9, 11]).tolist() == [-1.0, 1.0]
    lp = _leaf([-1.3, -0.2])
    (g,) = torch.autograd.grad(loss_dividing(lp, [10, 10]), lp)
    assert torch.count_nonzero(g) == 0
    with pytest.raises(ValueError):
        loss_dividing(_leaf([-1.0]), [1.0])


def test_dividing_gradient_is_weighted_score_sum():
    store = nnet.ParamStore()
    w = store.add("w", np.array([0.3, -0.7, 1.1])).double()
    feats = torch.tensor([[1.0, 2.0, 0.5], [0.1, -1.0, 2.0], [0.0, 0.3, 0.3]], dtype=torch.float64)
    costs = [3.0, 5.0, 7.0]
    loss = loss_dividing(feats @ w, costs)
    (g,) = torch.autograd.grad(loss, w)
    adv = np.array(costs) - 5.0
    # score of each solution is d(feats_i . w)/dw = feats_i
    manual = sum(adv[i] * feats[i].numpy() for i in range(3)) / 3
    assert np.allclose(g.numpy(), manual)


def test_conquering_prefactor():
    lp = _leaf([[-0.5, -1.0], [-0.2, -0.9]])
    alpha, windows = 2, 3
    (g,) = torch.autograd.grad(loss_conquering(lp, np.array([[1.0, 3.0], [2.0, 2.0]]), alpha, windows), lp)
    pref = alpha * 2 * windows
    assert np.allclose(g.numpy(), [[-1 / pref, 1 / pref], [0.0, 0.0]])
    with pytest.raises(ValueError):
        loss_conquering(_leaf([[-1.0], [-2.0]]), np.zeros((2, 1)), 1, 1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2), min_size=1, max_size=8))
def test_advantages_sum_to_zero(rows):
    adv = advantages(np.array(rows))
    assert np.all(np.abs(adv.sum(-1)) <= 1e-6 * max(1.0, np.abs(rows).max()))


def test_identical_rewards_zero_dividing_gradient():
    models = Models.init("tsp", 1, 8, 8, 0)
    cfg = TrainConfig("tsp", sizes=(12, 12), n=4, alpha=2, beta=2)
    sur = record_step(generate_instance("tsp", 12, 0), models, cfg, np.random.default_rng(0))
    sur.costs = [sur.costs[0]] * 2
    g = nnet.backward(sur.losses(models)[0], models.divide)
    assert nnet.grad_norm(g) == 0.0


def test_identical_subrollouts_zero_conquering_gradient():
    lp = _leaf([[-0.4, -0.4]])
    (g,) = torch.autograd.grad(loss_conquering(lp, np.array([[2.5, 2.5]]), 2, 1), lp)
    assert torch.count_nonzero(g) == 0


def test_leftover_tail_has_no_loss_term():
    models = Models.init("tsp", 1, 8, 8, 0)
    inst = generate_instance("tsp", 23, 0)
    cfg = TrainConfig("tsp", sizes=(10, 30), n=10, alpha=2, beta=2)
    sur = record_step(inst, models, cfg, np.random.default_rng(0))
    for _, costs, windows in sur.stages:
        # 23 nodes hold two full windows per solution; the 3-node tail is not a sub-problem
        assert costs.shape == (cfg.alpha * 2, cfg.beta) and windows == 2


def test_conquer_only_reduces_to_per_subproblem_reinforce():
    models = Models.init("tsp", 1, 8, 8, 1)
    cfg = TrainConfig("tsp", sizes=(20, 20), n=10, alpha=2, beta=2, dcr_enabled=False)
    inst = generate_instance("tsp", 20, 1)
    sur = record_step(inst, models, cfg, np.random.default_rng(5))
    assert len(sur.stages) == 1
    _, loss_c = sur.losses(models)
    trace, costs, windows = sur.stages[0]
    lp = replay_log_probs(models.conquer, trace).reshape(costs.shape)
    manual = sum(
        (costs[i, b] - costs[i].mean()) * lp[i, b] for i in range(costs.shape[0]) for b in range(costs.shape[1])
    ) / (cfg.alpha * cfg.beta * windows)
    assert loss_c.item() == pytest.approx(manual.item(), rel=1e-12)
    # frozen dividing policy: the conquering gradient does not touch it
    x0, x1, x2 = sur.x
    assert x2 is x1


def test_surrogate_gradients_match_finite_differences():
    errs, _ = surrogate_gradient_errors(seed=4)
    assert errs["divide"] <= 0 and errs["conquer"] <= 0


def test_kp_never_runs_reunion(caplog, tmp_path):
    cfg = TrainConfig("kp", sizes=(20, 20), n=10, alpha=2, beta=2, epochs=1, epoch_size=2, batch_size=2, layers=1, width=8)
    assert not cfg.dcr_enabled
    models = Models.init("kp", 1, 8, 8, 0)
    sur = record_step(generate_instance("kp", 20, 0), models, cfg, np.random.default_rng(0))
    assert len(sur.stages) == 1 and sur.x[2] is sur.x[1]
    with caplog.at_level(logging.INFO, logger="udc.train"):
        _, rows = train(cfg, tmp_path)
    assert "Reunion disabled" in caplog.text
    assert rows[0]["mean_f_x2"] == rows[0]["mean_f_x1"]


def test_kp_reunion_keeps_merge_legal():
    cfg = TrainConfig("kp", sizes=(30, 30), n=10, alpha=2, beta=2, dcr_enabled=True)
    models = Models.init("kp", 1, 8, 8, 0)
    for s in range(5):
        inst = generate_instance("kp", 30, s)
        sur = record_step(inst, models, cfg, np.random.default_rng(s))
        assert all(sol.feasible for xs in sur.x for sol in xs)


def test_config_guards():
    with pytest.raises(ValueError):
        TrainConfig("tsp", alpha=1)
    with pytest.raises(ValueError):
        TrainConfig("tsp", n=9)
    with pytest.raises(ValueError):
        TrainConfig("tsp", beta=3)


def test_zero_epochs_checkpoint_is_initialization(tmp_path):
    cfg = TrainConfig("tsp", sizes=(12, 12), n=4, alpha=2, beta=2, epochs=0, layers=1, width=8, conquer_width=8, seed=3)
    train(cfg, tmp_path)
    init = Models.init("tsp", 1, 8, 8, 3)
    back = Models.load(tmp_path / "model.ckpt")
    assert np.array_equal(back.divide.flat(), init.divide.flat().astype(np.float32))
    assert np.array_equal(back.conquer.flat(), init.conquer.flat().astype(np.float32))
    assert (tmp_path / "train_log.csv").read_text().strip() == ",".join(LOG_COLUMNS)


def test_seeded_runs_are_identical(tmp_path):
    def run(d):
        cfg = TrainConfig("cvrp", sizes=(12, 16), n=4, alpha=2, beta=2, epochs=2, epoch_size=3, batch_size=2,
                          layers=1, width=8, conquer_width=8, seed=11)
        _, rows = train(cfg, d)
        return rows, (d / "model.ckpt").read_bytes()

    r1, c1 = run(tmp_path / "a")
    r2, c2 = run(tmp_path / "b")
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_ms"} for r in rows]  # noqa: E731
    assert strip(r1) == strip(r2)
    assert c1 == c2


def test_dcr_step_reports_metrics():
    models = Models.init("pctsp", 1, 8, 8, 0)
    cfg = TrainConfig("pctsp", sizes=(20, 20), n=6, alpha=2, beta=2)
    res = dcr_step(generate_instance("pctsp", 20, 0), models, cfg, np.random.default_rng(0))
    assert res.f_x2 <= res.f_x1 <= res.f_x0
    assert set(res.grad_d) == set(models.divide.names())


def test_tsp20_desk_run_improves(tsp20_run):
    rows = tsp20_run["rows"]
    assert len(rows) == 30
    assert rows[-1]["mean_f_x2"] < rows[0]["mean_f_x2"]
