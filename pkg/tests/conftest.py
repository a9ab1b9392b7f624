import numpy as np
import pytest

from udc.model import Models
from udc.problems import Kind, new_state

KINDS = list(Kind)
ACCEPTANCE: list[str] = []  # one line per acceptance criterion, echoed after the run


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


def random_construction(inst, rng):
    """Uniformly random feasible construction driven only by the feasibility masks."""
    state = new_state(inst)
    while not state.done:
        m = state.mask()
        if not m.any():
            break
        choices = np.flatnonzero(m)
        if inst.kind in (Kind.OP, Kind.PCTSP) and len(choices) > 1 and rng.random() < 0.8:
            choices = choices[choices != 0]  # favour longer tours
        state.step(int(rng.choice(choices)))
    return state.solution()


def euclid(a, b):
    return float(np.hypot(*(np.asarray(a) - np.asarray(b))))


@pytest.fixture(scope="session")
def tiny_models():
    """Small untrained policies per kind, shared by the slower tests."""
    return {k: Models.init(k, layers=2, width=16, conquer_width=16, seed=0) for k in Kind}


def surrogate_gradient_errors(seed=0, N=12, n=4, h=1e-6):
    """Worst relative/absolute mismatch between surrogate gradients and central differences.

    Float64 toy configuration; rollouts are recorded once and the surrogate
    losses replayed for every perturbation.
    """
    import torch

    from udc import nnet
    from udc.problems import generate_instance
    from udc.train import TrainConfig, record_step

    cfg = TrainConfig("tsp", sizes=(N, N), n=n, alpha=2, beta=2, layers=1, width=4, conquer_width=4, seed=seed)
    models = Models.init("tsp", cfg.layers, cfg.width, cfg.conquer_width, seed)
    models.divide = models.divide.to(torch.float64)
    models.conquer = models.conquer.to(torch.float64)
    inst = generate_instance("tsp", N, seed)
    sur = record_step(inst, models, cfg, np.random.default_rng(seed))
    out = {}
    for which, idx in (("divide", 0), ("conquer", 1)):
        store = getattr(models, which)
        analytic = nnet.backward(sur.losses(models)[idx], store)
        numeric = nnet.finite_difference(lambda _s: sur.losses(models)[idx].item(), store, h)
        worst = -np.inf
        for k in analytic:
            a, b = analytic[k].numpy(), numeric[k].numpy()
            excess = np.abs(a - b) - (1e-5 + 1e-3 * np.maximum(np.abs(a), np.abs(b)))
            worst = max(worst, float(excess.max(initial=-np.inf)))
        out[which] = worst
    return out, sur


@pytest.fixture(scope="session")
def tsp20_run(tmp_path_factory):
    """The desk-scale TSP20 training run (30 epochs) shared by the training and acceptance tests."""
    import time

    from udc.train import TrainConfig, train

    out = tmp_path_factory.mktemp("tsp20")
    cfg = TrainConfig("tsp", sizes=(20, 20), n=10, alpha=8, beta=8, epochs=30, epoch_size=128, batch_size=8,
                      seed=0, lr_divide=1e-3, lr_conquer=1e-3)
    initial = Models.init("tsp", cfg.layers, cfg.width, cfg.conquer_width, cfg.seed)
    t0 = time.perf_counter()
    models, rows = train(cfg, out)
    return {"cfg": cfg, "initial": initial, "models": models, "rows": rows, "seconds": time.perf_counter() - t0, "out": out}
