"""Divide-Conquer-Reunion training with shared-baseline REINFORCE."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import nnet
from .conquer import replay_log_probs
from .divide import agnn_forward, decode_t_revisit, rollout_log_probs
from .graph import build_sparse_graph
from .model import Models
from .problems import Instance, Kind, cost, generate_instance
from .solve import stage

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "mean_f_x0", "mean_f_x1", "mean_f_x2", "grad_norm_d", "grad_norm_c", "wall_ms")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    kind: Kind
    sizes: tuple[int, int] = (20, 60)
    n: int = 10
    alpha: int = 8
    beta: int = 8
    epochs: int = 1
    epoch_size: int = 64
    batch_size: int = 8
    lr_divide: float = 1e-3
    lr_conquer: float = 1e-3
    seed: int = 0
    two_sided: bool | None = None
    dcr_enabled: bool | None = None
    layers: int = 4
    width: int = 32
    conquer_width: int = 32
    K: int | None = None
    T: int = 1
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = Kind.parse(self.kind)
        self.sizes = tuple(int(x) for x in self.sizes)
        if self.two_sided is None:
            self.two_sided = self.kind in (Kind.TSP, Kind.OP, Kind.PCTSP)
        if self.dcr_enabled is None:
            self.dcr_enabled = self.kind is not Kind.KP
        if self.alpha < 2 or self.beta < 2:
            raise ValueError("alpha and beta must both be >= 2 for the shared baselines")
        if self.n % 2:
            raise ValueError("n must be even so that n/2 is integral")
        if self.two_sided and self.beta % 2:
            raise ValueError("two-sided conquering needs an even beta")
        if self.sizes[0] > self.sizes[1] or self.sizes[0] < self.n:
            raise ValueError("size range must satisfy n <= lo <= hi")
        if self.epochs < 0 or self.epoch_size < 1 or self.batch_size < 1:
            raise ValueError("epochs >= 0, epoch_size >= 1 and batch_size >= 1 are required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["sizes"] = list(self.sizes)
        return d


# ---------------------------------------------------------------------------
# Losses


def advantages(costs) -> np.ndarray:
    c = np.asarray(costs, dtype=np.float64)
    return c - c.mean(axis=-1, keepdims=True)


def loss_dividing(log_probs: torch.Tensor, costs) -> torch.Tensor:
    """(1/α) Σ_i (f_i − mean f) log π_d(x_i) with the advantage held constant."""
    alpha = log_probs.shape[0]
    if alpha < 2:
        raise ValueError("the dividing baseline needs alpha >= 2")
    adv = torch.as_tensor(advantages(costs), dtype=log_probs.dtype)
    return (adv * log_probs).sum() / alpha


def loss_conquering(log_probs: torch.Tensor, costs, alpha: int, n_windows: int) -> torch.Tensor:
    """Per-sub-problem baseline over β rollouts, scaled by 1/(α β ⌊N/n⌋).

    ``log_probs`` and ``costs`` have shape (sub-problems, β).
    """
    if log_probs.dim() != 2:
        raise ValueError("conquering log-probs must have shape (sub-problems, beta)")
    beta = log_probs.shape[1]
    if beta < 2:
        raise ValueError("the conquering baseline needs beta >= 2")
    if log_probs.shape[0] == 0:
        return torch.zeros((), dtype=log_probs.dtype)
    adv = torch.as_tensor(advantages(costs), dtype=log_probs.dtype)
    return (adv * log_probs).sum() / (alpha * beta * max(n_windows, 1))


# ---------------------------------------------------------------------------
# One DCR step


@dataclass
class StepResult:
    grad_d: dict
    grad_c: dict
    f_x0: float
    f_x1: float
    f_x2: float
    loss_d: float
    loss_c: float


@dataclass
class Surrogate:
    """Recorded rollouts of one DCR step; the losses are a pure function of the parameters.

    Advantages are frozen at recording time, so differentiating ``losses``
    gives the score-function gradient estimate.
    """

    graph: object
    rollouts: list
    costs: list[float]
    stages: list  # (trace, reward costs, window count) per conquering pass
    alpha: int
    x: tuple

    def losses(self, models: Models) -> tuple[torch.Tensor, torch.Tensor]:
        # batch statistics drive the forward pass; running stats were already updated once while recording
        saved = {k: v.clone() for k, v in models.divide.buffers.items()}
        h, e = agnn_forward(self.graph, models.divide, models.agnn, training=True)
        models.divide.buffers.update(saved)
        loss_d = loss_dividing(rollout_log_probs(h, e, models.divide, models.agnn, self.graph, self.rollouts), self.costs)
        loss_c = torch.zeros((), dtype=torch.float64)
        for trace, costs, windows in self.stages:
            lp = replay_log_probs(models.conquer, trace).reshape(costs.shape)
            loss_c = loss_c + loss_conquering(lp, costs, self.alpha, windows)
        return loss_d, loss_c


def _conquer_pass(inst: Instance, sols, p: int, models: Models, cfg: TrainConfig, rng, stages: list) -> list:
    res = stage(inst, sols, p, models, cfg.n, rng, cfg.beta, bool(cfg.two_sided), "sample", "neural",
                margin_recycling=True, normalized=True, record=True)
    if res.batch is not None:
        stages.append((res.batch.trace, res.reward_costs, inst.n // cfg.n))
    return res.solutions


def record_step(inst: Instance, models: Models, cfg: TrainConfig, rng: np.random.Generator) -> Surrogate:
    """Sample α solutions, Conquer at p = n/2, Reunion at p = n; keep everything needed to replay."""
    graph = build_sparse_graph(inst, cfg.K)
    with torch.no_grad():
        emb = agnn_forward(graph, models.divide, models.agnn, training=True)
    seed = int(rng.integers(2**31))
    rollouts = decode_t_revisit(inst, graph, models.divide, models.agnn, cfg.T, cfg.alpha, "sample", seed,
                                record=True, embeddings=emb)
    x0 = [r.solution for r in rollouts]
    stages: list = []
    x1 = _conquer_pass(inst, x0, cfg.n // 2, models, cfg, rng, stages)
    x2 = _conquer_pass(inst, x1, cfg.n, models, cfg, rng, stages) if cfg.dcr_enabled else x1
    return Surrogate(graph, rollouts, [cost(inst, s) for s in x2], stages, cfg.alpha, (x0, x1, x2))


def dcr_step(inst: Instance, models: Models, cfg: TrainConfig, rng: np.random.Generator) -> StepResult:
    """One DCR step on one instance: both policy gradients plus the mean objectives."""
    sur = record_step(inst, models, cfg, rng)
    loss_d, loss_c = sur.losses(models)
    ld, lc = loss_d.item(), loss_c.item()
    if not (math.isfinite(ld) and math.isfinite(lc)):
        raise TrainingError(f"non-finite loss (dividing {ld}, conquering {lc})")
    grad_d = nnet.backward(loss_d, models.divide)
    grad_c = nnet.backward(loss_c, models.conquer)
    x0, x1, x2 = sur.x
    mean = lambda xs: float(np.mean([s.objective for s in xs]))  # noqa: E731
    return StepResult(grad_d, grad_c, mean(x0), mean(x1), mean(x2), ld, lc)


# ---------------------------------------------------------------------------
# Training loop


def instance_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


def train(cfg: TrainConfig, out_dir: str | Path, models: Models | None = None, progress=None) -> tuple[Models, list[dict]]:
    """Train for ``cfg.epochs`` epochs; writes ``model.ckpt`` (every epoch) and ``train_log.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    if models is None:
        models = Models.init(cfg.kind, cfg.layers, cfg.width, cfg.conquer_width, cfg.seed, cfg.lr_divide, cfg.lr_conquer)
    ckpt = out / "model.ckpt"
    models.save(ckpt, cfg.to_dict())
    if not cfg.dcr_enabled:
        log.info("Reunion disabled for %s (DCR off): f(x2) = f(x1)", cfg.kind.value)
    rows: list[dict] = []
    log_path = out / "train_log.csv"
    with log_path.open("w", newline="") as fh:
        csv.writer(fh).writerow(LOG_COLUMNS)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        f0, f1, f2, gd, gc = [], [], [], [], []
        acc_d = acc_c = None
        pending = 0
        for idx in range(cfg.epoch_size):
            rng = instance_rng(cfg.seed, epoch, idx)
            N = int(rng.integers(cfg.sizes[0], cfg.sizes[1] + 1))
            inst = generate_instance(cfg.kind, N, int(rng.integers(2**31)), cfg.params)
            try:
                res = dcr_step(inst, models, cfg, rng)
            except TrainingError as exc:
                snap = out / "diagnostic.json"
                snap.write_text(json.dumps({"epoch": epoch, "index": idx, "instance": inst.to_dict(), "error": str(exc)}))
                raise TrainingError(f"{exc}; snapshot written to {snap}") from exc
            f0.append(res.f_x0)
            f1.append(res.f_x1)
            f2.append(res.f_x2)
            gd.append(nnet.grad_norm(res.grad_d))
            gc.append(nnet.grad_norm(res.grad_c))
            acc_d = nnet.add_grads(acc_d, res.grad_d)
            acc_c = nnet.add_grads(acc_c, res.grad_c)
            pending += 1
            if pending == cfg.batch_size or idx == cfg.epoch_size - 1:
                nnet.adam_step(models.divide, {k: v / pending for k, v in acc_d.items()})
                nnet.adam_step(models.conquer, {k: v / pending for k, v in acc_c.items()})
                acc_d = acc_c = None
                pending = 0
        row = {
            "epoch": epoch,
            "mean_f_x0": float(np.mean(f0)),
            "mean_f_x1": float(np.mean(f1)),
            "mean_f_x2": float(np.mean(f2)),
            "grad_norm_d": float(np.mean(gd)),
            "grad_norm_c": float(np.mean(gc)),
            "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
        }
        rows.append(row)
        with log_path.open("a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row[c]) for c in LOG_COLUMNS])
        models.save(ckpt, cfg.to_dict())
        if progress is not None:
            progress(row)
    return models, rows


def _fmt(x) -> str:
    return repr(x) if isinstance(x, float) else str(x)
