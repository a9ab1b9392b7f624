"""Differentiable compute substrate: named parameters, layer primitives, Adam, checkpoints.

Tensors and reverse-mode gradients come from torch; this module pins down the
contract the policies rely on (named parameter store, gradients keyed by name,
a guarded Adam step and a versioned little-endian checkpoint container).
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

DTYPE = torch.float32
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

torch.set_num_threads(int(os.environ.get("UDC_TORCH_THREADS", "1")))


class NNError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Parameter store


@dataclass
class ParamStore:
    params: dict[str, torch.Tensor] = field(default_factory=dict)
    buffers: dict[str, torch.Tensor] = field(default_factory=dict)
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def add(self, name: str, value: torch.Tensor | np.ndarray) -> torch.Tensor:
        if name in self.params:
            raise NNError(f"duplicate parameter {name}")
        t = torch.as_tensor(value, dtype=DTYPE).clone().requires_grad_(True)
        self.params[name] = t
        self.m[name] = torch.zeros_like(t, requires_grad=False)
        self.v[name] = torch.zeros_like(t, requires_grad=False)
        return t

    def add_buffer(self, name: str, value) -> torch.Tensor:
        t = torch.as_tensor(value, dtype=DTYPE).clone()
        self.buffers[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.params.values())).dtype if self.params else DTYPE

    def to(self, dtype: torch.dtype) -> "ParamStore":
        """Copy of the store cast to ``dtype`` (float64 is used for gradient checks)."""
        out = ParamStore(step=self.step, lr=self.lr, betas=self.betas, eps=self.eps)
        for k, t in self.params.items():
            out.params[k] = t.detach().to(dtype).clone().requires_grad_(True)
            out.m[k] = self.m[k].to(dtype).clone()
            out.v[k] = self.v[k].to(dtype).clone()
        for k, t in self.buffers.items():
            out.buffers[k] = t.to(dtype).clone()
        return out

    def clone(self) -> "ParamStore":
        return self.to(self.dtype)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.detach().cpu().numpy().ravel() for t in self.params.values()]) if self.params else np.zeros(0)

    def n_parameters(self) -> int:
        return sum(t.numel() for t in self.params.values())


# ---------------------------------------------------------------------------
# Forward primitives


def silu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[0 if b.dim() == 1 else -2]:
        raise NNError(f"matmul shape mismatch {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as exc:
        raise NNError(f"add shape mismatch {tuple(a.shape)} + {tuple(b.shape)}") from exc
    return a + b


def hadamard(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise NNError(f"hadamard shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return a * b


def masked_log_softmax(logits: torch.Tensor, mask: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Log-softmax restricted to ``mask``; masked entries get -inf.

    Every row must keep at least one entry.
    """
    if logits.shape != mask.shape:
        raise NNError(f"mask shape {tuple(mask.shape)} != logits shape {tuple(logits.shape)}")
    if not bool(mask.any(dim=dim).all()):
        raise NNError("softmax row with every entry masked")
    z = torch.where(mask, logits, torch.full_like(logits, -1e30))
    z = z - z.max(dim=dim, keepdim=True).values.detach()
    out = z - torch.logsumexp(z, dim=dim, keepdim=True)
    return torch.where(mask, out, torch.full_like(out, -math.inf))


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.exp(masked_log_softmax(logits, mask, dim))


def batch_norm(
    x: torch.Tensor,
    gamma: torch.Tensor,
    beta: torch.Tensor,
    running_mean: torch.Tensor,
    running_var: torch.Tensor,
    training: bool,
) -> torch.Tensor:
    """Batch normalization over the leading axis; updates running stats in training."""
    if training and x.shape[0] > 1:
        mean = x.mean(0)
        var = x.var(0, unbiased=False)
        with torch.no_grad():
            unbiased = var * x.shape[0] / (x.shape[0] - 1)
            running_mean.mul_(1 - BN_MOMENTUM).add_(BN_MOMENTUM * mean.detach().to(running_mean.dtype))
            running_var.mul_(1 - BN_MOMENTUM).add_(BN_MOMENTUM * unbiased.detach().to(running_var.dtype))
    else:
        mean = running_mean.to(x.dtype)
        var = running_var.to(x.dtype)
    return (x - mean) / torch.sqrt(var + BN_EPS) * gamma + beta


def mean_aggregate(messages: torch.Tensor, index: torch.Tensor, n: int) -> torch.Tensor:
    """Mean of edge messages per target row; rows with no edges get zeros."""
    out = torch.zeros((n, messages.shape[-1]), dtype=messages.dtype)
    out = out.index_add(0, index, messages)
    count = torch.bincount(index, minlength=n).clamp_min(1).to(messages.dtype)
    return out / count[:, None]


def linear_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


# ---------------------------------------------------------------------------
# Gradients and optimizer


def backward(loss: torch.Tensor, store: ParamStore) -> dict[str, torch.Tensor]:
    """Gradients of a scalar loss keyed by parameter name (zeros when unused)."""
    if loss.dim() != 0 and loss.numel() != 1:
        raise NNError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    names = store.names()
    tensors = [store.params[k] for k in names]
    if not loss.requires_grad:
        return {k: torch.zeros_like(t) for k, t in zip(names, tensors)}
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    return {k: (torch.zeros_like(t) if g is None else g.detach()) for k, t, g in zip(names, tensors, grads)}


def add_grads(acc: dict[str, torch.Tensor] | None, grads: dict[str, torch.Tensor], scale: float = 1.0):
    if acc is None:
        return {k: g * scale for k, g in grads.items()}
    for k, g in grads.items():
        acc[k] = acc[k] + g * scale
    return acc


def grad_norm(grads: dict[str, torch.Tensor]) -> float:
    return math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))


def adam_step(store: ParamStore, grads: dict[str, torch.Tensor]) -> ParamStore:
    """One bias-corrected Adam update, in place; aborts before touching anything on NaN."""
    for name, g in grads.items():
        if name not in store.params:
            raise NNError(f"gradient for unknown parameter {name}")
        if g.shape != store.params[name].shape:
            raise NNError(f"gradient shape mismatch for {name}")
        if not bool(torch.isfinite(g).all()):
            raise NNError(f"non-finite gradient in parameter {name}")
    store.step += 1
    b1, b2 = store.betas
    c1 = 1 - b1 ** store.step
    c2 = 1 - b2 ** store.step
    with torch.no_grad():
        for name, g in grads.items():
            p = store.params[name]
            g = g.to(p.dtype)
            store.m[name].mul_(b1).add_((1 - b1) * g)
            store.v[name].mul_(b2).add_((1 - b2) * g * g)
            m_hat = store.m[name] / c1
            v_hat = store.v[name] / c2
            p.sub_(store.lr * m_hat / (torch.sqrt(v_hat) + store.eps))
    return store


def finite_difference(fn, store: ParamStore, h: float = 1e-4, names: Iterable[str] | None = None):
    """Central differences of scalar ``fn(store)`` for every parameter entry."""
    out = {}
    for name in names or store.names():
        p = store.params[name]
        g = torch.zeros_like(p)
        for i in range(p.numel()):
            with torch.no_grad():
                flat = p.view(-1)
                old = float(flat[i])
                flat[i] = old + h
                fp = float(fn(store))
                flat[i] = old - h
                fm = float(fn(store))
                flat[i] = old
            g.view(-1)[i] = (fp - fm) / (2 * h)
        out[name] = g
    return out


# ---------------------------------------------------------------------------
# Checkpoint container
#
# layout: b"UDCK" | u32 version | u32 header_len | header JSON (utf-8) | payload
# header["entries"] lists {name, section, shape, offset, count}; payload holds
# raw little-endian float32 values.

MAGIC = b"UDCK"
CHECKPOINT_VERSION = 1


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path: str | Path, stores: dict[str, ParamStore], meta: dict) -> None:
    """Write several named stores atomically (temp file + rename)."""
    entries = []
    payload = io.BytesIO()
    for prefix, store in stores.items():
        sections = (("param", store.params), ("buffer", store.buffers), ("adam_m", store.m), ("adam_v", store.v))
        for section, tensors in sections:
            for name, t in tensors.items():
                arr = t.detach().cpu().numpy().astype("<f4")
                entries.append(
                    {"store": prefix, "name": name, "section": section, "shape": list(arr.shape), "offset": payload.tell(), "count": int(arr.size)}
                )
                payload.write(arr.tobytes())
    header = {
        "meta": meta,
        "config_hash": config_hash(meta.get("config", {})),
        "optim": {k: {"step": s.step, "lr": s.lr, "betas": list(s.betas), "eps": s.eps} for k, s in stores.items()},
        "entries": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
            fh.write(hbytes)
            fh.write(payload.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse(data: bytes, path) -> tuple[dict, int]:
    if data[:4] != MAGIC:
        raise NNError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise NNError(f"{path}: unsupported checkpoint version {version}")
    return json.loads(data[12 : 12 + hlen]), 12 + hlen


def read_header(path: str | Path) -> dict:
    return _parse(Path(path).read_bytes(), path)[0]


def load_checkpoint(path: str | Path) -> tuple[dict[str, ParamStore], dict]:
    data = Path(path).read_bytes()
    header, base = _parse(data, path)
    stores: dict[str, ParamStore] = {}
    for prefix, opt in header["optim"].items():
        stores[prefix] = ParamStore(step=opt["step"], lr=opt["lr"], betas=tuple(opt["betas"]), eps=opt["eps"])
    for e in header["entries"]:
        arr = np.frombuffer(data, dtype="<f4", count=e["count"], offset=base + e["offset"]).reshape(e["shape"])
        t = torch.from_numpy(arr.astype(np.float32).copy())
        s = stores[e["store"]]
        if e["section"] == "param":
            s.params[e["name"]] = t.requires_grad_(True)
        elif e["section"] == "buffer":
            s.buffers[e["name"]] = t
        elif e["section"] == "adam_m":
            s.m[e["name"]] = t
        else:
            s.v[e["name"]] = t
    return stores, header["meta"]
