"""Paired dividing and conquering policies and their checkpoint container."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

from . import nnet
from .conquer.policy import ConquerConfig, init_conquering
from .divide import AgnnConfig, init_dividing
from .graph import FEATURE_VERSION
from .problems import Kind


class CheckpointMismatch(ValueError):
    pass


@dataclass
class Models:
    kind: Kind
    agnn: AgnnConfig
    divide: nnet.ParamStore
    conquer_cfg: ConquerConfig
    conquer: nnet.ParamStore

    @classmethod
    def init(cls, kind, layers: int = 4, width: int = 32, conquer_width: int = 32, seed: int = 0,
             lr_divide: float = 1e-4, lr_conquer: float = 1e-4) -> "Models":
        kind = Kind.parse(kind)
        agnn = AgnnConfig(kind, layers, width)
        ccfg = ConquerConfig(kind, conquer_width)
        return cls(kind, agnn, init_dividing(agnn, seed, lr_divide), ccfg, init_conquering(ccfg, seed + 1, lr_conquer))

    def meta(self, config: dict | None = None) -> dict:
        return {
            "kind": self.kind.value,
            "agnn": self.agnn.to_dict(),
            "conquer": self.conquer_cfg.to_dict(),
            "feature_version": FEATURE_VERSION,
            "bn_momentum": nnet.BN_MOMENTUM,
            "config": config or {},
        }

    def save(self, path: str | Path, config: dict | None = None) -> None:
        nnet.save_checkpoint(path, {"divide": self.divide, "conquer": self.conquer}, self.meta(config))

    @classmethod
    def load(cls, path: str | Path) -> "Models":
        stores, meta = nnet.load_checkpoint(path)
        if meta.get("feature_version") != FEATURE_VERSION:
            raise CheckpointMismatch(f"{path}: feature layout v{meta.get('feature_version')} != v{FEATURE_VERSION}")
        kind = Kind.parse(meta["kind"])
        a, c = meta["agnn"], meta["conquer"]
        return cls(kind, AgnnConfig(kind, a["layers"], a["width"]), stores["divide"], ConquerConfig(kind, c["width"]), stores["conquer"])

    def require_kind(self, kind: Kind) -> None:
        if Kind.parse(kind) is not self.kind:
            raise CheckpointMismatch(f"checkpoint is for {self.kind.value}, instance is {Kind.parse(kind).value}")


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
