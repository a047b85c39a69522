"""Run configuration: one flat dataclass, JSON in and out, strict keys.

Desk-scale defaults keep a full two-phase run under a couple of minutes on
one core.  Full-scale values (2048-dim regions, 1024-dim embeddings, pools
of 400 images / 2000 captions with top lists 60/300) are reachable by
overriding the same fields.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 16
    phase1_lr: float = 2e-4
    phase2_lr: float = 2e-5
    phase1_epochs: int = 30
    phase2_epochs: int = 15

    embed_dim: int = 32
    word_dim: int = 32

    attention_lam: float = 10.0
    prior_eta: float = 0.35
    delta1: float = 0.2
    delta2: float = 0.0
    tau: float = 1.5
    mu: float = 0.3
    beta: float = 10.0
    delta_max: float = 1.0

    pool_images: int = 40
    pool_captions: int = 200
    top_k: int = 6
    top_q: int = 30
    mine_refresh_epochs: int = 0  # 0: mine once at the start of phase 2

    optimizer: str = "adam"
    grad_clip: float = 2.0
    negatives: str = "hardest"
    label_mixture: str = "prior"
    pair_term: str = "partners"
    cider_variant: str = "plain"
    rerank_gamma: float = 0.7

    def validate(self) -> "TrainConfig":
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        for name in ("phase1_lr", "phase2_lr", "attention_lam", "tau", "mu", "beta", "delta_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("phase1_epochs", "phase2_epochs", "mine_refresh_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (0.0 <= self.prior_eta <= 1.0):
            raise ValueError(f"prior_eta must lie in [0, 1], got {self.prior_eta}")
        if not (0.0 <= self.rerank_gamma <= 1.0):
            raise ValueError(f"rerank_gamma must lie in [0, 1], got {self.rerank_gamma}")
        if self.delta1 < 0 or self.delta2 < 0:
            raise ValueError("margins must be nonnegative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer: {self.optimizer}")
        if self.negatives not in ("hardest", "sum"):
            raise ValueError(f"unknown negative selection: {self.negatives}")
        if self.label_mixture not in ("prior", "literal"):
            raise ValueError(f"unknown label mixture: {self.label_mixture}")
        if self.pair_term not in ("partners", "mined"):
            raise ValueError(f"unknown pair term: {self.pair_term}")
        if self.cider_variant != "plain":
            # the length-penalty variant is reserved, not implemented
            raise ValueError(f"unsupported cider variant: {self.cider_variant}")
        if min(self.embed_dim, self.word_dim, self.pool_images, self.pool_captions, self.top_k, self.top_q) < 1:
            raise ValueError("dimensions, pool sizes, and top list sizes must be positive")
        if self.grad_clip <= 0:
            raise ValueError(f"grad_clip must be positive, got {self.grad_clip}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data).validate()

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")
