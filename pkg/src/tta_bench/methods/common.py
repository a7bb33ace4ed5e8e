from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterator

import numpy as np

from ..data import AdaptationSet
from ..model import Model
from ..seeding import derive_seed
from ..tensor import Tensor

BatchCallback = Callable[[Model, np.ndarray], None]


class AdaptationFailure(RuntimeError):
    """An adaptation run could not complete (e.g. the loss became non-finite)."""


@dataclass
class AdaptConfig:
    batch_size: int = 64
    epochs: int = 1
    optimizer: str = "sgd_momentum"
    lr: float = 1e-3
    seed: int = 0
    # SHOT
    shot_beta: float = 0.3
    shot_pl_rounds: int = 2
    # SAR
    sar_e0_factor: float = 0.4
    sar_rho: float = 0.05
    sar_reset_factor: float = 0.2
    sar_ema: float = 0.9
    # NOTE
    note_alpha: float = 4.0
    note_reservoir: int = 64
    note_momentum: float = 0.01
    note_finetune_affine: bool = False
    # T3A
    t3a_support_m: int = 20
    t3a_pseudo_label: str = "head"  # or "prototype"

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer not in ("sgd", "sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.t3a_pseudo_label not in ("head", "prototype"):
            raise ValueError(f"unknown t3a_pseudo_label {self.t3a_pseudo_label!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown adapt option(s): {sorted(unknown)}")
        return cls(**d)


def epoch_batches(delta_t: AdaptationSet, cfg: AdaptConfig) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    for epoch in range(cfg.epochs):
        yield from delta_t.batches(cfg.batch_size, derive_seed(cfg.seed, "epoch", epoch))


def batch_count(n: int, cfg: AdaptConfig) -> int:
    return cfg.epochs * math.ceil(n / cfg.batch_size)


def check_loss(loss: Tensor, method: str) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise AdaptationFailure(f"{method}: non-finite loss {value}")
    return value
