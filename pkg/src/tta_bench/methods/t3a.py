"""Optimization-free prototype adjustment of the classifier head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import ops
from ..data import AdaptationSet
from ..model import Model
from ..tensor import no_grad
from .common import AdaptConfig, BatchCallback, epoch_batches


def _unit(v: np.ndarray) -> np.ndarray:
    return v / max(float(np.linalg.norm(v)), 1e-12)


@dataclass
class SupportSets:
    """Per-class (unit embedding, entropy) lists kept sorted by entropy, at most ``m`` long."""

    m: int
    entries: list[list[tuple[np.ndarray, float]]] = field(default_factory=list)

    @classmethod
    def seeded(cls, head_weight: np.ndarray, head_bias: np.ndarray, m: int) -> "SupportSets":
        sets = cls(m)
        for k in range(head_weight.shape[1]):
            w = _unit(head_weight[:, k].astype(np.float64))
            ent = float(ops.entropy_per_sample((w @ head_weight + head_bias)[None])[0])
            sets.entries.append([(w, ent)])
        return sets

    def push(self, k: int, embedding: np.ndarray, entropy: float) -> None:
        bucket = self.entries[k]
        bucket.append((_unit(embedding.astype(np.float64)), entropy))
        bucket.sort(key=lambda e: e[1])
        del bucket[self.m:]

    def prototype(self, k: int) -> np.ndarray:
        return _unit(np.mean([e for e, _ in self.entries[k]], axis=0))

    def prototypes(self) -> np.ndarray:
        """F x C matrix of unit prototypes (column k is class k)."""
        return np.stack([self.prototype(k) for k in range(len(self.entries))], axis=1)


def with_prototype_head(model: Model, prototypes: np.ndarray) -> Model:
    out = model.copy()
    out.params["head.weight"].data[...] = prototypes
    out.params["head.bias"].data[...] = 0.0
    return out


def adapt_t3a(
    model: Model, delta_t: AdaptationSet, cfg: AdaptConfig, on_batch: BatchCallback | None = None
) -> tuple[Model, SupportSets]:
    w = model.params["head.weight"].data
    b = model.params["head.bias"].data
    supports = SupportSets.seeded(w, b, cfg.t3a_support_m)
    protos = supports.prototypes()
    from_head = cfg.t3a_pseudo_label == "head"
    for pos, images in epoch_batches(delta_t, cfg):
        with no_grad():
            out = model.forward(images, "eval")
        feats = out.embeddings.data.astype(np.float64)
        head_logits = out.logits.data.astype(np.float64)
        for f, logit in zip(feats, head_logits):
            # source-head labels avoid prototype self-reinforcement when all embeddings share an orthant
            scores = logit if from_head else f @ protos
            k = int(scores.argmax())
            supports.push(k, f, float(ops.entropy_per_sample(scores[None])[0]))
            protos[:, k] = supports.prototype(k)
        if on_batch is not None:
            on_batch(with_prototype_head(model, protos), pos)
    return with_prototype_head(model, protos), supports
