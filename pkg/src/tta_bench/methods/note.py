"""Instance-aware normalization with a prediction-balanced reservoir of recent samples."""

from __future__ import annotations

from collections import Counter

import numpy as np

from .. import ops
from ..data import AdaptationSet
from ..model import Model
from ..optim import make_optimizer
from ..seeding import rng
from ..tensor import Tape, backward, no_grad
from .common import AdaptConfig, BatchCallback, check_loss, epoch_batches


class PredictionBalancedReservoir:
    """Fixed-capacity memory that keeps predicted classes balanced.

    When full, a sample of a non-majority class evicts a random member of a
    (randomly chosen) majority class; a sample of a majority class replaces a
    random member of its own class with reservoir probability
    ``count / seen`` for that class.
    """

    def __init__(self, capacity: int, seed: int = 0) -> None:
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: dict[int, list] = {}
        self._seen: Counter = Counter()
        self._rng = rng(seed, "pbrs")

    def __len__(self) -> int:
        return sum(len(v) for v in self._items.values())

    def counts(self) -> dict[int, int]:
        return {c: len(v) for c, v in self._items.items() if v}

    def add(self, item, predicted: int) -> None:
        predicted = int(predicted)
        self._seen[predicted] += 1
        bucket = self._items.setdefault(predicted, [])
        if len(self) < self.capacity:
            bucket.append(item)
            return
        counts = self.counts()
        top = max(counts.values())
        majority = sorted(c for c, n in counts.items() if n == top)
        if predicted not in majority:
            victim = majority[int(self._rng.integers(len(majority)))]
            members = self._items[victim]
            members.pop(int(self._rng.integers(len(members))))
            bucket.append(item)
        elif self._rng.random() < len(bucket) / self._seen[predicted]:
            bucket[int(self._rng.integers(len(bucket)))] = item

    def items(self) -> list:
        return [it for c in sorted(self._items) for it in self._items[c]]


def adapt_note(model: Model, delta_t: AdaptationSet, cfg: AdaptConfig, on_batch: BatchCallback | None = None) -> Model:
    model = model.copy()
    if len(delta_t) == 0:
        return model
    memory = PredictionBalancedReservoir(cfg.note_reservoir, seed=cfg.seed)
    opt = None
    if cfg.note_finetune_affine:
        model.set_trainable("norm_affine")
        opt = make_optimizer(cfg.optimizer, model.group_params("norm_affine"), cfg.lr)
    for pos, images in epoch_batches(delta_t, cfg):
        with no_grad():
            preds = model.forward(images, "instance", alpha=cfg.note_alpha).logits.data.argmax(axis=1)
        for img, c in zip(images, preds):
            memory.add(img, c)
        if len(memory):
            mem = np.stack(memory.items())
            if opt is None:
                with no_grad():
                    model.forward(mem, "adapt", momentum=cfg.note_momentum)
            else:
                opt.zero_grad()
                with Tape() as tape:
                    out = model.forward(mem, "adapt", momentum=cfg.note_momentum)
                    loss = ops.mean_entropy(out.logits)
                check_loss(loss, "note")
                backward(loss, tape)
                opt.step()
        if on_batch is not None:
            on_batch(model, pos)
    model.set_trainable()
    return model
