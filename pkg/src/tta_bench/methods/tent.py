"""Entropy minimization over the normalization affine parameters."""

from __future__ import annotations

from .. import ops
from ..data import AdaptationSet
from ..model import Model
from ..optim import make_optimizer
from ..tensor import Tape, backward
from .common import AdaptConfig, BatchCallback, check_loss, epoch_batches


def adapt_tent(model: Model, delta_t: AdaptationSet, cfg: AdaptConfig, on_batch: BatchCallback | None = None) -> Model:
    model = model.copy()
    if len(delta_t) == 0:
        return model
    model.set_trainable("norm_affine")
    opt = make_optimizer(cfg.optimizer, model.group_params("norm_affine"), cfg.lr)
    for pos, images in epoch_batches(delta_t, cfg):
        opt.zero_grad()
        with Tape() as tape:
            out = model.forward(images, "adapt")
            loss = ops.mean_entropy(out.logits)
        check_loss(loss, "tent")
        backward(loss, tape)
        opt.step()
        if on_batch is not None:
            on_batch(model, pos)
    model.set_trainable()
    return model
