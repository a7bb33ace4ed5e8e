"""Reliable-sample entropy minimization with a sharpness-aware update."""

from __future__ import annotations

import math

import numpy as np

from .. import ops
from ..data import AdaptationSet
from ..model import Model
from ..optim import make_optimizer
from ..tensor import Tape, backward
from .common import AdaptConfig, BatchCallback, epoch_batches


def entropy_margin(class_count: int, factor: float) -> float:
    return factor * math.log(class_count)


def _filtered_entropy(logits, keep: np.ndarray):
    return ops.mean_entropy(ops.select_rows(logits, keep))


def adapt_sar(model: Model, delta_t: AdaptationSet, cfg: AdaptConfig, on_batch: BatchCallback | None = None) -> Model:
    model = model.copy()
    if len(delta_t) == 0:
        return model
    source_state = {k: v.copy() for k, v in model.state_arrays().items()}
    e0 = entropy_margin(model.class_count, cfg.sar_e0_factor)
    reset_gap = cfg.sar_reset_factor * math.log(model.class_count)
    model.set_trainable("norm_affine")
    params = model.group_params("norm_affine")
    stats = model.group_params("norm_stats")
    opt = make_optimizer(cfg.optimizer, params, cfg.lr)
    ema = None
    ema_min = math.inf

    for pos, images in epoch_batches(delta_t, cfg):
        stats_before = [s.data.copy() for s in stats]

        def skip():
            for s, before in zip(stats, stats_before):
                s.data[...] = before
            if on_batch is not None:
                on_batch(model, pos)

        opt.zero_grad()
        with Tape() as tape:
            out = model.forward(images, "adapt")
            ent = ops.entropy_per_sample(out.logits.data)
            keep = np.flatnonzero(ent < e0)
            loss = _filtered_entropy(out.logits, keep) if keep.size else None
        if loss is None or not math.isfinite(loss.item()):
            skip()
            continue
        backward(loss, tape)

        grad_norm = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
        perturb = [cfg.sar_rho * p.grad / (grad_norm + 1e-12) for p in params]
        for p, e in zip(params, perturb):
            p.data += e.astype(p.data.dtype)
        opt.zero_grad()

        with Tape() as tape:
            out2 = model.forward(images, "batch")
            logits2 = ops.select_rows(out2.logits, keep)
            ent2 = ops.entropy_per_sample(logits2.data)
            keep2 = np.flatnonzero(ent2 < e0)
            loss2 = _filtered_entropy(logits2, keep2) if keep2.size else None
        for p, e in zip(params, perturb):
            p.data -= e.astype(p.data.dtype)
        if loss2 is None or not math.isfinite(loss2.item()):
            opt.zero_grad()
            skip()
            continue
        backward(loss2, tape)
        opt.step()

        value = loss2.item()
        ema = value if ema is None else cfg.sar_ema * ema + (1 - cfg.sar_ema) * value
        ema_min = min(ema_min, ema)
        if ema > ema_min + reset_gap:
            model.load_state(source_state)
            opt.reset_state()
            ema, ema_min = None, math.inf
        if on_batch is not None:
            on_batch(model, pos)
    model.set_trainable()
    return model
