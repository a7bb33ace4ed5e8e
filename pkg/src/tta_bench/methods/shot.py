"""Information maximization plus nearest-centroid pseudo-labels; the classifier head stays frozen."""

from __future__ import annotations

import numpy as np

from .. import ops
from ..data import AdaptationSet
from ..model import Model
from ..optim import make_optimizer
from ..seeding import derive_seed
from ..tensor import Tape, backward, no_grad
from .common import AdaptConfig, BatchCallback, check_loss


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def assign_nearest(features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the centroid with the smallest cosine distance, per row."""
    sim = _normalize_rows(features) @ _normalize_rows(centroids).T
    return sim.argmax(axis=1)


def hard_centroids(features: np.ndarray, labels: np.ndarray, previous: np.ndarray) -> np.ndarray:
    out = previous.copy()
    for k in range(previous.shape[0]):
        members = labels == k
        if members.any():
            out[k] = features[members].mean(axis=0)
    return out


def pseudo_labels(features: np.ndarray, probs: np.ndarray, rounds: int) -> tuple[np.ndarray, np.ndarray]:
    """Soft-weighted centroids refined by ``rounds`` of hard reassignment."""
    f = features.astype(np.float64)
    p = probs.astype(np.float64)
    centroids = (p.T @ f) / np.maximum(p.sum(axis=0)[:, None], 1e-12)
    for _ in range(rounds):
        labels = assign_nearest(f, centroids)
        centroids = hard_centroids(f, labels, centroids)
    return assign_nearest(f, centroids), centroids


def shot_loss(logits, labels, beta: float):
    loss = ops.elementwise_add(ops.mean_entropy(logits), ops.scalar_scale(ops.marginal_entropy(logits), -1.0))
    if beta:
        loss = ops.elementwise_add(loss, ops.scalar_scale(ops.cross_entropy(logits, labels), beta))
    return loss


def _embed_all(model: Model, images: np.ndarray, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    feats, probs = [], []
    with no_grad():
        for start in range(0, len(images), batch_size):
            # batch moments without touching the running buffers
            out = model.forward(images[start:start + batch_size], "batch")
            feats.append(out.embeddings.data)
            probs.append(ops.softmax(out.logits).data)
    return np.concatenate(feats), np.concatenate(probs)


def adapt_shot(model: Model, delta_t: AdaptationSet, cfg: AdaptConfig, on_batch: BatchCallback | None = None) -> Model:
    model = model.copy()
    if len(delta_t) == 0:
        return model
    model.set_trainable("feature_weights", "norm_affine")
    opt = make_optimizer(cfg.optimizer, model.group_params("feature_weights", "norm_affine"), cfg.lr)
    images = delta_t.images
    for epoch in range(cfg.epochs):
        feats, probs = _embed_all(model, images, cfg.batch_size)
        labels, _ = pseudo_labels(feats, probs, cfg.shot_pl_rounds)
        for pos, batch in delta_t.batches(cfg.batch_size, derive_seed(cfg.seed, "epoch", epoch)):
            opt.zero_grad()
            with Tape() as tape:
                out = model.forward(batch, "adapt")
                loss = shot_loss(out.logits, labels[pos], cfg.shot_beta)
            check_loss(loss, "shot")
            backward(loss, tape)
            opt.step()
            if on_batch is not None:
                on_batch(model, pos)
    model.set_trainable()
    return model
