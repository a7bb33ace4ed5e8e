"""TTA methods and the periodic adapt-save-reload driver."""

from __future__ import annotations

import logging
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from ..data import AdaptationSet
from ..model import Model, file_digest, load_model, save_model
from ..scenarios import ScenarioSplit
from ..tensor import NumericError, Tensor, no_grad
from .common import AdaptConfig, AdaptationFailure, BatchCallback, batch_count, epoch_batches
from .note import PredictionBalancedReservoir, adapt_note
from .sar import adapt_sar, entropy_margin
from .shot import adapt_shot
from .t3a import SupportSets, adapt_t3a
from .tent import adapt_tent

log = logging.getLogger(__name__)


def adapt_none(model: Model, delta_t: AdaptationSet, cfg: AdaptConfig, on_batch: BatchCallback | None = None) -> Model:
    """No adaptation: stream the batches through frozen inference and return the source weights."""
    for pos, images in epoch_batches(delta_t, cfg):
        with no_grad():
            model.forward(images, "eval")
        if on_batch is not None:
            on_batch(model, pos)
    return model.copy()


def _t3a_model_only(model, delta_t, cfg, on_batch=None):
    return adapt_t3a(model, delta_t, cfg, on_batch)[0]


METHODS: dict[str, Callable[..., Model]] = {
    "none": adapt_none,
    "tent": adapt_tent,
    "sar": adapt_sar,
    "shot": adapt_shot,
    "note": adapt_note,
    "t3a": _t3a_model_only,
}
METHOD_IDS = tuple(sorted(METHODS))
GRADIENT_METHODS = ("tent", "sar", "shot")

# parameter groups each method may change relative to the source model
UPDATE_SETS: dict[str, frozenset[str]] = {
    "none": frozenset(),
    "tent": frozenset({"norm_affine", "norm_stats"}),
    "sar": frozenset({"norm_affine", "norm_stats"}),
    "shot": frozenset({"feature_weights", "norm_affine", "norm_stats"}),
    "note": frozenset({"norm_stats"}),
    "t3a": frozenset({"classifier_head"}),
}


@dataclass
class AdaptationOutcome:
    model: Model
    path: Path
    digest: str
    failed: bool = False
    error: str | None = None


def run_periodic_adaptation(
    method: str,
    model: Model,
    split: ScenarioSplit,
    cfg: AdaptConfig,
    storage_dir=None,
    on_batch: BatchCallback | None = None,
) -> AdaptationOutcome:
    """Adapt once on the buffered adaptation set, persist the end-of-adaptation model, reload it.

    A failing method falls back to the source model and the outcome is flagged.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; known: {list(METHOD_IDS)}")
    # the buffered adaptation data is resident for the whole run
    resident = Tensor(split.delta_t.images) if len(split.delta_t) else None
    failed, error = False, None
    try:
        adapted = METHODS[method](model, split.delta_t, cfg, on_batch)
    except (AdaptationFailure, NumericError, FloatingPointError) as exc:
        log.warning("method %s failed: %s; falling back to the source model", method, exc)
        adapted, failed, error = model.copy(), True, str(exc)
    del resident
    if storage_dir is None:
        storage_dir = tempfile.mkdtemp(prefix="tta-bench-")
    path = Path(storage_dir) / f"adapted-{method}.bota"
    save_model(adapted, path)
    del adapted
    reloaded = load_model(path)
    return AdaptationOutcome(reloaded, path, file_digest(path), failed, error)


__all__ = [
    "AdaptConfig", "AdaptationFailure", "AdaptationOutcome", "GRADIENT_METHODS", "METHODS", "METHOD_IDS",
    "PredictionBalancedReservoir", "SupportSets", "UPDATE_SETS", "adapt_none", "adapt_note", "adapt_sar",
    "adapt_shot", "adapt_t3a", "adapt_tent", "batch_count", "entropy_margin", "run_periodic_adaptation",
]
