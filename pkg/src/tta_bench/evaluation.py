"""Frozen-model evaluation, relative gains, batch traces and the median-of-seeds grid."""

from __future__ import annotations

import hashlib
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import ops
from .data import AdaptationSet, LabeledDataset, sealed_labels
from .methods import AdaptConfig, AdaptationOutcome, run_periodic_adaptation
from .model import Model
from .scenarios import ScenarioSplit
from .tensor import allocator_scope

log = logging.getLogger(__name__)

RECORD_SCHEMA_VERSION = 1
TEST_SETS = ("delta_t", "d_t", "delta_ood")
LOW_CONFIDENCE_N = 256
DEFAULT_SEEDS = (1, 2, 3, 4, 5)


class UndefinedGainError(ZeroDivisionError):
    pass


@dataclass(frozen=True)
class Metric:
    xi: float
    test_set_id: str
    n: int
    correct: int
    mean_entropy: float | None = None

    @property
    def low_confidence(self) -> bool:
        return self.n < LOW_CONFIDENCE_N


def _images_labels(test) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(test, AdaptationSet):
        return test.images, sealed_labels(test)
    if isinstance(test, LabeledDataset):
        return test.images, test.labels
    raise TypeError(f"cannot evaluate on {type(test).__name__}")


def accuracy(model: Model, test, test_set_id: str = "d_t", batch_size: int = 500) -> Metric:
    """Exact top-1 accuracy of the frozen model."""
    images, labels = _images_labels(test)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    logits = model.predict_logits(images, batch_size)
    correct = int((logits.argmax(axis=1) == labels).sum())
    ent = float(ops.entropy_per_sample(logits).mean())
    return Metric(correct / len(labels), test_set_id, len(labels), correct, ent)


def relative_gain(xi_adapted: float, xi_source: float) -> float:
    if xi_source <= 0:
        raise UndefinedGainError("relative gain is undefined for zero source accuracy")
    return xi_adapted / xi_source


def ols_slope(values: Sequence[float]) -> float | None:
    """Least-squares slope of values against their index; None for fewer than two points."""
    if len(values) < 2:
        return None
    y = np.asarray(values, dtype=np.float64)
    x = np.arange(len(y), dtype=np.float64)
    xc = x - x.mean()
    return float((xc * (y - y.mean())).sum() / (xc * xc).sum())


@dataclass
class Trace:
    accuracies: list[float]
    slope: float | None


def _trace_recorder(delta_t: AdaptationSet) -> tuple[list[float], Callable[[Model, np.ndarray], None]]:
    labels = sealed_labels(delta_t)
    images = delta_t.images
    accs: list[float] = []

    def record(current: Model, pos: np.ndarray) -> None:
        preds = current.predict_logits(images[pos]).argmax(axis=1)
        accs.append(float((preds == labels[pos]).mean()))

    return accs, record


def batch_trace(method: str, model: Model, split: ScenarioSplit, cfg: AdaptConfig, storage_dir=None) -> tuple[Trace, AdaptationOutcome]:
    """Accuracy of the current (post-update, frozen-evaluated) model on each batch just adapted on."""
    accs, record = _trace_recorder(split.delta_t)
    outcome = run_periodic_adaptation(method, model, split, cfg, storage_dir, on_batch=record)
    return Trace(accs, ols_slope(accs)), outcome


# --- experiment records -----------------------------------------------------------------

def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()).hexdigest()[:16]


@dataclass
class ExperimentRecord:
    scenario: str
    param: str
    method: str
    seed: int
    descriptor: dict
    cfg_digest: str
    metrics: dict[str, dict]
    source_metrics: dict[str, dict]
    gains: dict[str, float | None]
    resources: dict[str, float]
    dataset_digest: str
    source_model_digest: str
    adapted_model_digest: str
    failed: bool = False
    error: str | None = None
    trace: dict | None = None
    schema_version: int = RECORD_SCHEMA_VERSION

    def xi(self, test_set: str) -> float | None:
        m = self.metrics.get(test_set)
        return None if m is None else m["xi"]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentRecord":
        return cls(**d)


@dataclass
class Cell:
    """One grid cell: a scenario construction parameterized by the repetition seed."""

    scenario: str
    param: str
    build: Callable[[int], ScenarioSplit]


def _test_sets(split: ScenarioSplit) -> dict[str, object]:
    sets: dict[str, object] = {"delta_t": split.delta_t, "d_t": split.d_t}
    if split.delta_ood is not None and len(split.delta_ood):
        sets["delta_ood"] = split.delta_ood
    return sets


def _metric_dict(m: Metric) -> dict:
    return {"xi": m.xi, "n": m.n, "correct": m.correct, "mean_entropy": m.mean_entropy, "low_confidence": m.low_confidence}


class _SourceCache:
    def __init__(self, model: Model) -> None:
        self.model = model
        self.digest = model.digest()
        self._cache: dict[tuple[str, str], Metric] = {}

    def __call__(self, name: str, test) -> Metric:
        key = (name, test.digest())
        if key not in self._cache:
            self._cache[key] = accuracy(self.model, test, name)
        return self._cache[key]


def run_cell(
    cell: Cell,
    method: str,
    seed: int,
    model: Model,
    cfg: AdaptConfig,
    storage_dir,
    source: _SourceCache | None = None,
    cfg_digest: str | None = None,
    split: ScenarioSplit | None = None,
    trace: bool = True,
) -> ExperimentRecord:
    source = source or _SourceCache(model)
    split = split or cell.build(seed)
    run_cfg = AdaptConfig.from_dict({**cfg.to_dict(), "seed": seed})
    accs, record = _trace_recorder(split.delta_t) if trace else (None, None)
    t_wall, t_cpu = time.perf_counter(), time.process_time()
    with allocator_scope() as alloc:
        outcome = run_periodic_adaptation(method, model, split, run_cfg, storage_dir, on_batch=record)
        peak = alloc.peak_bytes
    cpu_ms = (time.process_time() - t_cpu) * 1e3
    wall_ms = (time.perf_counter() - t_wall) * 1e3
    metrics, src, gains = {}, {}, {}
    for name, test in _test_sets(split).items():
        m = accuracy(outcome.model, test, name)
        s = source(name, test)
        metrics[name], src[name] = _metric_dict(m), _metric_dict(s)
        gains[name] = relative_gain(m.xi, s.xi) if s.xi > 0 else None
    return ExperimentRecord(
        scenario=cell.scenario, param=cell.param, method=method, seed=seed,
        descriptor=split.descriptor, cfg_digest=cfg_digest or config_digest(run_cfg.to_dict()),
        metrics=metrics, source_metrics=src, gains=gains,
        resources={"peak_bytes": peak, "cpu_ms": cpu_ms, "wall_ms": wall_ms},
        dataset_digest=split.d_t.digest(), source_model_digest=source.digest,
        adapted_model_digest=outcome.digest, failed=outcome.failed, error=outcome.error,
        trace=None if accs is None else {"accuracies": accs, "slope": ols_slope(accs)},
    )


def run_grid(
    cells: Iterable[Cell],
    methods: Sequence[str],
    model: Model,
    cfg: AdaptConfig,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    storage_dir=None,
    sink: Callable[[ExperimentRecord], None] | None = None,
    cfg_digest: str | None = None,
    trace: bool = True,
) -> tuple[list[ExperimentRecord], list[dict]]:
    """Run every (cell, method, seed); return records and per-(cell, method) median summaries."""
    import tempfile

    storage_dir = Path(storage_dir or tempfile.mkdtemp(prefix="tta-grid-"))
    source = _SourceCache(model)
    records: list[ExperimentRecord] = []
    for cell in cells:
        for seed in seeds:
            split = cell.build(seed)
            for method in methods:
                rec = run_cell(cell, method, seed, model, cfg, storage_dir, source, cfg_digest, split, trace)
                log.info("%s %s %s seed=%d xi_d_t=%.4f", cell.scenario, cell.param, method, seed, rec.xi("d_t"))
                records.append(rec)
                if sink is not None:
                    sink(rec)
    return records, summarize(records)


def _median(values: list[float]) -> float | None:
    return statistics.median(values) if values else None


def summarize(records: Iterable[ExperimentRecord]) -> list[dict]:
    """Median (and min/max) per metric for each (scenario, param, method); order independent."""
    groups: dict[tuple[str, str, str], list[ExperimentRecord]] = {}
    for r in records:
        groups.setdefault((r.scenario, r.param, r.method), []).append(r)
    rows = []
    for key in sorted(groups, key=_summary_sort_key):
        recs = sorted(groups[key], key=lambda r: r.seed)
        ok = [r for r in recs if not r.failed]
        row = {"scenario": key[0], "param": key[1], "method": key[2], "seed_count": len(ok), "failed_count": len(recs) - len(ok)}
        for name in TEST_SETS:
            vals = [r.metrics[name]["xi"] for r in ok if name in r.metrics]
            row[f"xi_{name}"] = _median(vals)
            row[f"xi_{name}_min"] = min(vals) if vals else None
            row[f"xi_{name}_max"] = max(vals) if vals else None
            gains = [r.gains[name] for r in ok if r.gains.get(name) is not None]
            row[f"gain_{name}"] = _median(gains)
        row["peak_bytes"] = _median([r.resources["peak_bytes"] for r in ok])
        row["cpu_ms"] = _median([r.resources["cpu_ms"] for r in ok])
        rows.append(row)
    return rows


def _summary_sort_key(key: tuple[str, str, str]):
    scenario, param, method = key
    try:
        p: tuple = (0, float(param), "")
    except ValueError:
        p = (1, 0.0, param)
    return (scenario, p, method)
