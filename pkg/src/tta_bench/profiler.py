"""Peak-memory and CPU-time profiling of adaptation runs against the no-adaptation baseline."""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

from .io import atomic_write_text, csv_text
from .methods import AdaptConfig, run_periodic_adaptation
from .model import Model, deserialize, serialize
from .scenarios import ScenarioSplit
from .svg import Canvas, color_for, fmt
from .tensor import allocator_scope

BASELINE = "none"
PROFILE_HEADER = ("method", "peak_bytes", "relative_peak", "cpu_ms", "wall_ms")

try:
    import resource
except ImportError:  # pragma: no cover - non-POSIX
    resource = None


def _rss_peak_bytes() -> int | None:
    # process-lifetime high-water mark, so only meaningful for the first/largest run
    if resource is None:
        return None
    return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss) * 1024


@dataclass(frozen=True)
class ResourceReport:
    method: str
    peak_bytes: int
    cpu_time_ms: float
    wall_ms: float
    rss_peak_bytes: int | None = None
    relative_peak: float | None = None
    failed: bool = False

    @property
    def cpu_percent(self) -> float:
        return 100.0 * self.cpu_time_ms / self.wall_ms if self.wall_ms > 0 else 0.0


def profile_run(method: str, model: Model, split: ScenarioSplit, cfg: AdaptConfig, storage_dir=None):
    """Load the model from bytes and adapt under a fresh allocator; return (adapted model, report)."""
    blob = serialize(model)
    t_wall, t_cpu = time.perf_counter(), time.process_time()
    with allocator_scope() as alloc:
        loaded = deserialize(blob)
        outcome = run_periodic_adaptation(method, loaded, split, cfg, storage_dir)
        del loaded
        peak = alloc.peak_bytes
    cpu_ms = (time.process_time() - t_cpu) * 1e3
    wall_ms = (time.perf_counter() - t_wall) * 1e3
    report = ResourceReport(method, peak, cpu_ms, wall_ms, _rss_peak_bytes(), failed=outcome.failed)
    return outcome.model, report


def with_relative_peaks(reports: Sequence[ResourceReport], baseline: ResourceReport | None = None) -> list[ResourceReport]:
    if baseline is None:
        baseline = next((r for r in reports if r.method == BASELINE), None)
    if baseline is None:
        raise ValueError("relative peaks need a 'none' baseline report")
    return [replace(r, relative_peak=r.peak_bytes / baseline.peak_bytes) for r in reports]


def profile_methods(methods: Sequence[str], model: Model, split: ScenarioSplit, cfg: AdaptConfig, storage_dir=None) -> list[ResourceReport]:
    """Profile each method sequentially; the baseline is always measured, but reported only if requested."""
    order = list(dict.fromkeys(methods))
    baseline = None
    reports = []
    for m in ([BASELINE] if BASELINE not in order else []) + order:
        _, rep = profile_run(m, model, split, cfg, storage_dir)
        if m == BASELINE:
            baseline = rep
        if m in order:
            reports.append(rep)
    return with_relative_peaks(reports, baseline)


def profile_csv(reports: Sequence[ResourceReport]) -> str:
    rows = [
        (r.method, r.peak_bytes, f"{r.relative_peak:.6f}" if r.relative_peak is not None else None, f"{r.cpu_time_ms:.1f}", f"{r.wall_ms:.1f}")
        for r in sorted(reports, key=lambda r: r.method)
    ]
    return csv_text(PROFILE_HEADER, rows)


def profile_svg(reports: Sequence[ResourceReport]) -> str:
    reports = sorted(reports, key=lambda r: r.method)
    if not reports:
        raise ValueError("no profile reports")
    w, h = 520, 320
    left, right, top, bottom = 70, 20, 40, 50
    c = Canvas(w, h)
    c.text(w / 2, 22, "Peak memory during adaptation", 14, "middle")
    top_mb = max(r.peak_bytes for r in reports) / 2**20 * 1.15 or 1.0
    plot_h = h - top - bottom
    slot = (w - left - right) / len(reports)
    c.line(left, top, left, h - bottom, stroke="black")
    c.line(left, h - bottom, w - right, h - bottom, stroke="black")
    for i in range(5):
        v = top_mb * i / 4
        y = h - bottom - plot_h * i / 4
        c.line(left - 4, y, left, y, stroke="black")
        c.text(left - 6, y + 4, fmt(v), 10, "end")
    c.text(16, top + plot_h / 2, "peak MiB", 11, "middle", transform=f"rotate(-90 16 {fmt(top + plot_h / 2)})")
    for i, r in enumerate(reports):
        mb = r.peak_bytes / 2**20
        bh = plot_h * mb / top_mb
        x = left + slot * i + slot * 0.15
        c.rect(x, h - bottom - bh, slot * 0.7, bh, fill=color_for(r.method, i))
        label = f"{r.relative_peak:.2f}x" if r.relative_peak is not None else ""
        c.text(x + slot * 0.35, h - bottom - bh - 4, label, 10, "middle")
        c.text(x + slot * 0.35, h - bottom + 16, r.method, 11, "middle")
    return c.render()


def emit_profile_table(reports: Sequence[ResourceReport], out_dir) -> tuple[Path, Path]:
    if not reports:
        raise ValueError("no profile reports")
    out_dir = Path(out_dir)
    csv_path = atomic_write_text(out_dir / "profile.csv", profile_csv(reports))
    svg_path = atomic_write_text(out_dir / "profile.svg", profile_svg(reports))
    extra = [dict(asdict(r), cpu_percent=r.cpu_percent, logical_cores=os.cpu_count()) for r in sorted(reports, key=lambda r: r.method)]
    atomic_write_text(out_dir / "profile.json", json.dumps(extra, indent=2, sort_keys=True) + "\n")
    return csv_path, svg_path
