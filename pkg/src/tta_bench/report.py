"""Summary CSV and SVG line charts (median line with a min-max band across seeds)."""

from __future__ import annotations

import math
import statistics
from pathlib import Path
from typing import Iterable, Sequence

from .io import atomic_write_text, csv_text
from .svg import Canvas, color_for, fmt

SUMMARY_HEADER = ("scenario", "method", "param", "seed_count", "xi_delta_t", "xi_d_t", "xi_ood", "gain_d_t", "peak_bytes", "cpu_ms")

# scenario -> (descriptor key for the x value, axis title, log2 axis?)
X_AXES = {
    "s1": ("size", "|adaptation set| (log2 scale)", True),
    "s2": ("k", "categories in adaptation set", False),
    "s3": ("k", "domains in adaptation set", False),
    "s4": ("depth", "stacked corruptions", False),
}
TEST_SET_TITLES = {"delta_t": "adaptation set", "d_t": "target domain", "delta_ood": "out-of-distribution set"}
CHART_SETS = {"s1": ("d_t", "delta_t"), "s2": ("d_t", "delta_ood"), "s3": ("d_t", "delta_ood"), "s4": ("d_t",)}


def _num(v, digits: int = 6):
    return None if v is None else f"{v:.{digits}f}"


def summary_csv(rows: Sequence[dict], timing: bool = False) -> str:
    out = []
    for r in rows:
        out.append((
            r["scenario"], r["method"], r["param"], r["seed_count"],
            _num(r["xi_delta_t"]), _num(r["xi_d_t"]), _num(r["xi_delta_ood"]), _num(r["gain_d_t"]),
            None if r["peak_bytes"] is None else int(r["peak_bytes"]),
            _num(r["cpu_ms"], 1) if timing else None,
        ))
    return csv_text(SUMMARY_HEADER, out)


def _get(rec, name):
    return rec[name] if isinstance(rec, dict) else getattr(rec, name)


def series(records: Iterable, scenario: str, test_set: str) -> dict[str, list[tuple[float, float, float, float]]]:
    """method -> sorted [(x, median, min, max)] over successful records."""
    key = X_AXES[scenario][0]
    groups: dict[str, dict[float, list[float]]] = {}
    for r in records:
        if _get(r, "scenario") != scenario or _get(r, "failed"):
            continue
        m = _get(r, "metrics").get(test_set)
        if m is None:
            continue
        x = float(_get(r, "descriptor")[key])
        groups.setdefault(_get(r, "method"), {}).setdefault(x, []).append(m["xi"])
    return {
        method: [(x, statistics.median(v), min(v), max(v)) for x, v in sorted(pts.items())]
        for method, pts in sorted(groups.items())
    }


def chart_svg(records: Sequence, scenario: str, test_set: str = "d_t") -> str:
    data = series(records, scenario, test_set)
    if not data:
        raise ValueError(f"no records for scenario {scenario} / {test_set}")
    _, x_title, log_x = X_AXES[scenario]
    xs = sorted({p[0] for pts in data.values() for p in pts})
    tx = (lambda v: math.log2(v)) if log_x else (lambda v: v)
    lo, hi = tx(xs[0]), tx(xs[-1])
    if hi == lo:
        lo, hi = lo - 1, hi + 1
    w, h = 640, 400
    left, right, top, bottom = 60, 130, 40, 55
    pw, ph = w - left - right, h - top - bottom

    def px(v: float) -> float:
        return left + pw * (tx(v) - lo) / (hi - lo)

    def py(v: float) -> float:
        return top + ph * (1.0 - v)

    c = Canvas(w, h)
    c.text(left + pw / 2, 22, f"Accuracy on the {TEST_SET_TITLES[test_set]} ({scenario})", 14, "middle")
    c.line(left, top, left, top + ph, stroke="black")
    c.line(left, top + ph, left + pw, top + ph, stroke="black")
    for i in range(6):
        v = i / 5
        c.line(left - 4, py(v), left + pw, py(v), stroke="#dddddd" if i else "black")
        c.text(left - 7, py(v) + 4, fmt(v), 10, "end")
    for x in xs:
        c.line(px(x), top + ph, px(x), top + ph + 4, stroke="black")
        c.text(px(x), top + ph + 17, str(int(x)) if float(x).is_integer() else fmt(x), 10, "middle")
    c.text(left + pw / 2, h - 12, x_title, 11, "middle")
    c.text(16, top + ph / 2, "accuracy", 11, "middle", transform=f"rotate(-90 16 {fmt(top + ph / 2)})")
    for i, (method, pts) in enumerate(data.items()):
        col = color_for(method, i)
        if len(pts) > 1:
            band = [(px(x), py(mx)) for x, _, _, mx in pts] + [(px(x), py(mn)) for x, _, mn, _ in reversed(pts)]
            c.polygon(band, fill=col, fill_opacity="0.15", stroke="none")
        else:
            x, _, mn, mx = pts[0]
            c.line(px(x), py(mn), px(x), py(mx), stroke=col, stroke_opacity="0.4", stroke_width="6")
        c.polyline([(px(x), py(med)) for x, med, _, _ in pts], stroke=col, stroke_width="2")
        for x, med, _, _ in pts:
            c.circle(px(x), py(med), 3, fill=col)
        ly = top + 12 + 18 * i
        c.line(left + pw + 15, ly - 4, left + pw + 35, ly - 4, stroke=col, stroke_width="2")
        c.text(left + pw + 40, ly, method, 11)
    return c.render()


def write_report(records: Sequence, out_dir) -> list[Path]:
    """One chart per (scenario, test set) present in the records."""
    if not records:
        raise ValueError("empty record set")
    out_dir = Path(out_dir)
    written = []
    scenarios = sorted({_get(r, "scenario") for r in records})
    for sc in scenarios:
        for ts in CHART_SETS.get(sc, ("d_t",)):
            try:
                svg = chart_svg(records, sc, ts)
            except ValueError:
                continue
            written.append(atomic_write_text(out_dir / f"{sc}_{ts}.svg", svg))
    if not written:
        raise ValueError("no chartable records")
    return written
