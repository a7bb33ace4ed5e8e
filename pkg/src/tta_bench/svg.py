"""Minimal deterministic SVG writer (fixed float formatting, insertion-ordered elements)."""

from __future__ import annotations

from dataclasses import dataclass, field
from xml.sax.saxutils import escape, quoteattr

# one fixed color per method id so charts stay comparable across runs
METHOD_COLORS = {
    "none": "#555555",
    "tent": "#1f77b4",
    "sar": "#d62728",
    "shot": "#2ca02c",
    "note": "#9467bd",
    "t3a": "#ff7f0e",
}
FALLBACK_COLORS = ("#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f")


def color_for(method: str, index: int = 0) -> str:
    return METHOD_COLORS.get(method, FALLBACK_COLORS[index % len(FALLBACK_COLORS)])


def fmt(v: float) -> str:
    s = f"{v:.2f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def _attrs(attrs: dict) -> str:
    return "".join(f" {k.replace('_', '-')}={quoteattr(str(v))}" for k, v in attrs.items() if v is not None)


@dataclass
class Canvas:
    width: int
    height: int
    elements: list[str] = field(default_factory=list)

    def rect(self, x: float, y: float, w: float, h: float, **attrs) -> None:
        self.elements.append(f"<rect x=\"{fmt(x)}\" y=\"{fmt(y)}\" width=\"{fmt(w)}\" height=\"{fmt(h)}\"{_attrs(attrs)}/>")

    def line(self, x1: float, y1: float, x2: float, y2: float, **attrs) -> None:
        self.elements.append(f"<line x1=\"{fmt(x1)}\" y1=\"{fmt(y1)}\" x2=\"{fmt(x2)}\" y2=\"{fmt(y2)}\"{_attrs(attrs)}/>")

    def polyline(self, points, **attrs) -> None:
        pts = " ".join(f"{fmt(x)},{fmt(y)}" for x, y in points)
        self.elements.append(f"<polyline points=\"{pts}\" fill=\"none\"{_attrs(attrs)}/>")

    def polygon(self, points, **attrs) -> None:
        pts = " ".join(f"{fmt(x)},{fmt(y)}" for x, y in points)
        self.elements.append(f"<polygon points=\"{pts}\"{_attrs(attrs)}/>")

    def circle(self, x: float, y: float, r: float, **attrs) -> None:
        self.elements.append(f"<circle cx=\"{fmt(x)}\" cy=\"{fmt(y)}\" r=\"{fmt(r)}\"{_attrs(attrs)}/>")

    def text(self, x: float, y: float, content: str, size: int = 11, anchor: str = "start", **attrs) -> None:
        self.elements.append(
            f"<text x=\"{fmt(x)}\" y=\"{fmt(y)}\" font-size=\"{size}\" text-anchor=\"{anchor}\""
            f" font-family=\"sans-serif\"{_attrs(attrs)}>{escape(content)}</text>"
        )

    def render(self) -> str:
        head = (
            f"<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{self.width}\" height=\"{self.height}\""
            f" viewBox=\"0 0 {self.width} {self.height}\">"
        )
        body = "\n".join(["  " + e for e in [f"<rect width=\"{self.width}\" height=\"{self.height}\" fill=\"white\"/>"] + self.elements])
        return f"{head}\n{body}\n</svg>\n"
