"""Static diagnostic plots written as self-contained SVG plus a CSV of the plotted points.

The CSV is the authoritative record of each figure; the SVG is a rendering
of exactly those rows.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
from scipy import special

from .gof import StepCHF, anova_homogeneity, equal_width_groups
from .lowess import lowess

PLOT_KINDS = ("qq", "chf45", "scatter_lowess", "grouped_box", "pvalue_hist")
WIDTH, HEIGHT = 640, 480
_MARGIN = dict(left=70, right=20, top=40, bottom=55)


@dataclass(frozen=True)
class PlotSpec:
    plot_kind: str
    svg_path: Path
    csv_path: Path
    x_source: str | None = None
    k: int = 10
    title: str = ""

    def __post_init__(self):
        if self.plot_kind not in PLOT_KINDS:
            raise ValueError(f"unknown plot kind {self.plot_kind!r}; choose from {PLOT_KINDS}")


def _fmt(v: float) -> str:
    return f"{v:.3g}"


def _nice_ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    return np.arange(start, hi + step * 1e-9, step)


class _Canvas:
    def __init__(self, xlim, ylim, title="", xlabel="", ylabel=""):
        x0, x1 = xlim
        y0, y1 = ylim
        pad_x = (x1 - x0) * 0.04 or 1.0
        pad_y = (y1 - y0) * 0.04 or 1.0
        self.xlim = (x0 - pad_x, x1 + pad_x)
        self.ylim = (y0 - pad_y, y1 + pad_y)
        self.parts: list[str] = []
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel

    def px(self, x):
        a, b = self.xlim
        return _MARGIN["left"] + (np.asarray(x, float) - a) / (b - a) * (WIDTH - _MARGIN["left"] - _MARGIN["right"])

    def py(self, y):
        a, b = self.ylim
        return HEIGHT - _MARGIN["bottom"] - (np.asarray(y, float) - a) / (b - a) * (
            HEIGHT - _MARGIN["top"] - _MARGIN["bottom"])

    def points(self, x, y, r=2.2, color="#1f4e79"):
        for px, py in zip(self.px(x), self.py(y)):
            self.parts.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="{r}" fill="{color}" fill-opacity="0.6"/>')

    def polyline(self, x, y, color="#c0392b", width=2.0, dash=None, step=False):
        x, y = np.asarray(x, float), np.asarray(y, float)
        ok = np.isfinite(x) & np.isfinite(y)
        x, y = x[ok], y[ok]
        if x.size == 0:
            return
        if step:
            x = np.repeat(x, 2)[1:]
            y = np.repeat(y, 2)[:-1]
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(self.px(x), self.py(y)))
        style = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"{style}/>')

    def line(self, x0, y0, x1, y1, **kw):
        self.polyline([x0, x1], [y0, y1], **kw)

    def rect(self, x0, y0, x1, y1, fill="#9ecae1", stroke="#1f4e79"):
        ax, bx = sorted((float(self.px(x0)), float(self.px(x1))))
        ay, by = sorted((float(self.py(y0)), float(self.py(y1))))
        self.parts.append(f'<rect x="{ax:.2f}" y="{ay:.2f}" width="{bx - ax:.2f}" '
                          f'height="{by - ay:.2f}" fill="{fill}" stroke="{stroke}"/>')

    def render(self) -> str:
        left, right = _MARGIN["left"], WIDTH - _MARGIN["right"]
        top, bottom = _MARGIN["top"], HEIGHT - _MARGIN["bottom"]
        out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
               f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
               f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
               f'<rect x="{left}" y="{top}" width="{right - left}" height="{bottom - top}" '
               f'fill="none" stroke="#333"/>']
        for t in _nice_ticks(*self.xlim):
            p = float(self.px(t))
            out.append(f'<line x1="{p:.2f}" y1="{bottom}" x2="{p:.2f}" y2="{bottom + 5}" stroke="#333"/>')
            out.append(f'<text x="{p:.2f}" y="{bottom + 18}" text-anchor="middle">{_fmt(t)}</text>')
        for t in _nice_ticks(*self.ylim):
            p = float(self.py(t))
            out.append(f'<line x1="{left - 5}" y1="{p:.2f}" x2="{left}" y2="{p:.2f}" stroke="#333"/>')
            out.append(f'<text x="{left - 8}" y="{p + 4:.2f}" text-anchor="end">{_fmt(t)}</text>')
        out.append(f'<clipPath id="plotarea"><rect x="{left}" y="{top}" width="{right - left}" '
                   f'height="{bottom - top}"/></clipPath><g clip-path="url(#plotarea)">')
        out.extend(self.parts)
        out.append("</g>")
        out.append(f'<text x="{WIDTH / 2}" y="24" text-anchor="middle" font-size="14">{escape(self.title)}</text>')
        out.append(f'<text x="{(left + right) / 2}" y="{HEIGHT - 12}" text-anchor="middle">{escape(self.xlabel)}</text>')
        out.append(f'<text x="18" y="{(top + bottom) / 2}" text-anchor="middle" '
                   f'transform="rotate(-90 18 {(top + bottom) / 2})">{escape(self.ylabel)}</text>')
        out.append("</svg>\n")
        return "\n".join(out)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _write_svg(path: Path, canvas: _Canvas) -> None:
    try:
        Path(path).write_text(canvas.render(), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write plot to {path}: {exc}") from exc


def _finite_range(*arrays):
    vals = np.concatenate([np.asarray(a, float).ravel() for a in arrays])
    vals = vals[np.isfinite(vals)]
    return (float(vals.min()), float(vals.max())) if vals.size else (0.0, 1.0)


# ---------------------------------------------------------------------------


def qq_points(values) -> tuple[np.ndarray, np.ndarray]:
    """Blom normal scores against sorted sample values."""
    y = np.sort(np.asarray(values, float))
    n = y.size
    theo = special.ndtri((np.arange(1, n + 1) - 0.375) / (n + 0.25))
    return theo, y


def render_qq(spec: PlotSpec, values) -> list[tuple[float, float]]:
    theo, y = qq_points(values)
    rows = list(zip(theo.tolist(), y.tolist()))
    _write_csv(spec.csv_path, ["theoretical", "sample"], rows)
    lo, hi = _finite_range(theo, y)
    c = _Canvas((lo, hi), (lo, hi), spec.title or "Normal QQ plot", "theoretical quantile", "residual")
    c.line(lo, lo, hi, hi, color="#888", width=1.5, dash="6,4")
    c.points(theo, y)
    _write_svg(spec.svg_path, c)
    return rows


def render_chf45(spec: PlotSpec, chf: StepCHF) -> list[tuple[float, float]]:
    rows = chf.pairs()
    _write_csv(spec.csv_path, ["residual", "cumulative_hazard"], rows)
    x, h = chf.x, chf.chf
    lo, hi = _finite_range(np.r_[0.0, x], np.r_[0.0, h])
    c = _Canvas((0.0, hi), (0.0, hi), spec.title or "Cumulative hazard of Cox-Snell residuals",
                "Cox-Snell residual", "estimated cumulative hazard")
    c.line(0.0, 0.0, hi, hi, color="#888", width=1.5, dash="6,4")
    c.polyline(np.r_[0.0, x], np.r_[0.0, h], color="#1f4e79", step=True)
    _write_svg(spec.svg_path, c)
    return rows


def render_scatter_lowess(spec: PlotSpec, x, y, span: float = 2.0 / 3.0,
                          iterations: int = 3, xlabel: str = "") -> list[tuple[float, float, float]]:
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    order = np.argsort(x, kind="stable")
    xs, smooth = lowess(x, y, span, iterations)
    rows = list(zip(xs.tolist(), y[order].tolist(), smooth.tolist()))
    _write_csv(spec.csv_path, ["x", "residual", "lowess"], rows)
    c = _Canvas(_finite_range(x), _finite_range(y, smooth), spec.title or "Residuals with LOWESS",
                xlabel or (spec.x_source or "x"), "residual")
    c.points(x, y)
    c.line(xs[0], 0.0, xs[-1], 0.0, color="#888", width=1.5, dash="6,4")
    c.polyline(xs, smooth)
    _write_svg(spec.svg_path, c)
    return rows


def box_summaries(x, y, k: int = 10) -> list[dict]:
    """Five-number summaries of ``y`` in equal-width bins of ``x``; empty bins omitted."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    groups, edges = equal_width_groups(x, k)
    out = []
    for gi in range(k):
        vals = y[groups == gi]
        if vals.size == 0:
            continue
        q = np.quantile(vals, [0.0, 0.25, 0.5, 0.75, 1.0])
        out.append({"group": gi + 1, "lower_edge": float(edges[gi]), "upper_edge": float(edges[gi + 1]),
                    "count": int(vals.size), "min": q[0], "q1": q[1], "median": q[2],
                    "q3": q[3], "max": q[4]})
    return out


def render_grouped_box(spec: PlotSpec, x, y, xlabel: str = "") -> list[dict]:
    boxes = box_summaries(x, y, spec.k)
    cols = ["group", "lower_edge", "upper_edge", "count", "min", "q1", "median", "q3", "max"]
    _write_csv(spec.csv_path, cols, ([b[c] for c in cols] for b in boxes))
    p = anova_homogeneity(np.asarray(y, float), np.asarray(x, float), spec.k).p_value
    edges_lo = boxes[0]["lower_edge"]
    edges_hi = boxes[-1]["upper_edge"]
    c = _Canvas((edges_lo, edges_hi), _finite_range(y),
                spec.title or f"Grouped residuals (ANOVA p = {p:.3g})",
                xlabel or (spec.x_source or "x"), "residual")
    for b in boxes:
        a, e = b["lower_edge"], b["upper_edge"]
        mid, half = (a + e) / 2, (e - a) * 0.35
        c.line(mid, b["min"], mid, b["q1"], color="#1f4e79", width=1.2)
        c.line(mid, b["q3"], mid, b["max"], color="#1f4e79", width=1.2)
        c.rect(mid - half, b["q1"], mid + half, b["q3"])
        c.line(mid - half, b["median"], mid + half, b["median"], color="#c0392b", width=2.0)
    c.line(edges_lo, 0.0, edges_hi, 0.0, color="#888", width=1.0, dash="6,4")
    _write_svg(spec.svg_path, c)
    return boxes


def render_pvalue_hist(spec: PlotSpec, p_values, p_min: float, bins: int = 20,
                       test_name: str = "") -> list[tuple[float, float, int]]:
    p = np.asarray(p_values, float)
    counts, edges = np.histogram(p, bins=bins, range=(0.0, 1.0))
    rows = [(float(edges[i]), float(edges[i + 1]), int(counts[i]), float(p_min)) for i in range(bins)]
    _write_csv(spec.csv_path, ["bin_left", "bin_right", "count", "p_min"], rows)
    c = _Canvas((0.0, 1.0), (0.0, float(max(counts.max(), 1))),
                spec.title or f"{test_name} replicated p-values (p_min = {p_min:.3g})",
                "p-value", "count")
    for lo, hi, n, _ in rows:
        if n:
            c.rect(lo, 0.0, hi, n)
    c.line(p_min, 0.0, p_min, float(max(counts.max(), 1)), color="#d62728", width=2.0)
    _write_svg(spec.svg_path, c)
    return rows
