"""Nested-loop plot data and a minimal SVG renderer.

Scenarios are laid out left to right in the grid's nested-loop order (the
scenario id order).  Under the performance curves, one step trace per design
factor shows which level each scenario uses, outermost factor on top.
"""
from __future__ import annotations

import csv
import math
from typing import Sequence
from xml.sax.saxutils import escape

from .metrics import PerformanceSummary
from .simengine import (AC_MEAN_LEVELS, COEF_LEVELS, CORRELATION_LEVELS, METHODS, N_AC_LEVELS,
                        Scenario, build_grid)

METRICS = {
    "bias": "bias",
    "vr": "variability_ratio",
    "coverage": "coverage",
    "ese": "ese",
    "mse": "mse",
}
METRIC_TITLES = {
    "bias": "Bias", "vr": "Variability ratio", "coverage": "Empirical coverage (95% CI)",
    "ese": "Empirical standard error", "mse": "Mean square error",
}
COVERAGE_BAND = (0.9365, 0.9635)
FACTORS = (
    ("n_ac", "N (AC)", N_AC_LEVELS),
    ("prognostic_coef", "prognostic", COEF_LEVELS),
    ("interaction_coef", "interaction", COEF_LEVELS),
    ("correlation", "correlation", CORRELATION_LEVELS),
    ("ac_covariate_mean", "AC mean", AC_MEAN_LEVELS),
)
COLORS = {"maic": "#1b7837", "stc": "#2166ac", "bucher": "#b2182b"}


def _level_index(levels, value):
    return min(range(len(levels)), key=lambda i: abs(levels[i] - value))


def nested_loop_data(summaries: Sequence[PerformanceSummary], metric: str,
                     grid: Sequence[Scenario] | None = None):
    """Table of plot rows in nested-loop order.

    Returns ``(header, rows)``: one row per scenario with its position, id,
    the level index of every factor, and the metric for every method present.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {sorted(METRICS)}")
    attr = METRICS[metric]
    by_id = {s.id: s for s in (grid if grid is not None else build_grid())}
    values: dict[int, dict[str, float]] = {}
    for s in summaries:
        if s.scenario_id not in by_id:
            raise ValueError(f"scenario {s.scenario_id} is not in the grid")
        values.setdefault(s.scenario_id, {})[s.method] = getattr(s, attr)
    methods = [m for m in METHODS if any(m in v for v in values.values())]
    header = ["position", "scenario_id"] + [f[0] for f in FACTORS] + methods
    rows = []
    for pos, sid in enumerate(sorted(values), start=1):
        sc = by_id[sid]
        levels = [_level_index(lv, getattr(sc, name)) for name, _, lv in FACTORS]
        rows.append([pos, sid] + levels + [values[sid].get(m, math.nan) for m in methods])
    return header, rows


def write_plot_csv(header, rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])


def _step_points(xs, ys):
    pts = []
    for i, (x, y) in enumerate(zip(xs, ys)):
        pts.append((x - 0.5, y))
        pts.append((x + 0.5, y))
    return pts


def render_svg(header, rows, metric: str, width: int = 1000, height: int = 620) -> str:
    """Line chart of the metric per method with factor step traces below."""
    methods = header[2 + len(FACTORS):]
    n = len(rows)
    vals = [r[2 + len(FACTORS) + k] for r in rows for k in range(len(methods))]
    vals = [v for v in vals if isinstance(v, float) and math.isfinite(v)]
    refs = {"bias": [0.0], "vr": [1.0], "coverage": [0.95, *COVERAGE_BAND]}.get(metric, [])
    lo = min(vals + refs) if vals else 0.0
    hi = max(vals + refs) if vals else 1.0
    if hi == lo:
        hi, lo = hi + 1, lo - 1
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad

    left, right, top = 70, 130, 40
    plot_h = 0.62 * (height - top)
    trace_top = top + plot_h + 20
    trace_h = (height - trace_top - 20) / len(FACTORS)

    def sx(x):
        return left + (x - 0.5) / max(n, 1) * (width - left - right)

    def sy(y):
        return top + (hi - y) / (hi - lo) * plot_h

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           '<rect width="100%" height="100%" fill="white"/>',
           f'<text x="{left}" y="22" font-size="15">{escape(METRIC_TITLES[metric])}</text>',
           f'<rect x="{left}" y="{top}" width="{width - left - right}" height="{plot_h:.1f}" '
           'fill="none" stroke="#444"/>']
    if metric == "coverage":
        y0, y1 = sy(COVERAGE_BAND[1]), sy(COVERAGE_BAND[0])
        out.append(f'<rect x="{left}" y="{y0:.2f}" width="{width - left - right}" '
                   f'height="{y1 - y0:.2f}" fill="#dddddd" class="reference-band"/>')
    for ref in refs[:1]:
        out.append(f'<line x1="{left}" x2="{width - right}" y1="{sy(ref):.2f}" '
                   f'y2="{sy(ref):.2f}" stroke="#888" stroke-dasharray="4 3"/>')
    for k in range(5):
        v = lo + (hi - lo) * k / 4
        out.append(f'<text x="{left - 6}" y="{sy(v) + 4:.1f}" text-anchor="end">{v:.3g}</text>')

    xs = [r[0] for r in rows]
    for k, m in enumerate(methods):
        ys = [r[2 + len(FACTORS) + k] for r in rows]
        pts = [(sx(x), sy(y)) for x, y in _step_points(xs, ys) if math.isfinite(y)]
        path = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        out.append(f'<polyline class="series" data-method="{m}" points="{path}" fill="none" '
                   f'stroke="{COLORS.get(m, "#000")}" stroke-width="1.4"/>')
        ly = top + 14 + 16 * k
        out.append(f'<line x1="{width - right + 10}" x2="{width - right + 30}" y1="{ly - 4}" '
                   f'y2="{ly - 4}" stroke="{COLORS.get(m, "#000")}" stroke-width="2"/>')
        out.append(f'<text x="{width - right + 34}" y="{ly}">{escape(m.upper())}</text>')

    for f, (name, label, levels) in enumerate(FACTORS):
        base = trace_top + f * trace_h
        ys = [r[2 + f] for r in rows]
        nlev = max(len(levels) - 1, 1)
        pts = [(sx(x), base + trace_h * 0.8 * (1 - y / nlev)) for x, y in _step_points(xs, ys)]
        path = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        out.append(f'<polyline class="factor" data-factor="{name}" points="{path}" '
                   'fill="none" stroke="#555"/>')
        out.append(f'<text x="{width - right + 10}" y="{base + trace_h * 0.5:.1f}">'
                   f'{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
