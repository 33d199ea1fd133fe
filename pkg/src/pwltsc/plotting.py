"""Standalone SVG line charts for learning curves (no rendering dependencies)."""

from __future__ import annotations

import csv
import math
import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Dict, List, Sequence

from .errors import DataError

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]

# output file stem -> (curve column, axis label)
FIGURES = {
    "waiting_time": ("AVE", "average waiting time"),
    "reward": ("global_reward", "global reward"),
    "stability": ("STA", "waiting-time variance"),
}


def read_curve(path, required: Sequence[str]) -> Dict[str, List[float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: no rows")
    out = {c: [] for c in header}
    for r, row in enumerate(rows, start=2):
        for c in header:
            try:
                out[c].append(float(row[c]))
            except (TypeError, ValueError):
                raise DataError(f"{path}: row {r}, column {c}: not a number") from None
    return out


def _ticks(lo: float, hi: float, n: int = 5) -> List[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    return [start + k * step for k in range(int((hi - start) / step + 1e-9) + 1)]


def line_chart(series: Dict[str, tuple], title: str, xlabel: str, ylabel: str,
               width: int = 640, height: int = 400) -> str:
    """SVG document for ``{label: (xs, ys)}``; non-finite points are skipped."""
    left, right, top, bottom = 70, 150, 40, 50
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys) if math.isfinite(x) and math.isfinite(y)]
    if not pts:
        raise DataError(f"{title}: nothing to plot")
    x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
    y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + (1 - (y - y0) / (y1 - y0)) * ph

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(width), height=str(height),
                     viewBox=f"0 0 {width} {height}")
    ET.SubElement(svg, "rect", x="0", y="0", width=str(width), height=str(height), fill="white")
    ET.SubElement(svg, "text", x=str(left + pw / 2), y="22", attrib={"text-anchor": "middle", "font-size": "15"}).text = title
    axis = {"stroke": "black", "stroke-width": "1"}
    ET.SubElement(svg, "line", x1=str(left), y1=str(top + ph), x2=str(left + pw), y2=str(top + ph), attrib=axis)
    ET.SubElement(svg, "line", x1=str(left), y1=str(top), x2=str(left), y2=str(top + ph), attrib=axis)
    small = {"font-size": "11"}
    for t in _ticks(x0, x1):
        ET.SubElement(svg, "text", x=f"{sx(t):.1f}", y=str(top + ph + 16), attrib={"text-anchor": "middle", **small}).text = f"{t:g}"
    for t in _ticks(y0, y1):
        ET.SubElement(svg, "text", x=str(left - 6), y=f"{sy(t) + 4:.1f}", attrib={"text-anchor": "end", **small}).text = f"{t:.4g}"
        ET.SubElement(svg, "line", x1=str(left), y1=f"{sy(t):.1f}", x2=str(left + pw), y2=f"{sy(t):.1f}",
                      attrib={"stroke": "#dddddd", "stroke-width": "0.5"})
    ET.SubElement(svg, "text", x=str(left + pw / 2), y=str(height - 10), attrib={"text-anchor": "middle", "font-size": "12"}).text = xlabel
    ET.SubElement(svg, "text", x="16", y=str(top + ph / 2),
                  attrib={"text-anchor": "middle", "font-size": "12", "transform": f"rotate(-90 16 {top + ph / 2})"}).text = ylabel
    for k, (label, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys) if math.isfinite(x) and math.isfinite(y))
        ET.SubElement(svg, "polyline", points=coords, fill="none", stroke=color, attrib={"stroke-width": "1.5"})
        ly = top + 14 + 18 * k
        ET.SubElement(svg, "line", x1=str(left + pw + 10), y1=str(ly), x2=str(left + pw + 30), y2=str(ly), stroke=color,
                      attrib={"stroke-width": "2"})
        ET.SubElement(svg, "text", x=str(left + pw + 34), y=str(ly + 4), attrib=small).text = label
    return '<?xml version="1.0" encoding="UTF-8"?>\n' + ET.tostring(svg, encoding="unicode") + "\n"


def plot_curves(paths: Sequence, out_dir, labels: Sequence[str] = None) -> List[Path]:
    """One SVG per metric, one series per curve file. Returns the written paths."""
    if not paths:
        raise DataError("no curve files given")
    labels = list(labels) if labels else [Path(p).stem for p in paths]
    needed = ["episode"] + [col for col, _ in FIGURES.values()]
    curves = [read_curve(p, needed) for p in paths]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for stem, (col, ylabel) in FIGURES.items():
        series = {lab: (c["episode"], c[col]) for lab, c in zip(labels, curves)}
        path = out_dir / f"{stem}.svg"
        path.write_text(line_chart(series, f"{ylabel} per episode", "episode", ylabel))
        written.append(path)
    return written
