"""Accuracy charts: static SVGs plus Vega-Lite specs for epsilon sweeps and training curves."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union
from xml.sax.saxutils import escape

import altair as alt
import pandas as pd

from m2at.schemas.records import CurvePoint, SweepPoint

Point = Union[SweepPoint, CurvePoint]

WIDTH, HEIGHT = 800, 500
LEFT, RIGHT, TOP, BOTTOM = 70, 190, 50, 60
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]


def _fmt(value: float) -> str:
    return f"{value:g}"


def _domain(values: Sequence[float]) -> Tuple[float, float]:
    low, high = min(values), max(values)
    if low == high:
        return low - 1.0, high + 1.0
    return low, high


def _ticks(values: Sequence[float], limit: int = 11) -> List[float]:
    ordered = sorted(set(values))
    if len(ordered) <= limit:
        return ordered
    step = -(-len(ordered) // (limit - 1))
    return ordered[::step]


def svg_line_chart(
    points: Sequence[Point], title: str, x: str = "epsilon", x_label: str = "epsilon (1/255)"
) -> str:
    """Accuracy (y, [0, 1]) against the ``x`` field of each point; one polyline per series/attack."""
    if not points:
        raise ValueError("no points to plot")

    def px(p: Point) -> float:
        return float(getattr(p, x))

    x_low, x_high = _domain([px(p) for p in points])
    plot_w, plot_h = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def sx(value: float) -> float:
        return LEFT + (value - x_low) / (x_high - x_low) * plot_w

    def sy(y: float) -> float:
        return TOP + (1.0 - y) * plot_h

    groups: Dict[str, List[Point]] = {}
    multi_series = len({p.series for p in points}) > 1
    for p in points:
        name = f"{p.series} {p.attack}" if multi_series else p.attack
        groups.setdefault(name, []).append(p)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="{TOP / 2 + 6:.1f}" text-anchor="middle" font-family="sans-serif" font-size="16">{escape(title)}</text>',
        f'<line x1="{LEFT}" y1="{TOP + plot_h}" x2="{LEFT + plot_w}" y2="{TOP + plot_h}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + plot_h}" stroke="black"/>',
    ]
    for i in range(6):
        y = i / 5
        parts.append(f'<line x1="{LEFT - 5}" y1="{sy(y):.1f}" x2="{LEFT}" y2="{sy(y):.1f}" stroke="black"/>')
        parts.append(
            f'<text x="{LEFT - 8}" y="{sy(y) + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="12">{y:.1f}</text>'
        )
    for tick in _ticks([px(p) for p in points]):
        parts.append(f'<line x1="{sx(tick):.1f}" y1="{TOP + plot_h}" x2="{sx(tick):.1f}" y2="{TOP + plot_h + 5}" stroke="black"/>')
        parts.append(
            f'<text x="{sx(tick):.1f}" y="{TOP + plot_h + 20}" text-anchor="middle" font-family="sans-serif" font-size="12">{_fmt(tick)}</text>'
        )
    parts.append(
        f'<text x="{LEFT + plot_w / 2:.1f}" y="{HEIGHT - 15}" text-anchor="middle" font-family="sans-serif" font-size="14">{escape(x_label)}</text>'
    )
    parts.append(
        f'<text x="18" y="{TOP + plot_h / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="14" '
        f'transform="rotate(-90 18 {TOP + plot_h / 2:.1f})">accuracy</text>'
    )
    for index, (name, series) in enumerate(groups.items()):
        color = PALETTE[index % len(PALETTE)]
        ordered = sorted(series, key=px)
        coords = " ".join(f"{sx(px(p)):.1f},{sy(p.accuracy):.1f}" for p in ordered)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for p in ordered:
            parts.append(f'<circle cx="{sx(px(p)):.1f}" cy="{sy(p.accuracy):.1f}" r="3" fill="{color}"/>')
        legend_y = TOP + 10 + 20 * index
        legend_x = LEFT + plot_w + 20
        parts.append(f'<line x1="{legend_x}" y1="{legend_y}" x2="{legend_x + 20}" y2="{legend_y}" stroke="{color}" stroke-width="2"/>')
        parts.append(
            f'<text x="{legend_x + 26}" y="{legend_y + 4}" font-family="sans-serif" font-size="12">{escape(name)}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_sweep_svgs(points: Sequence[SweepPoint], out_dir: Path) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for alpha in sorted({p.alpha for p in points}):
        panel = [p for p in points if p.alpha == alpha]
        path = out_dir / f"sweep_alpha{_fmt(alpha)}.svg"
        path.write_text(svg_line_chart(panel, f"Accuracy vs epsilon (alpha = {_fmt(alpha)}/255)"), encoding="utf-8")
        paths.append(path)
    return paths


def sweep_chart(points: Sequence[SweepPoint]) -> alt.FacetChart:
    df = pd.DataFrame([p.model_dump() for p in points])
    return (
        alt.Chart(df)
        .mark_line(point=True)
        .encode(
            x=alt.X("epsilon:Q", title="epsilon (1/255)"),
            y=alt.Y("accuracy:Q", title="Accuracy", scale=alt.Scale(domain=[0, 1])),
            color=alt.Color("attack:N", title="Attack"),
            strokeDash=alt.StrokeDash("series:N", title="Model"),
            tooltip=["series:N", "attack:N", "epsilon:Q", "alpha:Q", alt.Tooltip("accuracy:Q", format=".3f")],
        )
        .properties(width=240, height=200)
        .facet(column=alt.Column("alpha:O", title="alpha (1/255)"))
    )


def write_sweep_spec(points: Sequence[SweepPoint], out_dir: Path) -> Path:
    path = Path(out_dir) / "sweep.vl.json"
    path.write_text(json.dumps(sweep_chart(points).to_dict(), indent=2), encoding="utf-8")
    return path


def write_curve_svg(points: Sequence[CurvePoint], out_dir: Path, name: str = "curves") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{name}.svg"
    path.write_text(svg_line_chart(points, "Held-out accuracy per epoch", x="epoch", x_label="epoch"), encoding="utf-8")
    return path


def curve_chart(points: Sequence[CurvePoint]) -> alt.Chart:
    df = pd.DataFrame([p.model_dump() for p in points])
    return (
        alt.Chart(df)
        .mark_line(point=True)
        .encode(
            x=alt.X("epoch:Q", title="Epoch"),
            y=alt.Y("accuracy:Q", title="Accuracy", scale=alt.Scale(domain=[0, 1])),
            color=alt.Color("attack:N", title="Attack"),
            strokeDash=alt.StrokeDash("series:N", title="Run"),
            tooltip=["series:N", "attack:N", "epoch:Q", alt.Tooltip("accuracy:Q", format=".3f")],
        )
        .properties(width=480, height=300)
    )


def write_curve_spec(points: Sequence[CurvePoint], out_dir: Path, name: str = "curves") -> Path:
    path = Path(out_dir) / f"{name}.vl.json"
    path.write_text(json.dumps(curve_chart(points).to_dict(), indent=2), encoding="utf-8")
    return path
