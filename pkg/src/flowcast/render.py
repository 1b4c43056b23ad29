"""Static SVG figures: trajectory sets over the intersection, and training traces.

Output is plain SVG 1.1 text built from fixed-precision numbers, so the same
input always produces the same bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

COLORS = {"prediction": "#d62728", "ground_truth": "#2ca02c", "history": "#555555", "sample": "#d62728"}
ROAD_HALF_WIDTH = 3.0


@dataclass(frozen=True)
class Scene:
    """Intersection layout: a south-north road and an eastbound branch."""

    straight_exit: tuple[float, float] = (0.0, 20.0)
    right_exit: tuple[float, float] = (10.0, 10.0)
    south_end: float = -8.0
    half_width: float = ROAD_HALF_WIDTH

    def road_polygon(self) -> list[tuple[float, float]]:
        w = self.half_width
        x0, top = self.straight_exit[0], self.straight_exit[1] + w
        ry, right = self.right_exit[1], self.right_exit[0] + w
        return [(x0 - w, self.south_end), (x0 + w, self.south_end), (x0 + w, ry - w), (right, ry - w),
                (right, ry + w), (x0 + w, ry + w), (x0 + w, top), (x0 - w, top)]

    @classmethod
    def from_config(cls, config) -> Scene:
        return cls(tuple(config.straight_goal), tuple(config.right_goal), config.start[1] - 1.0)


@dataclass
class Layer:
    label: str
    trajectories: np.ndarray            # (N, T, 2)
    kind: str = "prediction"            # prediction | ground_truth | history
    opacity: float = 1.0
    mark_endpoints: bool = True


@dataclass
class _Canvas:
    lo: np.ndarray
    span: np.ndarray
    width: int = 480
    height: int = 480
    pad: int = 0
    flip_y: bool = True
    parts: list[str] = field(default_factory=list)

    def xy(self, p) -> tuple[float, float]:
        u = (np.asarray(p, dtype=float) - self.lo) / self.span
        x = self.pad + u[0] * (self.width - 2 * self.pad)
        y = self.pad + ((1.0 - u[1]) if self.flip_y else u[1]) * (self.height - 2 * self.pad)
        return x, y

    def points(self, pts) -> str:
        return " ".join("%.3f,%.3f" % self.xy(p) for p in pts)

    def document(self) -> str:
        head = ('<?xml version="1.0" encoding="UTF-8"?>\n'
                f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{self.width}" '
                f'height="{self.height}" viewBox="0 0 {self.width} {self.height}">\n')
        return head + "".join(p + "\n" for p in self.parts) + "</svg>\n"


def _bounds(points: np.ndarray, margin: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = points.min(0), points.max(0)
    span = np.maximum(hi - lo, 1e-6)
    # square viewport so metres look the same in x and y
    side = span.max() * (1.0 + 2.0 * margin)
    centre = (lo + hi) / 2.0
    return centre - side / 2.0, np.array([side, side])


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def render_trajectories_svg(layers: Sequence[Layer], scene: Scene | None = None, title: str = "") -> str:
    """Draw trajectory layers over the road; predictions red, ground truth green.

    The viewport covers every trajectory point with a 10% margin.
    """
    layers = [ly for ly in layers]
    if not layers:
        raise ValueError("at least one layer is required")
    scene = scene or Scene()
    arrays = []
    for ly in layers:
        arr = np.asarray(ly.trajectories, dtype=float)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[-1] != 2 or arr.size == 0:
            raise ValueError(f"layer {ly.label!r} must hold (N, T, 2) trajectories")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"layer {ly.label!r} has non-finite points")
        arrays.append(arr)
    lo, span = _bounds(np.concatenate([a.reshape(-1, 2) for a in arrays]))
    c = _Canvas(lo, span)
    c.parts.append(f'<rect x="0" y="0" width="{c.width}" height="{c.height}" fill="#f4f1e8"/>')
    c.parts.append(f'<polygon points="{c.points(scene.road_polygon())}" fill="#c8c8c8" stroke="#888888"/>')
    for goal in (scene.straight_exit, scene.right_exit):
        x, y = c.xy(goal)
        c.parts.append(f'<rect x="{x - 4:.3f}" y="{y - 4:.3f}" width="8" height="8" fill="none" '
                       f'stroke="#333333" stroke-dasharray="2,2"/>')
    for ly, arr in zip(layers, arrays):
        color = COLORS.get(ly.kind, COLORS["prediction"])
        c.parts.append(f'<g id="{_escape(ly.label)}" stroke="{color}" fill="none" opacity="{ly.opacity:.3f}">')
        for traj in arr:
            c.parts.append(f'<polyline points="{c.points(traj)}" stroke-width="2"/>')
        if ly.mark_endpoints:
            for traj in arr:
                x, y = c.xy(traj[-1])
                c.parts.append(f'<circle cx="{x:.3f}" cy="{y:.3f}" r="3.5" fill="{color}"/>')
        c.parts.append("</g>")
    if title:
        c.parts.append(f'<text x="8" y="18" font-family="sans-serif" font-size="13">{_escape(title)}</text>')
    return c.document()


def render_quality_diversity_trace(series, title: str = "") -> str:
    """Plot a sequence of (ASD, ADE) pairs; the start is red and the end blue."""
    pts = np.asarray(series, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise ValueError("need at least two (ASD, ADE) points")
    if not np.all(np.isfinite(pts)):
        raise ValueError("trace has non-finite points")
    lo, hi = pts.min(0), pts.max(0)
    span = np.maximum(hi - lo, 1e-9) * 1.2
    lo = lo - 0.1 * span / 1.2
    c = _Canvas(lo, span, width=480, height=400, pad=50)
    c.parts.append(f'<rect x="0" y="0" width="{c.width}" height="{c.height}" fill="white"/>')
    x0, y0 = c.pad, c.height - c.pad
    c.parts.append(f'<path d="M{x0},{c.pad} L{x0},{y0} L{c.width - c.pad},{y0}" stroke="black" fill="none"/>')
    c.parts.append(f'<text x="{c.width / 2:.1f}" y="{c.height - 15}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="13">ASD</text>')
    c.parts.append(f'<text x="15" y="{c.height / 2:.1f}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="13" transform="rotate(-90 15 {c.height / 2:.1f})">ADE</text>')
    for value, anchor in ((lo[0], "start"), (lo[0] + span[0], "end")):
        x, _ = c.xy((value, lo[1]))
        c.parts.append(f'<text x="{x:.3f}" y="{y0 + 15}" text-anchor="{anchor}" font-family="sans-serif" '
                       f'font-size="10">{value:.3g}</text>')
    for value in (lo[1], lo[1] + span[1]):
        _, y = c.xy((lo[0], value))
        c.parts.append(f'<text x="{x0 - 4}" y="{y:.3f}" text-anchor="end" font-family="sans-serif" '
                       f'font-size="10">{value:.3g}</text>')
    c.parts.append(f'<polyline points="{c.points(pts)}" stroke="#7f7f7f" fill="none" stroke-width="1.5"/>')
    for p, color in ((pts[0], "red"), (pts[-1], "blue")):
        x, y = c.xy(p)
        c.parts.append(f'<circle cx="{x:.3f}" cy="{y:.3f}" r="5" fill="{color}"/>')
    if title:
        c.parts.append(f'<text x="{c.width / 2:.1f}" y="25" text-anchor="middle" font-family="sans-serif" '
                       f'font-size="14">{_escape(title)}</text>')
    return c.document()
