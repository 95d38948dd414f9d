"""Error statistics, recognition accuracy, result tables and SVG renderings."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .models import beam_endpoints, sensor_poses
from .semantic_map import FREE, Pose2D, SemanticGridMap, normalize_angle


def pose_error(est: Pose2D, truth: Pose2D) -> tuple[float, float]:
    """Position error in centimetres and wrapped heading error in degrees."""
    pos = math.hypot(est.x - truth.x, est.y - truth.y) * 100.0
    ang = abs(float(normalize_angle(est.theta - truth.theta))) * 180.0 / math.pi
    return pos, ang


def aggregate(series: Iterable[float]) -> tuple[float, float, float]:
    """Population ``(mean, std, max)``."""
    x = np.asarray(list(series), dtype=float)
    if x.size == 0:
        raise ValueError("cannot aggregate an empty series")
    return float(x.mean()), float(x.std()), float(x.max())


@dataclass(frozen=True)
class ErrorStats:
    pos_ave_cm: float
    pos_std_cm: float
    pos_max_cm: float
    ang_ave_deg: float
    ang_std_deg: float
    ang_max_deg: float

    @classmethod
    def from_series(cls, pos_cm, ang_deg) -> "ErrorStats":
        return cls(*aggregate(pos_cm), *aggregate(ang_deg))


@dataclass(frozen=True)
class RecognitionStats:
    er_ave_pct: float
    er_std_pct: float
    er_min_pct: float
    er_max_pct: float

    @classmethod
    def from_series(cls, pct) -> "RecognitionStats":
        x = np.asarray(list(pct), dtype=float)
        if x.size == 0:
            raise ValueError("cannot aggregate an empty series")
        return cls(float(x.mean()), float(x.std()), float(x.min()), float(x.max()))


def simple_map_recognition(grid: SemanticGridMap, pose: Pose2D, scan,
                           labels: Sequence[int] | None = None) -> np.ndarray:
    """Label each beam with the class whose map cells lie closest to its endpoint.

    The likelihood field is monotone in distance, so the most likely class
    per beam is the one with the smallest field value; ties go to the lowest
    label id. Free space is not a candidate and max-range beams get ``FREE``.
    """
    if labels is None:
        labels = [l for l in range(len(grid.class_table)) if l != FREE]
    labels = np.asarray(sorted(labels), dtype=int)
    for lab in labels:
        if int(lab) not in grid.fields:
            raise RuntimeError(f"distance field for label {lab} not built; call build_distance_fields")
    sensor = sensor_poses(pose.as_array()[None, :], scan.params.sensor_offset)
    ends = beam_endpoints(sensor, scan.angles, scan.ranges)[0]
    d = grid.lookup(grid.label_field_stack[labels], ends, grid.d_max)  # (len(labels), B)
    out = labels[np.argmin(d, axis=0)]
    out[~scan.hits] = FREE
    return out


def recognition_counts(predicted, truth, free: int = FREE) -> tuple[int, int]:
    """``(matches, total)`` over entries whose truth label is not ``free``."""
    p = np.asarray(predicted)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError("predicted and truth labels differ in length")
    keep = t != free
    return int(np.sum(p[keep] == t[keep])), int(keep.sum())


def recognition_accuracy(predicted, truth, free: int = FREE) -> float:
    """Percentage of correctly labelled non-free entries."""
    if len(predicted) == 0:
        raise ValueError("no labels to evaluate")
    hit, total = recognition_counts(predicted, truth, free)
    if total == 0:
        raise ValueError("no labelled (non-free) entries to evaluate")
    return 100.0 * hit / total


def majority_label(labels) -> int:
    """Most frequent label, lowest id on ties."""
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        return FREE
    vals, counts = np.unique(labels, return_counts=True)
    return int(vals[np.argmax(counts)])


# -- tables -----------------------------------------------------------------

TABLE_COLUMNS = ["method", "seed", "pos_ave_cm", "pos_std_cm", "pos_max_cm",
                 "ang_ave_deg", "ang_std_deg", "ang_max_deg",
                 "er_ave_pct", "er_std_pct", "er_min_pct", "er_max_pct"]
RECOGNITION_COLUMNS = ["method", "seed", "er_ave_pct", "er_std_pct", "er_min_pct", "er_max_pct"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def table_row(method: str, seed, stats: ErrorStats, er: RecognitionStats | None = None) -> dict:
    row = {"method": method, "seed": seed}
    row.update(vars(stats))
    for key in ("er_ave_pct", "er_std_pct", "er_min_pct", "er_max_pct"):
        row[key] = getattr(er, key) if er is not None else None
    return row


def write_csv(rows: Sequence[dict], columns: Sequence[str], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(columns)
        for r in rows:
            wr.writerow([_fmt(r.get(c)) for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- rendering --------------------------------------------------------------

PALETTE = ["#ffffff", "#555555", "#2ca02c", "#8c564b", "#17becf", "#1f77b4",
           "#d62728", "#ff7f0e", "#9467bd", "#e377c2", "#bcbd22", "#7f7f7f"]


def label_color(label: int) -> str:
    return PALETTE[label % len(PALETTE)]


def _runs(row: np.ndarray):
    """(start, stop, value) runs of equal nonnegative values in a 1-D array."""
    start = 0
    n = len(row)
    while start < n:
        stop = start + 1
        while stop < n and row[stop] == row[start]:
            stop += 1
        if row[start] > 0:
            yield start, stop, int(row[start])
        start = stop


def render_svg(grid: SemanticGridMap, truth: Sequence[Pose2D], est: Sequence[Pose2D],
               objects: Sequence[tuple[int, float, float, float, float]], path,
               scale: float = 20.0) -> None:
    """Write an SVG of the map, trajectories and labelled objects.

    ``objects`` holds ``(label, x1, y1, x2, y2)`` in world coordinates. The
    map frame's y axis points up; the image is flipped accordingly.
    """
    res = grid.resolution
    W, H = grid.width * res, grid.height * res
    legend_h = 16 * len(grid.class_table) + 10
    ox, oy, oth = grid.origin.x, grid.origin.y, grid.origin.theta
    c, s = math.cos(oth), math.sin(oth)

    def px(x, y):
        # world -> map frame -> image
        dx, dy = x - ox, y - oy
        mx, my = c * dx + s * dy, -s * dx + c * dy
        return f"{mx * scale:.3f}", f"{(H - my) * scale:.3f}"

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W * scale:.0f}" '
           f'height="{H * scale + legend_h:.0f}">',
           f'<rect x="0" y="0" width="{W * scale:.3f}" height="{H * scale:.3f}" fill="#ffffff"/>']
    for iy in range(grid.height):
        y_img = (H - (iy + 1) * res) * scale
        for x0, x1, lab in _runs(np.where(grid.physical[iy] >= 0, grid.semantic[iy], 0)):
            out.append(f'<rect x="{x0 * res * scale:.3f}" y="{y_img:.3f}" width="{(x1 - x0) * res * scale:.3f}" '
                       f'height="{res * scale:.3f}" fill="{label_color(lab)}"/>')
        sem_only = np.where(grid.physical[iy] < 0, grid.semantic[iy], 0)
        for x0, x1, lab in _runs(sem_only):
            out.append(f'<rect x="{x0 * res * scale:.3f}" y="{y_img:.3f}" width="{(x1 - x0) * res * scale:.3f}" '
                       f'height="{res * scale:.3f}" fill="{label_color(lab)}" fill-opacity="0.4"/>')
    for poses, color in ((truth, "#000000"), (est, "#d62728")):
        if len(poses) >= 2:
            pts = " ".join(",".join(px(p.x, p.y)) for p in poses)
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
    for lab, x1, y1, x2, y2 in objects:
        a, b = px(x1, y1), px(x2, y2)
        col = label_color(int(lab))
        if (x1, y1) == (x2, y2):
            out.append(f'<circle cx="{a[0]}" cy="{a[1]}" r="2" fill="{col}"/>')
        else:
            out.append(f'<line x1="{a[0]}" y1="{a[1]}" x2="{b[0]}" y2="{b[1]}" '
                       f'stroke="{col}" stroke-width="3"/>')
    y = H * scale + 14
    for lab, name in grid.class_table:
        out.append(f'<rect x="4" y="{y - 10:.0f}" width="10" height="10" fill="{label_color(lab)}" stroke="#000000"/>')
        out.append(f'<text x="18" y="{y:.0f}" font-size="11" font-family="monospace">{lab} {name}</text>')
        y += 16
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
