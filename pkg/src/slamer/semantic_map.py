"""Semantic grid maps: a physical occupancy layer, a semantic label layer and
per-label Euclidean distance fields.

Cell ``(ix, iy)`` covers ``[ix, ix + 1) x [iy, iy + 1)`` in map-frame cell
units; arrays are indexed ``[iy, ix]`` so row 0 is the row at the map origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

FREE = 0
OTHERS = 1
NO_OCCUPANCY = -1

DEFAULT_D_MAX = 10.0


def normalize_angle(theta):
    """Wrap angles to (-pi, pi]. Works on scalars and arrays."""
    wrapped = np.pi - np.mod(np.pi - np.asarray(theta, dtype=float), 2.0 * np.pi)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class Pose2D:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    def compose(self, other: "Pose2D") -> "Pose2D":
        """Return ``self (+) other``, with ``other`` expressed in this frame."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2D(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )

    def transform_points(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        c, s = math.cos(self.theta), math.sin(self.theta)
        out = np.empty_like(pts)
        out[:, 0] = self.x + c * pts[:, 0] - s * pts[:, 1]
        out[:, 1] = self.y + s * pts[:, 0] + c * pts[:, 1]
        return out

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @classmethod
    def from_array(cls, a) -> "Pose2D":
        return cls(float(a[0]), float(a[1]), float(a[2]))


class MapFormatError(ValueError):
    """Raised for malformed map files; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class ClassTable:
    """Ordered class names; the label id of a class is its position."""

    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 2:
            raise ValueError("class table needs at least free space (0) and others (1)")
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        for n in names:
            if not n or any(ch.isspace() for ch in n):
                raise ValueError(f"invalid class name {n!r}")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, str]]) -> "ClassTable":
        pairs = sorted(pairs)
        ids = [i for i, _ in pairs]
        if ids != list(range(len(ids))):
            raise ValueError(f"label ids must be contiguous from 0, got {ids}")
        return cls(tuple(n for _, n in pairs))

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(enumerate(self.names))

    def id_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown class {name!r}") from None

    def name_of(self, label: int) -> str:
        return self.names[label]

    def ids_of(self, names: Iterable[str]) -> list[int]:
        return [self.id_of(n) for n in names]


INDOOR_CLASSES = ClassTable(
    (
        "free_space",
        "others",
        "open_door",
        "close_door",
        "open_glass_door",
        "close_glass_door",
        "no_entry_line",
        "fence",
    )
)


@dataclass(frozen=True)
class DistanceField:
    values: np.ndarray
    d_max: float


@dataclass(frozen=True, eq=False)
class SemanticGridMap:
    resolution: float
    origin: Pose2D
    class_table: ClassTable
    physical: np.ndarray
    semantic: np.ndarray
    fields: Mapping[int, DistanceField] = field(default_factory=dict)
    occupancy_field: DistanceField | None = None

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("nonpositive resolution")
        physical = np.asarray(self.physical, dtype=np.int16)
        semantic = np.asarray(self.semantic, dtype=np.int16)
        if physical.ndim != 2 or physical.shape != semantic.shape:
            raise ValueError("physical and semantic layers must be 2D with equal shape")
        n = len(self.class_table)
        if physical.size and (physical.min() < NO_OCCUPANCY or physical.max() >= n):
            raise ValueError("physical label outside class table")
        if semantic.size and (semantic.min() < 0 or semantic.max() >= n):
            raise ValueError("semantic label outside class table")
        if np.any(physical == FREE):
            raise ValueError("occupied cell cannot carry the free-space label")
        if np.any((physical >= 0) & (semantic == FREE)):
            raise ValueError("occupied cell with free semantic label")
        physical.setflags(write=False)
        semantic.setflags(write=False)
        object.__setattr__(self, "physical", physical)
        object.__setattr__(self, "semantic", semantic)
        object.__setattr__(self, "fields", dict(self.fields))

    @classmethod
    def empty(cls, width: int, height: int, resolution: float,
              origin: Pose2D | None = None,
              class_table: ClassTable = INDOOR_CLASSES) -> "SemanticGridMap":
        return cls(
            resolution=resolution,
            origin=origin or Pose2D(),
            class_table=class_table,
            physical=np.full((height, width), NO_OCCUPANCY, dtype=np.int16),
            semantic=np.zeros((height, width), dtype=np.int16),
        )

    @property
    def width(self) -> int:
        return self.physical.shape[1]

    @property
    def height(self) -> int:
        return self.physical.shape[0]

    @property
    def occupied(self) -> np.ndarray:
        return self.physical >= 0

    @property
    def d_max(self) -> float:
        if self.occupancy_field is None:
            raise RuntimeError("distance fields not built; call build_distance_fields")
        return self.occupancy_field.d_max

    def has_field(self, label: int) -> bool:
        return label in self.fields

    @cached_property
    def label_field_stack(self) -> np.ndarray:
        """(L, H, W) array of per-label fields; unbuilt labels hold d_max."""
        stack = np.full((len(self.class_table), self.height, self.width), self.d_max)
        for label, f in self.fields.items():
            stack[label] = f.values
        return stack

    def world_to_map_frame(self, xy: np.ndarray) -> np.ndarray:
        """World points to continuous cell coordinates (float, cell units)."""
        xy = np.asarray(xy, dtype=float)
        dx = xy[..., 0] - self.origin.x
        dy = xy[..., 1] - self.origin.y
        if self.origin.theta != 0.0:
            c, s = math.cos(self.origin.theta), math.sin(self.origin.theta)
            dx, dy = c * dx + s * dy, -s * dx + c * dy
        return np.stack([dx / self.resolution, dy / self.resolution], axis=-1)

    def cells_of(self, xy) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorised world->cell; returns ``(ix, iy, inside)``.

        Out-of-bounds entries keep their (invalid) indices and are flagged by
        ``inside == False``.
        """
        uv = self.world_to_map_frame(xy)
        ix = np.floor(uv[..., 0]).astype(np.int64)
        iy = np.floor(uv[..., 1]).astype(np.int64)
        inside = (ix >= 0) & (ix < self.width) & (iy >= 0) & (iy < self.height)
        return ix, iy, inside

    def lookup(self, values: np.ndarray, xy, outside) -> np.ndarray:
        """Nearest-cell lookup of a (H, W) or (L, H, W) array at world points."""
        ix, iy, inside = self.cells_of(xy)
        ix = np.where(inside, ix, 0)
        iy = np.where(inside, iy, 0)
        if values.ndim == 2:
            return np.where(inside, values[iy, ix], outside)
        got = values[:, iy, ix]
        return np.where(inside[None], got, outside)


def world_to_cell(grid: SemanticGridMap, point) -> tuple[int, int] | None:
    """Cell containing ``point``, or ``None`` when it falls outside the map."""
    ix, iy, inside = grid.cells_of(np.asarray(point, dtype=float))
    if not bool(inside):
        return None
    return int(ix), int(iy)


def cell_to_world(grid: SemanticGridMap, index) -> np.ndarray:
    """World coordinates of the centre of cell ``(ix, iy)``."""
    ix, iy = index
    local = np.array([(ix + 0.5) * grid.resolution, (iy + 0.5) * grid.resolution])
    return grid.origin.transform_points(local)[0]


def euclidean_distance_field(targets: np.ndarray, resolution: float, d_max: float) -> np.ndarray:
    """Exact Euclidean distance (metres) from each cell centre to the nearest
    target cell centre, clamped to ``d_max``."""
    if not targets.any():
        return np.full(targets.shape, float(d_max))
    dist = ndimage.distance_transform_edt(~targets) * resolution
    return np.minimum(dist, d_max)


def build_distance_fields(grid: SemanticGridMap, labels: Iterable[int] | None = None,
                          d_max: float = DEFAULT_D_MAX) -> SemanticGridMap:
    """Return a copy of ``grid`` carrying distance fields.

    One field per requested semantic label (all labels when ``labels`` is
    None) plus the field over all physically occupied cells, which the
    likelihood field model uses.
    """
    if not d_max > 0:
        raise ValueError("d_max must be positive")
    n = len(grid.class_table)
    labels = range(n) if labels is None else list(labels)
    fields = {}
    for label in labels:
        if not 0 <= label < n:
            raise KeyError(f"unknown label id {label}")
        fields[label] = DistanceField(
            euclidean_distance_field(grid.semantic == label, grid.resolution, d_max), d_max)
    occ = DistanceField(euclidean_distance_field(grid.occupied, grid.resolution, d_max), d_max)
    return replace(grid, fields=fields, occupancy_field=occ)


def _bilinear(values: np.ndarray, grid: SemanticGridMap, xy, outside: float) -> np.ndarray:
    uv = grid.world_to_map_frame(xy) - 0.5
    h, w = values.shape
    u = np.clip(uv[..., 0], 0.0, w - 1.0)
    v = np.clip(uv[..., 1], 0.0, h - 1.0)
    i0 = np.floor(u).astype(int)
    j0 = np.floor(v).astype(int)
    i1 = np.minimum(i0 + 1, w - 1)
    j1 = np.minimum(j0 + 1, h - 1)
    fu, fv = u - i0, v - j0
    val = ((1 - fu) * (1 - fv) * values[j0, i0] + fu * (1 - fv) * values[j0, i1]
           + (1 - fu) * fv * values[j1, i0] + fu * fv * values[j1, i1])
    _, _, inside = grid.cells_of(xy)
    return np.where(inside, val, outside)


def closest_distance(grid: SemanticGridMap, label: int | None, point,
                     interpolate: bool = False):
    """Distance (m) from ``point`` to the nearest cell with ``label``.

    ``label=None`` queries the physical occupancy field. Points outside the
    map return ``d_max``. Accepts a single point or an ``(..., 2)`` array.
    """
    if label is None:
        f = grid.occupancy_field
        if f is None:
            raise RuntimeError("occupancy distance field not built; call build_distance_fields")
    else:
        f = grid.fields.get(label)
        if f is None:
            raise RuntimeError(
                f"distance field for label {label} not built; call build_distance_fields")
    xy = np.asarray(point, dtype=float)
    if interpolate:
        out = _bilinear(f.values, grid, xy, f.d_max)
    else:
        out = grid.lookup(f.values, xy, f.d_max)
    return float(out) if np.ndim(out) == 0 else out


# -- file format ------------------------------------------------------------

def _strip(line: str) -> str:
    return line.split("#", 1)[0].strip()


def load_map(path) -> SemanticGridMap:
    """Parse a map file (see README for the format)."""
    text = Path(path).read_text(encoding="utf-8")
    lines = [(i + 1, _strip(raw)) for i, raw in enumerate(text.splitlines())]
    lines = [(no, s) for no, s in lines if s]
    pos = 0

    def take(key: str, nvals: int):
        nonlocal pos
        if pos >= len(lines):
            raise MapFormatError(f"unexpected end of file, expected '{key}'")
        no, s = lines[pos]
        parts = s.split()
        if parts[0] != key or len(parts) != nvals + 1:
            raise MapFormatError(f"expected '{key}' with {nvals} value(s), got {s!r}", no)
        pos += 1
        return no, parts[1:]

    def number(tok: str, no: int, kind=float):
        try:
            return kind(tok)
        except ValueError:
            raise MapFormatError(f"bad number {tok!r}", no) from None

    no, (w,) = take("width", 1)
    width = number(w, no, int)
    no, (h,) = take("height", 1)
    height = number(h, no, int)
    if width <= 0 or height <= 0:
        raise MapFormatError("nonpositive dimensions", no)
    no, (r,) = take("resolution", 1)
    resolution = number(r, no)
    if not resolution > 0:
        raise MapFormatError("nonpositive resolution", no)
    no, vals = take("origin", 3)
    origin = Pose2D(*(number(v, no) for v in vals))
    no, (k,) = take("classes", 1)
    nclasses = number(k, no, int)
    pairs = []
    for _ in range(nclasses):
        if pos >= len(lines):
            raise MapFormatError("unexpected end of file in class list")
        no, s = lines[pos]
        parts = s.split()
        if len(parts) != 2:
            raise MapFormatError(f"expected 'id name', got {s!r}", no)
        pairs.append((number(parts[0], no, int), parts[1]))
        pos += 1
    try:
        table = ClassTable.from_pairs(pairs)
    except ValueError as exc:
        raise MapFormatError(str(exc), no) from None

    def layer(key: str, lo: int) -> np.ndarray:
        nonlocal pos
        take(key, 0)
        rows = []
        for _ in range(height):
            if pos >= len(lines):
                raise MapFormatError(f"unexpected end of file in '{key}' layer")
            no, s = lines[pos]
            toks = s.split()
            if len(toks) != width:
                raise MapFormatError(f"dimension mismatch: expected {width} values, got {len(toks)}", no)
            row = [number(t, no, int) for t in toks]
            for v in row:
                if not lo <= v < nclasses:
                    raise MapFormatError(f"label id {v} outside class table", no)
            rows.append(row)
            pos += 1
        return np.array(rows, dtype=np.int16)

    physical = layer("physical", NO_OCCUPANCY)
    semantic = layer("semantic", 0)
    if pos != len(lines):
        raise MapFormatError("trailing content after semantic layer", lines[pos][0])
    try:
        return SemanticGridMap(resolution, origin, table, physical, semantic)
    except ValueError as exc:
        raise MapFormatError(str(exc)) from None


def save_map(grid: SemanticGridMap, path) -> None:
    out = [
        f"width {grid.width}",
        f"height {grid.height}",
        f"resolution {grid.resolution!r}",
        f"origin {grid.origin.x!r} {grid.origin.y!r} {grid.origin.theta!r}",
        f"classes {len(grid.class_table)}",
    ]
    out += [f"{i} {name}" for i, name in grid.class_table]
    out.append("physical")
    out += [" ".join(str(int(v)) for v in row) for row in grid.physical]
    out.append("semantic")
    out += [" ".join(str(int(v)) for v in row) for row in grid.semantic]
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def maps_equal(a: SemanticGridMap, b: SemanticGridMap) -> bool:
    return (a.resolution == b.resolution and a.origin == b.origin
            and a.class_table == b.class_table
            and np.array_equal(a.physical, b.physical)
            and np.array_equal(a.semantic, b.semantic))


# -- authoring --------------------------------------------------------------

def _segment_mask(grid_shape, res: float, p0, p1, thickness: float) -> np.ndarray:
    h, w = grid_shape
    cx = (np.arange(w) + 0.5) * res
    cy = (np.arange(h) + 0.5) * res
    X, Y = np.meshgrid(cx, cy)
    p0 = np.asarray(p0, float)
    d = np.asarray(p1, float) - p0
    L2 = float(d @ d)
    if L2 == 0.0:
        t = np.zeros_like(X)
    else:
        t = np.clip(((X - p0[0]) * d[0] + (Y - p0[1]) * d[1]) / L2, 0.0, 1.0)
    dist = np.hypot(X - (p0[0] + t * d[0]), Y - (p0[1] + t * d[1]))
    return dist <= max(thickness / 2.0, res / 2.0) + 1e-9


def _rect_mask(grid_shape, res: float, lo, hi) -> np.ndarray:
    h, w = grid_shape
    cx = (np.arange(w) + 0.5) * res
    cy = (np.arange(h) + 0.5) * res
    x0, x1 = sorted((lo[0], hi[0]))
    y0, y1 = sorted((lo[1], hi[1]))
    mx = (cx >= x0) & (cx < x1)
    my = (cy >= y0) & (cy < y1)
    return my[:, None] & mx[None, :]


def rasterize_shapes(size: Sequence[float], resolution: float, shapes: Sequence[Mapping],
                     class_table: ClassTable = INDOOR_CLASSES,
                     origin: Pose2D | None = None) -> SemanticGridMap:
    """Build a map from labeled rectangles and thick segments.

    Each shape is a mapping with ``type`` (``rect`` or ``segment``),
    ``label`` (class name), ``physical`` (bool, default True) and geometry
    (``min``/``max`` corners or ``p0``/``p1``/``thickness``) in map-frame
    metres. Physical shapes of different labels may not overlap. Semantic-only
    shapes label free cells and leave occupied cells untouched.
    """
    if not resolution > 0:
        raise ValueError("nonpositive resolution")
    w = int(round(size[0] / resolution))
    h = int(round(size[1] / resolution))
    if w <= 0 or h <= 0:
        raise ValueError("map size must be positive")
    physical = np.full((h, w), NO_OCCUPANCY, dtype=np.int16)
    semantic = np.zeros((h, w), dtype=np.int16)
    spatial = []
    for i, shape in enumerate(shapes):
        label = class_table.id_of(shape["label"])
        kind = shape.get("type", "rect")
        if kind == "rect":
            mask = _rect_mask((h, w), resolution, shape["min"], shape["max"])
        elif kind == "segment":
            mask = _segment_mask((h, w), resolution, shape["p0"], shape["p1"],
                                 float(shape.get("thickness", resolution)))
        else:
            raise ValueError(f"shape {i}: unknown type {kind!r}")
        if shape.get("physical", True):
            if label == FREE:
                raise ValueError(f"shape {i}: physical shape cannot be free space")
            clash = mask & (physical >= 0) & (physical != label)
            if clash.any():
                raise ValueError(f"shape {i}: overlaps a physical shape with a different label")
            physical[mask] = label
            semantic[mask] = label
        else:
            spatial.append((label, mask))
    for label, mask in spatial:
        semantic[mask & (physical < 0)] = label
    return SemanticGridMap(resolution, origin or Pose2D(), class_table, physical, semantic)
