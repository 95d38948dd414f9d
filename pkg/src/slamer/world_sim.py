"""Synthetic 2D world: trajectories, noisy odometry and ray-cast LiDAR scans."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .models import covariance_factor, motion_model
from .semantic_map import FREE, Pose2D, SemanticGridMap, world_to_cell


@dataclass(frozen=True)
class ControlInput:
    v: float
    w: float
    dt: float

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")


@dataclass(frozen=True)
class NoiseConfig:
    """Odometry noise covariance over ``(v, w)``."""

    cov: tuple = ((0.0, 0.0), (0.0, 0.0))

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (2, 2):
            raise ValueError("odometry covariance must be 2x2")
        covariance_factor(cov)
        object.__setattr__(self, "cov", tuple(map(tuple, cov.tolist())))

    @classmethod
    def diagonal(cls, sigma_v: float, sigma_w: float) -> "NoiseConfig":
        return cls(((sigma_v ** 2, 0.0), (0.0, sigma_w ** 2)))

    @property
    def matrix(self) -> np.ndarray:
        return np.array(self.cov)


@dataclass(frozen=True)
class ScanParams:
    beam_count: int = 360
    angle_min: float = -math.radians(135.0)
    angle_increment: float = math.radians(270.0) / 359
    r_max: float = 20.0
    sensor_offset: Pose2D = Pose2D()

    def __post_init__(self):
        if self.beam_count < 1:
            raise ValueError("beam_count must be >= 1")
        if not self.r_max > 0:
            raise ValueError("r_max must be positive")

    @classmethod
    def from_fov(cls, beam_count: int = 360, fov_deg: float = 270.0, r_max: float = 20.0,
                 sensor_offset: Pose2D = Pose2D()) -> "ScanParams":
        fov = math.radians(fov_deg)
        inc = fov / (beam_count - 1) if beam_count > 1 else 0.0
        return cls(beam_count, -fov / 2.0, inc, r_max, sensor_offset)

    @property
    def angles(self) -> np.ndarray:
        return self.angle_min + self.angle_increment * np.arange(self.beam_count)


@dataclass
class Scan:
    params: ScanParams
    ranges: np.ndarray
    truth_labels: np.ndarray | None = None

    def __post_init__(self):
        self.ranges = np.asarray(self.ranges, dtype=float)
        if self.ranges.shape != (self.params.beam_count,):
            raise ValueError("ranges length must equal beam_count")
        if self.truth_labels is not None:
            self.truth_labels = np.asarray(self.truth_labels, dtype=int)

    @property
    def beam_count(self) -> int:
        return self.params.beam_count

    @property
    def r_max(self) -> float:
        return self.params.r_max

    @property
    def angles(self) -> np.ndarray:
        return self.params.angles

    @property
    def hits(self) -> np.ndarray:
        return self.ranges < self.params.r_max

    def points(self) -> np.ndarray:
        """Beam endpoints in the sensor frame, ``(B, 2)``."""
        a = self.angles
        return np.stack([self.ranges * np.cos(a), self.ranges * np.sin(a)], axis=1)


def raycast_scan(grid: SemanticGridMap, pose: Pose2D, params: ScanParams) -> Scan:
    """Cast every beam through the physical layer.

    Each range is the distance to the boundary of the first occupied cell the
    beam enters (exact grid traversal); beams that hit nothing within
    ``r_max`` or leave the map return exactly ``r_max`` with label free.
    Semantic-only cells never stop a ray.
    """
    sensor = pose.compose(params.sensor_offset)
    start = world_to_cell(grid, (sensor.x, sensor.y))
    if start is None:
        raise ValueError("sensor pose outside map bounds")
    if grid.occupied[start[1], start[0]]:
        raise ValueError("sensor pose inside an occupied cell")

    res = grid.resolution
    u0, v0 = grid.world_to_map_frame(np.array([sensor.x, sensor.y]))
    ang = sensor.theta - grid.origin.theta + params.angles
    du, dv = np.cos(ang), np.sin(ang)
    r_max = params.r_max
    kmax = int(math.ceil(r_max / res)) + 2

    def crossings(p0, dp):
        k = np.arange(1, kmax + 1)[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            pos = np.where(dp[:, None] > 0, np.floor(p0) + k, np.ceil(p0) - k)
            t = (pos - p0) * res / dp[:, None]
        t[~np.isfinite(t) | (t <= 0)] = np.inf
        return t

    tx = crossings(u0, du)
    ty = crossings(v0, dv)
    t = np.sort(np.concatenate([np.zeros((len(ang), 1)), tx, ty], axis=1), axis=1)
    t0, t1 = t[:, :-1], t[:, 1:]
    valid = (t1 > t0 + 1e-12) & (t0 < r_max)
    tm = np.where(valid, 0.5 * (t0 + np.minimum(t1, r_max + res)), 0.0)
    cu = np.floor(u0 + tm * du[:, None] / res).astype(np.int64)
    cv = np.floor(v0 + tm * dv[:, None] / res).astype(np.int64)
    inside = (cu >= 0) & (cu < grid.width) & (cv >= 0) & (cv < grid.height)
    occ = np.zeros(cu.shape, dtype=bool)
    occ[inside] = grid.occupied[cv[inside], cu[inside]]
    stop = valid & (occ | ~inside)
    first = np.where(stop.any(axis=1), stop.argmax(axis=1), -1)

    n = len(ang)
    ranges = np.full(n, r_max)
    labels = np.full(n, FREE, dtype=int)
    rows = np.arange(n)
    has = first >= 0
    hit = np.zeros(n, dtype=bool)
    hit[has] = occ[rows[has], first[has]]
    idx = rows[hit]
    k = first[idx]
    ranges[idx] = t0[idx, k]
    labels[idx] = grid.semantic[cv[idx, k], cu[idx, k]]
    return Scan(params, ranges, labels)


def add_range_noise(scan: Scan, sigma: float, rng: np.random.Generator) -> Scan:
    """Gaussian noise on hit ranges; max-range beams are left untouched."""
    if sigma <= 0:
        return Scan(scan.params, scan.ranges.copy(), scan.truth_labels)
    ranges = scan.ranges.copy()
    hits = scan.hits
    noisy = ranges[hits] + sigma * rng.standard_normal(int(hits.sum()))
    ranges[hits] = np.clip(noisy, 1e-3, np.nextafter(scan.r_max, 0.0))
    return Scan(scan.params, ranges, scan.truth_labels)


def generate_trajectory(waypoints: Sequence[Pose2D], speed: float, dt: float,
                        grid: SemanticGridMap | None = None,
                        turn_rate: float = 1.0) -> list[tuple[Pose2D, ControlInput]]:
    """Rotate-then-drive path through ``waypoints``.

    The first waypoint sets the start pose (including heading). Returns one
    ``(pose_after_step, control)`` pair per step; the poses are produced by
    replaying the controls through :func:`motion_model`, so replay is exact.
    """
    if len(waypoints) < 2:
        raise ValueError("need at least two waypoints")
    if not (speed > 0 and dt > 0 and turn_rate > 0):
        raise ValueError("speed, dt and turn_rate must be positive")
    if grid is not None:
        for wp in waypoints:
            cell = world_to_cell(grid, (wp.x, wp.y))
            if cell is None:
                raise ValueError(f"waypoint ({wp.x}, {wp.y}) outside the map")
            if grid.occupied[cell[1], cell[0]]:
                raise ValueError(f"waypoint ({wp.x}, {wp.y}) lies in an occupied cell")

    steps: list[tuple[Pose2D, ControlInput]] = []
    pose = waypoints[0]

    def emit(n: int, v: float, w: float):
        nonlocal pose
        u = ControlInput(v, w, dt)
        for _ in range(n):
            pose = motion_model(pose, u)
            steps.append((pose, u))

    for target in waypoints[1:]:
        dx, dy = target.x - pose.x, target.y - pose.y
        dist = math.hypot(dx, dy)
        if dist < 1e-9:
            continue
        turn = float(np.pi - np.mod(np.pi - (math.atan2(dy, dx) - pose.theta), 2 * np.pi))
        if abs(turn) > 1e-12:
            n = max(1, math.ceil(abs(turn) / (turn_rate * dt) - 1e-9))
            emit(n, 0.0, turn / (n * dt))
        n = max(1, math.ceil(dist / (speed * dt) - 1e-9))
        emit(n, dist / (n * dt), 0.0)
    if not steps:
        raise ValueError("zero-length trajectory")
    return steps


def corrupt_odometry(controls: Sequence[ControlInput], noise: NoiseConfig,
                     rng: np.random.Generator) -> list[ControlInput]:
    """Add independent ``N(0, cov)`` noise to each control's ``(v, w)``."""
    factor = covariance_factor(noise.matrix)
    if not factor.any():
        return list(controls)
    eps = rng.standard_normal((len(controls), 2)) @ factor.T
    return [ControlInput(u.v + e[0], u.w + e[1], u.dt) for u, e in zip(controls, eps)]


@dataclass
class SpatialTruth:
    """A labeled ground-truth segment (world frame) for spatial objects."""

    label: int
    p0: tuple[float, float]
    p1: tuple[float, float]


@dataclass
class ScenarioTruth:
    initial_pose: Pose2D
    poses: list[Pose2D]
    controls: list[ControlInput]
    scans: list[Scan]
    spatial_objects: list[SpatialTruth] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.controls)


def simulate(grid: SemanticGridMap, waypoints: Sequence[Pose2D], speed: float, dt: float,
             params: ScanParams, spatial_objects: Sequence[SpatialTruth] = (),
             turn_rate: float = 1.0) -> ScenarioTruth:
    """Noise-free scenario: trajectory plus one scan per step."""
    steps = generate_trajectory(waypoints, speed, dt, grid, turn_rate)
    poses = [p for p, _ in steps]
    controls = [u for _, u in steps]
    scans = [raycast_scan(grid, p, params) for p in poses]
    return ScenarioTruth(waypoints[0], poses, controls, scans, list(spatial_objects))


# -- logs -------------------------------------------------------------------

TRUTH_COLUMNS = ["t", "x_true", "y_true", "theta_true", "v", "w"]


def write_truth_log(truth: ScenarioTruth, directory) -> None:
    """Write ``truth.csv`` and the per-step scan sidecar ``scans.txt``.

    Row ``t = 0`` is the initial pose with a zero control; row ``t >= 1`` is
    the pose reached after control ``t``.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    dt = truth.controls[0].dt
    with open(d / "truth.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(TRUTH_COLUMNS)
        p = truth.initial_pose
        wr.writerow([0, repr(float(p.x)), repr(float(p.y)), repr(float(p.theta)), repr(0.0), repr(0.0)])
        for t, (p, u) in enumerate(zip(truth.poses, truth.controls), start=1):
            wr.writerow([t, repr(float(p.x)), repr(float(p.y)), repr(float(p.theta)), repr(float(u.v)), repr(float(u.w))])
    params = truth.scans[0].params
    with open(d / "scans.txt", "w") as fh:
        off = params.sensor_offset
        fh.write(f"# dt {dt!r}\n")
        fh.write(f"# params {params.beam_count} {params.angle_min!r} {params.angle_increment!r} "
                 f"{params.r_max!r} {off.x!r} {off.y!r} {off.theta!r}\n")
        for t, scan in enumerate(truth.scans, start=1):
            fh.write(f"step {t}\n")
            labels = scan.truth_labels if scan.truth_labels is not None else np.zeros(scan.beam_count, int)
            for a, r, lab in zip(scan.angles, scan.ranges, labels):
                fh.write(f"{float(a)!r} {float(r)!r} {int(lab)}\n")
    with open(d / "spatial_truth.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["label", "x1", "y1", "x2", "y2"])
        for s in truth.spatial_objects:
            wr.writerow([s.label, *(repr(float(v)) for v in (*s.p0, *s.p1))])


def read_truth_log(directory) -> ScenarioTruth:
    d = Path(directory)
    with open(d / "truth.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or list(rows[0]) != TRUTH_COLUMNS:
        raise ValueError(f"{d / 'truth.csv'}: unexpected columns")
    dt = None
    params = None
    scans: list[Scan] = []
    cur_r: list[float] = []
    cur_l: list[int] = []

    def flush():
        if cur_r:
            scans.append(Scan(params, np.array(cur_r), np.array(cur_l)))
            cur_r.clear()
            cur_l.clear()

    with open(d / "scans.txt") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "#":
                if parts[1] == "dt":
                    dt = float(parts[2])
                elif parts[1] == "params":
                    n, amin, inc, rmax, ox, oy, oth = parts[2:9]
                    params = ScanParams(int(n), float(amin), float(inc), float(rmax),
                                        Pose2D(float(ox), float(oy), float(oth)))
            elif parts[0] == "step":
                flush()
            else:
                cur_r.append(float(parts[1]))
                cur_l.append(int(parts[2]))
    flush()
    if dt is None or params is None:
        raise ValueError(f"{d / 'scans.txt'}: missing header")
    initial = Pose2D(float(rows[0]["x_true"]), float(rows[0]["y_true"]), float(rows[0]["theta_true"]))
    poses = [Pose2D(float(r["x_true"]), float(r["y_true"]), float(r["theta_true"])) for r in rows[1:]]
    controls = [ControlInput(float(r["v"]), float(r["w"]), dt) for r in rows[1:]]
    if len(scans) != len(poses):
        raise ValueError("scan count does not match truth rows")
    spatial = []
    sp = d / "spatial_truth.csv"
    if sp.exists():
        with open(sp, newline="") as fh:
            for r in csv.DictReader(fh):
                spatial.append(SpatialTruth(int(r["label"]), (float(r["x1"]), float(r["y1"])),
                                            (float(r["x2"]), float(r["y2"]))))
    return ScenarioTruth(initial, poses, controls, scans, spatial)
