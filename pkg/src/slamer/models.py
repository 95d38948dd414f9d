"""Probabilistic models used by the filter.

All per-particle functions accept an ``(N, 3)`` array of poses and are
vectorised over particles and beams; the scalar helpers (``lfm_point_likelihood``
etc.) wrap them for single evaluations. Likelihood composition happens in the
log domain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Mapping, Sequence

import numpy as np
from scipy.special import gammaln

from .semantic_map import Pose2D, SemanticGridMap, normalize_angle

MODES = ("lfm", "slfm", "slamer")

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
STRAIGHT_LINE_EPS = 1e-6


@dataclass(frozen=True)
class Hyperparameters:
    """Model constants.

    ``a1``/``a2`` are the Dirichlet concentrations for the true and the other
    classes, ``sigma_d`` the spread of the map-based class prior, ``z_*`` the
    LFM mixture weights, ``sigma`` the LFM hit std, ``lam`` the rate of the
    SLFM exponential and ``r_max`` the sensor's maximum range. Every
    ``beam_stride``-th beam is used for localization.
    """

    a1: float = 1.2
    a2: float = 1.0
    sigma_d: float = 0.5
    z_hit: float = 0.9
    z_max: float = 0.05
    z_rand: float = 0.05
    sigma: float = 0.2
    lam: float = 0.1
    r_max: float = 20.0
    beam_stride: int = 5
    unknown_labels: tuple[str, ...] = ("others",)

    def __post_init__(self):
        object.__setattr__(self, "unknown_labels", tuple(self.unknown_labels))
        object.__setattr__(self, "beam_stride", int(self.beam_stride))
        if not (self.a1 > 0 and self.a2 > 0):
            raise ValueError("Dirichlet concentrations a1, a2 must be positive")
        zs = (self.z_hit, self.z_max, self.z_rand)
        if min(zs) < 0 or abs(sum(zs) - 1.0) > 1e-9:
            raise ValueError("z_hit + z_max + z_rand must equal 1 with nonnegative terms")
        for name in ("sigma", "sigma_d", "lam", "r_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.beam_stride < 1:
            raise ValueError("beam_stride must be >= 1")

    @classmethod
    def from_mapping(cls, cfg: Mapping | None) -> "Hyperparameters":
        """Build from a ``model`` config section (``lambda`` maps to ``lam``)."""
        cfg = dict(cfg or {})
        if "lambda" in cfg:
            cfg["lam"] = cfg.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(cfg) - known
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        return cls(**cfg)

    def with_(self, **kw) -> "Hyperparameters":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(kw)
        return Hyperparameters(**values)


def logsumexp(a, axis=-1, keepdims: bool = False) -> np.ndarray:
    """Max-shifted log-sum-exp along one axis (lighter than scipy's for small arrays)."""
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


# -- motion -----------------------------------------------------------------

def motion_step(poses: np.ndarray, v, w, dt: float) -> np.ndarray:
    """Exact unicycle integration of ``(N, 3)`` poses under controls ``v, w``."""
    poses = np.asarray(poses, dtype=float)
    x, y, th = poses[..., 0], poses[..., 1], poses[..., 2]
    v = np.broadcast_to(np.asarray(v, dtype=float), th.shape)
    w = np.broadcast_to(np.asarray(w, dtype=float), th.shape)
    dth = w * dt
    arc = np.abs(dth) > STRAIGHT_LINE_EPS
    w_safe = np.where(arc, w, 1.0)
    th1 = th + dth
    # straight-line limit uses the midpoint heading
    xa = x + np.where(arc, v / w_safe * (np.sin(th1) - np.sin(th)), v * dt * np.cos(th + 0.5 * dth))
    ya = y + np.where(arc, v / w_safe * (np.cos(th) - np.cos(th1)), v * dt * np.sin(th + 0.5 * dth))
    return np.stack([xa, ya, normalize_angle(th1)], axis=-1)


def motion_model(pose: Pose2D, u) -> Pose2D:
    """Deterministic differential-drive motion for one control ``u``."""
    out = motion_step(pose.as_array(), u.v, u.w, u.dt)
    return Pose2D.from_array(out)


def covariance_factor(cov) -> np.ndarray:
    """Square-root factor of a PSD covariance; raises on invalid input."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError("covariance must be a square matrix")
    if not np.all(np.isfinite(cov)):
        raise ValueError("covariance must be finite")
    scale = max(1.0, float(np.abs(cov).max()))
    if not np.allclose(cov, cov.T, atol=1e-12 * scale):
        raise ValueError("covariance must be symmetric")
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() < -1e-12 * scale:
        raise ValueError("covariance is not positive semi-definite")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def sample_motion(poses, u, cov, rng: np.random.Generator):
    """Move each particle with an independently perturbed control.

    ``poses`` is a Pose2D or an ``(N, 3)`` array; the return type matches.
    """
    factor = covariance_factor(cov)
    single = isinstance(poses, Pose2D)
    arr = np.atleast_2d(poses.as_array() if single else np.asarray(poses, dtype=float))
    n = arr.shape[0]
    noise = rng.standard_normal((n, 2)) @ factor.T
    out = motion_step(arr, u.v + noise[:, 0], u.w + noise[:, 1], u.dt)
    return Pose2D.from_array(out[0]) if single else out


# -- geometry helpers -------------------------------------------------------

def _as_pose_array(poses) -> tuple[np.ndarray, bool]:
    if isinstance(poses, Pose2D):
        return poses.as_array()[None, :], True
    arr = np.asarray(poses, dtype=float)
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False


def sensor_poses(poses: np.ndarray, offset: Pose2D) -> np.ndarray:
    """Compose robot poses ``(N, 3)`` with the sensor mounting offset."""
    if offset.x == 0.0 and offset.y == 0.0 and offset.theta == 0.0:
        return poses
    c, s = np.cos(poses[:, 2]), np.sin(poses[:, 2])
    return np.stack([
        poses[:, 0] + c * offset.x - s * offset.y,
        poses[:, 1] + s * offset.x + c * offset.y,
        poses[:, 2] + offset.theta,
    ], axis=-1)


def beam_endpoints(sensor: np.ndarray, angles, ranges) -> np.ndarray:
    """World beam endpoints, shape ``(N, B, 2)``."""
    ang = sensor[:, 2:3] + np.asarray(angles)[None, :]
    r = np.asarray(ranges)[None, :]
    return np.stack([sensor[:, 0:1] + r * np.cos(ang), sensor[:, 1:2] + r * np.sin(ang)], axis=-1)


def local_to_world(sensor: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Sensor-frame points ``(P, 2)`` to world for each pose: ``(N, P, 2)``."""
    c = np.cos(sensor[:, 2])[:, None]
    s = np.sin(sensor[:, 2])[:, None]
    px, py = pts[None, :, 0], pts[None, :, 1]
    return np.stack([sensor[:, 0:1] + c * px - s * py, sensor[:, 1:2] + s * px + c * py], axis=-1)


# -- measurement models -----------------------------------------------------

def _log_normal0(d, sigma: float):
    return -0.5 * (d / sigma) ** 2 - math.log(sigma) - _LOG_SQRT_2PI


def lfm_mixture(d, ranges, hyper: Hyperparameters):
    """Linear-domain LFM value for obstacle distances ``d`` and beam ranges."""
    p_hit = np.exp(_log_normal0(np.asarray(d, dtype=float), hyper.sigma))
    p_max = (np.asarray(ranges) >= hyper.r_max).astype(float)
    return hyper.z_hit * p_hit + hyper.z_max * p_max + hyper.z_rand / hyper.r_max


def log_lfm_mixture(d, ranges, hyper: Hyperparameters):
    """Log of :func:`lfm_mixture`, stable when the Gaussian term underflows."""
    d = np.asarray(d, dtype=float)
    floor = hyper.z_max * (np.asarray(ranges) >= hyper.r_max) + hyper.z_rand / hyper.r_max
    if hyper.z_hit == 0.0:
        return np.log(np.broadcast_to(floor, d.shape))
    hit = math.log(hyper.z_hit) + _log_normal0(d, hyper.sigma)
    with np.errstate(divide="ignore"):
        return np.logaddexp(hit, np.log(floor))


def log_truncated_exponential(ranges, hyper: Hyperparameters):
    lam = hyper.lam
    return math.log(lam) - lam * np.asarray(ranges, dtype=float) - math.log1p(-math.exp(-lam * hyper.r_max))


def lfm_log_beams(grid: SemanticGridMap, poses, angles, ranges, hyper: Hyperparameters,
                  offset: Pose2D = Pose2D()) -> np.ndarray:
    """Per-beam log LFM, shape ``(N, B)``, against the occupancy field."""
    f = grid.occupancy_field
    if f is None:
        raise RuntimeError("occupancy distance field not built; call build_distance_fields")
    arr, _ = _as_pose_array(poses)
    ends = beam_endpoints(sensor_poses(arr, offset), angles, ranges)
    d = grid.lookup(f.values, ends, f.d_max)
    return log_lfm_mixture(d, np.broadcast_to(ranges, d.shape), hyper)


def lfm_point_likelihood(grid: SemanticGridMap, pose: Pose2D, beam, hyper: Hyperparameters,
                         offset: Pose2D = Pose2D()) -> float:
    """LFM density of one beam ``(angle, range)`` seen from ``pose``."""
    f = grid.occupancy_field
    if f is None:
        raise RuntimeError("occupancy distance field not built; call build_distance_fields")
    angle, r = beam
    arr, _ = _as_pose_array(pose)
    end = beam_endpoints(sensor_poses(arr, offset), [angle], [r])
    return float(lfm_mixture(grid.lookup(f.values, end, f.d_max), r, hyper)[0, 0])


def unknown_ids(grid: SemanticGridMap, hyper: Hyperparameters) -> np.ndarray:
    return np.array(grid.class_table.ids_of(hyper.unknown_labels), dtype=int)


def slfm_log_beams(grid: SemanticGridMap, poses, angles, ranges, labels, hyper: Hyperparameters,
                   offset: Pose2D = Pose2D()) -> np.ndarray:
    """Per-beam log SLFM, shape ``(N, B)``.

    ``labels`` holds the most probable class per beam; ``-1`` marks a beam
    without recognition, which falls back to plain LFM.
    """
    arr, _ = _as_pose_array(poses)
    labels = np.asarray(labels, dtype=int)
    ranges = np.asarray(ranges, dtype=float)
    for lab in np.unique(labels[labels >= 0]):
        if int(lab) not in grid.fields and lab not in unknown_ids(grid, hyper):
            raise RuntimeError(f"distance field for label {lab} not built; call build_distance_fields")
    unk = np.isin(labels, unknown_ids(grid, hyper))
    plain = labels < 0
    sem = ~(unk | plain)
    out = np.empty((arr.shape[0], len(labels)))
    out[:, unk] = log_truncated_exponential(ranges[unk], hyper)[None, :]
    if plain.any():
        out[:, plain] = lfm_log_beams(grid, arr, np.asarray(angles)[plain], ranges[plain], hyper, offset)
    if sem.any():
        ends = beam_endpoints(sensor_poses(arr, offset), np.asarray(angles)[sem], ranges[sem])
        ix, iy, inside = grid.cells_of(ends)
        stack = grid.label_field_stack
        lab = np.broadcast_to(labels[sem][None, :], ix.shape)
        d = np.where(inside, stack[lab, np.where(inside, iy, 0), np.where(inside, ix, 0)], grid.d_max)
        out[:, sem] = log_lfm_mixture(d, np.broadcast_to(ranges[sem], d.shape), hyper)
    return out


def slfm_point_likelihood(grid: SemanticGridMap, pose: Pose2D, beam, chat, hyper: Hyperparameters,
                          offset: Pose2D = Pose2D()) -> float:
    """SLFM density of one beam given the recognizer's class simplex ``chat``."""
    angle, r = beam
    label = int(np.argmax(chat))
    return float(np.exp(slfm_log_beams(grid, pose, [angle], [r], [label], hyper, offset))[0, 0])


# -- recognition model ------------------------------------------------------

def floor_simplex(chat, n_labels: int | None = None) -> np.ndarray:
    """Clip entries to at least 0.01 / L and renormalise."""
    chat = np.asarray(chat, dtype=float)
    L = chat.shape[-1] if n_labels is None else n_labels
    out = np.maximum(chat, 0.01 / L)
    return out / out.sum(axis=-1, keepdims=True)


def dirichlet_log_density(x, alpha) -> float:
    x = np.asarray(x, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    return float(gammaln(alpha.sum()) - gammaln(alpha).sum() + ((alpha - 1.0) * np.log(x)).sum())


def recognition_log_likelihoods(chat, hyper: Hyperparameters) -> np.ndarray:
    """``log Dir(chat; a(l))`` for every candidate true label ``l``.

    Accepts one simplex ``(L,)`` or a batch ``(K, L)``; the simplex is floored
    before evaluation.
    """
    c = floor_simplex(chat)
    L = c.shape[-1]
    a1, a2 = hyper.a1, hyper.a2
    logc = np.log(c)
    const = gammaln(a1 + (L - 1) * a2) - gammaln(a1) - (L - 1) * gammaln(a2)
    base = const + (a2 - 1.0) * logc.sum(axis=-1, keepdims=True)
    return base + (a1 - a2) * logc


def dirichlet_recognition_likelihood(chat, true_label: int, hyper: Hyperparameters) -> float:
    """Density of the recognizer output ``chat`` when the true class is ``true_label``."""
    return float(np.exp(recognition_log_likelihoods(chat, hyper)[true_label]))


# -- map-based class prior --------------------------------------------------

@dataclass
class ObjectBatch:
    """Sample points of several objects packed for vectorised evaluation."""

    points: np.ndarray          # (P, 2) sensor frame
    starts: np.ndarray          # (K,) offset of each object's first point
    counts: np.ndarray          # (K,)
    log_recognition: np.ndarray  # (K, L)

    @classmethod
    def build(cls, objects: Sequence, grid: SemanticGridMap, hyper: Hyperparameters) -> "ObjectBatch":
        L = len(grid.class_table)
        pts, counts = [], []
        for obj in objects:
            p = obj.sample_points(grid.resolution)
            if len(p) == 0:
                raise ValueError("object has no sample points")
            pts.append(p)
            counts.append(len(p))
        if not pts:
            return cls(np.zeros((0, 2)), np.zeros(0, int), np.zeros(0, int), np.zeros((0, L)))
        counts = np.array(counts)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        log_rec = np.zeros((len(objects), L))
        rows = [k for k, obj in enumerate(objects) if obj.probs is not None]
        for k in rows:
            if len(objects[k].probs) != L:
                raise ValueError(f"object simplex has {len(objects[k].probs)} entries, class table has {L}")
        if rows:
            probs = np.stack([objects[k].probs for k in rows])
            log_rec[rows] = recognition_log_likelihoods(probs, hyper)
        return cls(np.concatenate(pts), starts, counts, log_rec)

    def __len__(self) -> int:
        return len(self.counts)


def representative_distances(grid: SemanticGridMap, poses, batch: ObjectBatch,
                             offset: Pose2D = Pose2D()) -> np.ndarray:
    """Mean closest distance from each object to each label: ``(N, K, L)``."""
    arr, _ = _as_pose_array(poses)
    world = local_to_world(sensor_poses(arr, offset), batch.points)
    d = grid.lookup(grid.label_field_stack, world, grid.d_max)  # (L, N, P)
    sums = np.add.reduceat(d, batch.starts, axis=2)
    return np.moveaxis(sums / batch.counts, 0, 2)


def log_class_priors(grid: SemanticGridMap, poses, batch: ObjectBatch, hyper: Hyperparameters,
                     offset: Pose2D = Pose2D()) -> np.ndarray:
    """Normalised log prior over classes for each particle and object ``(N, K, L)``."""
    d = representative_distances(grid, poses, batch, offset)
    score = -0.5 * (d / hyper.sigma_d) ** 2
    return score - logsumexp(score, axis=-1, keepdims=True)


def class_prior(grid: SemanticGridMap, pose: Pose2D, obj, hyper: Hyperparameters,
                offset: Pose2D = Pose2D()) -> np.ndarray:
    """Map-based prior over the classes of one object seen from ``pose``."""
    batch = ObjectBatch.build([obj], grid, hyper)
    return np.exp(log_class_priors(grid, pose, batch, hyper, offset)[0, 0])


def log_object_terms(grid: SemanticGridMap, poses, batch: ObjectBatch, hyper: Hyperparameters,
                     offset: Pose2D = Pose2D()) -> np.ndarray:
    """``log sum_l Dir(chat_k; l) p(l | x, m)`` for each particle/object ``(N, K)``."""
    lp = log_class_priors(grid, poses, batch, hyper, offset)
    return logsumexp(lp + batch.log_recognition[None, :, :], axis=-1)


def slamer_object_term(grid: SemanticGridMap, pose: Pose2D, obj, hyper: Hyperparameters,
                       offset: Pose2D = Pose2D()) -> float:
    batch = ObjectBatch.build([obj], grid, hyper)
    return float(np.exp(log_object_terms(grid, pose, batch, hyper, offset))[0, 0])


# -- composed particle likelihood -------------------------------------------

def localization_beams(scan, hyper: Hyperparameters) -> np.ndarray:
    return np.arange(0, scan.beam_count, hyper.beam_stride)


def beam_labels(scan, objects: Sequence, beams: np.ndarray) -> np.ndarray:
    """Most probable class for each selected beam from the object owning it."""
    owner = np.full(scan.beam_count, -1, dtype=int)
    for obj in objects:
        mb = np.asarray(obj.member_beams, dtype=int)
        if len(mb):
            owner[mb] = int(np.argmax(obj.probs))
    return owner[beams]


def particle_log_likelihood(grid: SemanticGridMap, poses, scan, objects: Sequence,
                            hyper: Hyperparameters, mode: str = "slamer",
                            batch: ObjectBatch | None = None):
    """Log weight increment of each particle under ``mode``.

    ``lfm`` sums log LFM over the localization beams, ``slfm`` uses the class
    of the object owning each beam, and ``slamer`` adds the log object term of
    every recognised object to the LFM sum.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if scan is None or scan.beam_count == 0:
        raise ValueError("empty scan")
    arr, single = _as_pose_array(poses)
    beams = localization_beams(scan, hyper)
    angles = scan.angles[beams]
    ranges = scan.ranges[beams]
    offset = scan.params.sensor_offset
    if mode == "slfm":
        labels = beam_labels(scan, objects, beams)
        total = slfm_log_beams(grid, arr, angles, ranges, labels, hyper, offset).sum(axis=1)
    else:
        total = lfm_log_beams(grid, arr, angles, ranges, hyper, offset).sum(axis=1)
        if mode == "slamer" and len(objects):
            if batch is None:
                batch = ObjectBatch.build(objects, grid, hyper)
            total = total + log_object_terms(grid, arr, batch, hyper, offset).sum(axis=1)
    return float(total[0]) if single else total
