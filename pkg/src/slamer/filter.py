"""Rao-Blackwellized particle filter over robot poses.

Particles carry only a pose and a log weight. Object class posteriors are
computed analytically each step at the most likely particle's pose and are
not carried between steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .models import (MODES, Hyperparameters, ObjectBatch, log_class_priors, logsumexp,
                     particle_log_likelihood, sample_motion)
from .semantic_map import Pose2D, SemanticGridMap


@dataclass
class ObjectPosterior:
    obj: object
    probs: np.ndarray
    map_label: int

    @property
    def p_top(self) -> float:
        return float(self.probs[self.map_label])


@dataclass
class FilterState:
    poses: np.ndarray        # (N, 3)
    log_weights: np.ndarray  # (N,), normalised so logsumexp == 0
    hyper: Hyperparameters
    mode: str
    grid: SemanticGridMap
    rng: np.random.Generator
    t: int = 0
    resampled: bool = False

    @property
    def n_particles(self) -> int:
        return len(self.poses)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)


def init(grid: SemanticGridMap, pose0: Pose2D, spread, n_particles: int,
         hyper: Hyperparameters, mode: str = "slamer", seed=None,
         rng: np.random.Generator | None = None) -> FilterState:
    """Particles drawn from ``N(pose0, spread)`` with uniform weights.

    ``spread`` is a 3x3 covariance or a length-3 vector of standard deviations.
    """
    if n_particles < 2:
        raise ValueError("need at least 2 particles")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    spread = np.asarray(spread, dtype=float)
    cov = np.diag(spread ** 2) if spread.ndim == 1 else spread
    poses = np.tile(pose0.as_array(), (n_particles, 1))
    if np.any(cov):
        poses = poses + rng.multivariate_normal(np.zeros(3), cov, size=n_particles, method="eigh")
        poses[:, 2] = (poses[:, 2] + math.pi) % (2 * math.pi) - math.pi
    log_w = np.full(n_particles, -math.log(n_particles))
    return FilterState(poses, log_w, hyper, mode, grid, rng)


def predict(state: FilterState, u, cov) -> FilterState:
    state.poses = sample_motion(state.poses, u, cov, state.rng)
    return state


def normalize(log_weights: np.ndarray) -> np.ndarray:
    top = np.max(log_weights)
    if not np.isfinite(top):
        raise FloatingPointError("all particle weights are zero")
    shifted = log_weights - top
    return shifted - logsumexp(shifted)


def weight(state: FilterState, scan, objects: Sequence = (),
           batch: ObjectBatch | None = None) -> FilterState:
    """Multiply in the measurement likelihood and renormalise."""
    if state.mode == "lfm":
        objects = ()
    ll = particle_log_likelihood(state.grid, state.poses, scan, objects, state.hyper,
                                 state.mode, batch)
    state.log_weights = normalize(state.log_weights + ll)
    return state


def update_recognition(state: FilterState, objects: Sequence, offset: Pose2D = Pose2D(),
                       batch: ObjectBatch | None = None) -> list[ObjectPosterior]:
    """Class posterior of each object at the maximum-weight particle."""
    if not objects:
        return []
    if batch is None:
        batch = ObjectBatch.build(objects, state.grid, state.hyper)
    best = int(np.argmax(state.log_weights))
    lp = log_class_priors(state.grid, state.poses[best], batch, state.hyper, offset)[0]
    post = lp + batch.log_recognition
    post = np.exp(post - logsumexp(post, axis=1, keepdims=True))
    return [ObjectPosterior(obj, p, int(np.argmax(p))) for obj, p in zip(objects, post)]


def estimate(state: FilterState) -> Pose2D:
    """Weighted mean position and circular-mean heading."""
    w = state.weights
    total = w.sum()
    if not total > 0:
        raise FloatingPointError("all particle weights are zero")
    w = w / total
    x = float(w @ state.poses[:, 0])
    y = float(w @ state.poses[:, 1])
    th = math.atan2(float(w @ np.sin(state.poses[:, 2])), float(w @ np.cos(state.poses[:, 2])))
    return Pose2D(x, y, th)


def ess(state: FilterState) -> float:
    w = state.weights
    return float(1.0 / np.sum(w * w))


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn by low-variance resampling (one uniform offset)."""
    n = len(weights)
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    positions = (rng.random() + np.arange(n)) / n
    return np.minimum(np.searchsorted(cdf, positions, side="right"), n - 1)


def resample_if_needed(state: FilterState) -> FilterState:
    n = state.n_particles
    state.resampled = ess(state) < n / 2.0
    if state.resampled:
        idx = systematic_resample(state.weights, state.rng)
        state.poses = state.poses[idx]
        state.log_weights = np.full(n, -math.log(n))
    return state


def step(state: FilterState, u, cov, scan=None, objects: Sequence = ()):
    """One full cycle; returns ``(state, estimate, posteriors)``.

    Passing ``scan=None`` skips the measurement update (dead reckoning).
    """
    predict(state, u, cov)
    posteriors: list[ObjectPosterior] = []
    if scan is not None:
        use = objects if state.mode != "lfm" else ()
        batch = ObjectBatch.build(use, state.grid, state.hyper) if (use and state.mode == "slamer") else None
        weight(state, scan, use, batch)
        if use:
            posteriors = update_recognition(state, use, scan.params.sensor_offset, batch)
    est = estimate(state)
    resample_if_needed(state)
    state.t += 1
    return state, est, posteriors
