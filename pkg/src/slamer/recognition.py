"""Object hypotheses from a single scan.

Two sources are provided: a line detector (progressive probabilistic Hough
transform on a rasterised scan, followed by spatial-line search between
scan discontinuities) with a rule table mapping point rates to class
probabilities, and a confusion-matrix recognizer that fakes a learned
per-point classifier for controlled experiments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .semantic_map import ClassTable, Pose2D
from .world_sim import Scan

PHYSICAL = "physical_line"
SPATIAL = "spatial_line"
POINT = "point"
KINDS = (PHYSICAL, SPATIAL, POINT)


@dataclass
class ObjectHypothesis:
    """A recognised object. ``endpoints`` are in the sensor frame."""

    kind: str
    endpoints: np.ndarray
    member_beams: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    point_rate: float = 0.0
    probs: np.ndarray | None = None
    truth_label: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown object kind {self.kind!r}")
        self.endpoints = np.asarray(self.endpoints, dtype=float).reshape(2, 2)
        self.member_beams = np.asarray(self.member_beams, dtype=int)
        if self.kind == PHYSICAL and len(self.member_beams) == 0:
            raise ValueError("physical line needs member beams")

    @property
    def length(self) -> float:
        return float(np.hypot(*(self.endpoints[1] - self.endpoints[0])))

    @property
    def direction(self) -> float:
        d = self.endpoints[1] - self.endpoints[0]
        return math.atan2(d[1], d[0])

    def sample_points(self, step: float) -> np.ndarray:
        """Points along the segment at most ``step`` apart, endpoints included."""
        if self.kind == POINT or self.length < 1e-12:
            return self.endpoints[:1].copy()
        n = max(2, int(math.ceil(self.length / step)) + 1)
        s = np.linspace(0.0, 1.0, n)[:, None]
        return self.endpoints[0] + s * (self.endpoints[1] - self.endpoints[0])

    def world_endpoints(self, pose: Pose2D, offset: Pose2D = Pose2D()) -> np.ndarray:
        return pose.compose(offset).transform_points(self.endpoints)


# -- progressive probabilistic Hough transform --------------------------------

@dataclass(frozen=True)
class LineParams:
    """Line-detector settings; lengths are metres."""

    pixel: float = 0.05
    theta_bins: int = 180
    vote_threshold: int = 10
    min_length: float = 0.3
    max_gap: float = 0.25
    gate: float = 0.06
    min_members: int = 5
    merge_angle_deg: float = 5.0
    seed: int = 0


def probabilistic_hough(image: np.ndarray, theta_bins: int, threshold: int,
                        min_length: int, max_gap: int,
                        rng: np.random.Generator) -> list[tuple[float, float, float, float]]:
    """Progressive probabilistic Hough transform on a boolean image.

    Pixels are visited in random order; each votes into a (theta, rho)
    accumulator and, once a bin reaches ``threshold``, the corresponding
    line is followed through the image allowing gaps of up to ``max_gap``
    pixels. Segments at least ``min_length`` pixels long are returned as
    ``(x0, y0, x1, y1)`` in pixel coordinates and their pixels are removed
    from the accumulator.
    """
    h, w = image.shape
    thetas = np.arange(theta_bins) * (np.pi / theta_bins)
    cos_t, sin_t = np.cos(thetas), np.sin(thetas)
    diag = int(math.ceil(math.hypot(h, w)))
    acc = np.zeros((theta_bins, 2 * diag + 1), dtype=np.int32)
    tb = np.arange(theta_bins)
    mask = image.astype(bool).copy()
    voted = np.zeros_like(mask)
    ys, xs = np.nonzero(mask)
    segments = []

    def rho_of(x, y):
        return np.rint(x * cos_t + y * sin_t).astype(np.int64) + diag

    for idx in rng.permutation(len(xs)):
        x0, y0 = int(xs[idx]), int(ys[idx])
        if not mask[y0, x0]:
            continue
        r = rho_of(x0, y0)
        acc[tb, r] += 1
        voted[y0, x0] = True
        votes = acc[tb, r]
        best = int(np.argmax(votes))
        if votes[best] < threshold:
            continue

        dx, dy = -sin_t[best], cos_t[best]
        if abs(dx) >= abs(dy):
            sx, sy = math.copysign(1.0, dx), dy / abs(dx)
            band = ((0, -1), (0, 1))
        else:
            sx, sy = dx / abs(dy), math.copysign(1.0, dy)
            band = ((-1, 0), (1, 0))

        def on_line(px, py):
            if not (0 <= px < w and 0 <= py < h):
                return None
            if mask[py, px]:
                return True
            for ox, oy in band:
                qx, qy = px + ox, py + oy
                if 0 <= qx < w and 0 <= qy < h and mask[qy, qx]:
                    return True
            return False

        reach = []
        for sgn in (1, -1):
            k, last, gap = 0, 0, 0
            while True:
                k += 1
                px = int(round(x0 + sgn * k * sx))
                py = int(round(y0 + sgn * k * sy))
                hit = on_line(px, py)
                if hit is None:
                    break
                if hit:
                    last, gap = k, 0
                else:
                    gap += 1
                    if gap > max_gap:
                        break
            reach.append(last)
        k_pos, k_neg = reach
        e0 = (x0 - k_neg * sx, y0 - k_neg * sy)
        e1 = (x0 + k_pos * sx, y0 + k_pos * sy)
        good = max(abs(e1[0] - e0[0]), abs(e1[1] - e0[1])) >= min_length

        for k in range(-k_neg, k_pos + 1):
            px = int(round(x0 + k * sx))
            py = int(round(y0 + k * sy))
            for ox, oy in ((0, 0),) + band:
                qx, qy = px + ox, py + oy
                if 0 <= qx < w and 0 <= qy < h and mask[qy, qx]:
                    if good and voted[qy, qx]:
                        acc[tb, rho_of(qx, qy)] -= 1
                        voted[qy, qx] = False
                    mask[qy, qx] = False
        if good:
            segments.append((e0[0], e0[1], e1[0], e1[1]))
    return segments


def _fit_line(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Total-least-squares line: (centroid, unit direction)."""
    c = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - c, full_matrices=False)
    return c, vt[0]


def _project(pts, c, d):
    rel = pts - c
    along = rel @ d
    perp = np.abs(rel[:, 0] * d[1] - rel[:, 1] * d[0])
    return along, perp


def _angle_diff(a: float, b: float) -> float:
    """Undirected difference between two line directions, in [0, pi/2]."""
    d = abs((a - b) % math.pi)
    return min(d, math.pi - d)


def _runs(sorted_along: np.ndarray, max_gap: float) -> list[slice]:
    if len(sorted_along) == 0:
        return []
    breaks = np.nonzero(np.diff(sorted_along) > max_gap)[0] + 1
    edges = np.concatenate([[0], breaks, [len(sorted_along)]])
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


def expected_beam_count(scan: Scan, endpoints: np.ndarray) -> int:
    """Number of beams whose bearing lies within the segment's angular span."""
    b0 = math.atan2(endpoints[0, 1], endpoints[0, 0])
    b1 = math.atan2(endpoints[1, 1], endpoints[1, 0])
    span = (b1 - b0 + math.pi) % (2 * math.pi) - math.pi
    rel = (scan.angles - b0 + math.pi) % (2 * math.pi) - math.pi
    half = 0.5 * abs(scan.params.angle_increment)
    if span >= 0:
        inside = (rel >= -half) & (rel <= span + half)
    else:
        inside = (rel <= half) & (rel >= span - half)
    return int(inside.sum())


def _segment_from_members(pts, members, c=None, d=None):
    sel = pts[members]
    if c is None:
        c, d = _fit_line(sel)
    along = (sel - c) @ d
    return np.array([c + along.min() * d, c + along.max() * d]), c, d


def detect_lines(scan: Scan, params: LineParams = LineParams()) -> list[ObjectHypothesis]:
    """Physical line objects in ``scan`` (sensor frame)."""
    hits = np.nonzero(scan.hits)[0]
    if len(hits) < params.min_members:
        return []
    pts_all = scan.points()
    pts = pts_all[hits]
    lo = pts.min(axis=0) - 2 * params.pixel
    pix = np.floor((pts - lo) / params.pixel).astype(int)
    size = pix.max(axis=0) + 3
    image = np.zeros((size[1], size[0]), dtype=bool)
    image[pix[:, 1], pix[:, 0]] = True

    rng = np.random.default_rng(params.seed)
    raw = probabilistic_hough(
        image, params.theta_bins, params.vote_threshold,
        max(1, int(round(params.min_length / params.pixel))),
        max(1, int(round(params.max_gap / params.pixel))), rng)
    raw_m = [np.array([[x0, y0], [x1, y1]]) * params.pixel + lo + 0.5 * params.pixel
             for x0, y0, x1, y1 in raw]
    raw_m.sort(key=lambda e: -np.hypot(*(e[1] - e[0])))

    claimed = np.zeros(len(hits), dtype=bool)
    lines: list[tuple[np.ndarray, np.ndarray]] = []  # (member idx into hits, endpoints)
    for seg in raw_m:
        c = seg[0]
        L = float(np.hypot(*(seg[1] - seg[0])))
        if L == 0.0:
            continue
        d = (seg[1] - seg[0]) / L
        along, perp = _project(pts, c, d)
        cand = np.nonzero(~claimed & (perp <= params.gate)
                          & (along >= -params.max_gap) & (along <= L + params.max_gap))[0]
        if len(cand) < params.min_members:
            continue
        c2, d2 = _fit_line(pts[cand])
        along2, perp2 = _project(pts, c2, d2)
        span_lo, span_hi = along2[cand].min() - params.max_gap, along2[cand].max() + params.max_gap
        cand = np.nonzero(~claimed & (perp2 <= params.gate)
                          & (along2 >= span_lo) & (along2 <= span_hi))[0]
        order = cand[np.argsort(along2[cand])]
        for run in _runs(along2[order], params.max_gap):
            members = order[run]
            if len(members) < params.min_members:
                continue
            ends, _, _ = _segment_from_members(pts, members)
            if np.hypot(*(ends[1] - ends[0])) < params.min_length:
                continue
            claimed[members] = True
            lines.append((members, ends))

    lines = _merge_collinear(pts, lines, params)
    out = []
    for members, ends in lines:
        beams = hits[np.sort(members)]
        expected = max(1, expected_beam_count(scan, ends))
        out.append(ObjectHypothesis(PHYSICAL, ends, beams, min(1.0, len(beams) / expected)))
    return out


def _merge_collinear(pts, lines, params: LineParams):
    merge_angle = math.radians(params.merge_angle_deg)
    lines = list(lines)
    changed = True
    while changed:
        changed = False
        for i in range(len(lines)):
            for j in range(i + 1, len(lines)):
                mi, ei = lines[i]
                mj, ej = lines[j]
                di = math.atan2(*(ei[1] - ei[0])[::-1])
                dj = math.atan2(*(ej[1] - ej[0])[::-1])
                if _angle_diff(di, dj) > merge_angle:
                    continue
                members = np.concatenate([mi, mj])
                c, d = _fit_line(pts[members])
                along, perp = _project(pts[members], c, d)
                if perp.max() > 2 * params.gate:
                    continue
                if np.diff(np.sort(along)).max(initial=0.0) > params.max_gap:
                    continue
                ends, _, _ = _segment_from_members(pts, members, c, d)
                lines[i] = (members, ends)
                del lines[j]
                changed = True
                break
            if changed:
                break
    return lines


# -- spatial lines ------------------------------------------------------------

@dataclass(frozen=True)
class SpatialParams:
    """Spatial-line search settings; lengths are metres."""

    jump: float = 0.3
    min_length: float = 0.5
    max_length: float = 3.0
    hist_bins: int = 18
    hist_threshold: float = 0.3
    pass_margin: float = 0.3
    gate: float = 0.06
    max_block_frac: float = 0.1
    merge_dist: float = 0.1
    coincide_frac: float = 0.5


def incline_histogram(lines: Sequence[ObjectHypothesis], bins: int) -> np.ndarray:
    """Length-weighted histogram of line inclines over [0, 180) degrees, normalised."""
    hist = np.zeros(bins)
    for ln in lines:
        a = ln.direction % math.pi
        hist[min(bins - 1, int(a / math.pi * bins))] += ln.length
    total = hist.sum()
    return hist / total if total > 0 else hist


def _candidate_points(scan: Scan, lines: Sequence[ObjectHypothesis], params: SpatialParams):
    pts = scan.points()
    hits = scan.hits
    cands: list[tuple[np.ndarray, bool]] = []
    for ln in lines:
        cands.append((ln.endpoints[0], True))
        cands.append((ln.endpoints[1], True))
    r = scan.ranges
    for i in range(scan.beam_count - 1):
        a, b = i, i + 1
        if hits[a] and hits[b]:
            if abs(r[a] - r[b]) > params.jump:
                cands.append((pts[a], False))
                cands.append((pts[b], False))
        elif hits[a] != hits[b]:
            cands.append((pts[a] if hits[a] else pts[b], False))
    merged: list[tuple[np.ndarray, bool]] = []
    for p, is_end in cands:
        for k, (q, q_end) in enumerate(merged):
            if np.hypot(*(p - q)) <= params.merge_dist:
                if is_end and not q_end:
                    merged[k] = (p, True)
                break
        else:
            merged.append((p, is_end))
    return merged


def _coverage(a, b, lines, gate, n=21) -> float:
    """Fraction of the segment a-b lying within ``gate`` of a physical line."""
    s = np.linspace(0.0, 1.0, n)[:, None]
    samples = a + s * (b - a)
    covered = np.zeros(n, dtype=bool)
    for ln in lines:
        e0, e1 = ln.endpoints
        d = e1 - e0
        L2 = float(d @ d)
        t = np.clip(((samples - e0) @ d) / L2, 0.0, 1.0) if L2 > 0 else np.zeros(n)
        dist = np.hypot(*(samples - (e0 + t[:, None] * d)).T)
        covered |= dist <= gate
    return float(covered.mean())


def _ray_crossings(scan: Scan, a, b):
    """Beams whose ray crosses segment a-b strictly inside; returns (beam idx, distance)."""
    ang = scan.angles
    dx, dy = np.cos(ang), np.sin(ang)
    e = b - a
    den = dx * e[1] - dy * e[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (a[0] * e[1] - a[1] * e[0]) / den
        s = (a[0] * dy - a[1] * dx) / den
    ok = np.isfinite(t) & (t > 0) & (s > 0.02) & (s < 0.98)
    idx = np.nonzero(ok)[0]
    return idx, t[idx]


def detect_spatial_lines(scan: Scan, physical_lines: Sequence[ObjectHypothesis],
                         params: SpatialParams = SpatialParams()) -> list[ObjectHypothesis]:
    """Spatial line objects: open space boundaries consistent with the room's
    dominant wall inclines, with free space visible behind them."""
    if not physical_lines:
        return []
    hist = incline_histogram(physical_lines, params.hist_bins)
    allowed = hist >= params.hist_threshold * hist.max()
    cands = _candidate_points(scan, physical_lines, params)
    pts = scan.points()
    hits = scan.hits

    survivors = []
    for i in range(len(cands)):
        for j in range(i + 1, len(cands)):
            a, a_end = cands[i]
            b, b_end = cands[j]
            e = b - a
            L = float(np.hypot(*e))
            if not params.min_length <= L <= params.max_length:
                continue
            incline = math.atan2(e[1], e[0]) % math.pi
            bin_ = min(params.hist_bins - 1, int(incline / math.pi * params.hist_bins))
            if not allowed[bin_]:
                continue
            if _coverage(a, b, physical_lines, params.gate) > params.coincide_frac:
                continue
            beams, t_int = _ray_crossings(scan, a, b)
            if len(beams) == 0:
                continue
            r = scan.ranges[beams]
            through = (r >= t_int + params.pass_margin) | ~hits[beams]
            blocked = hits[beams] & (r < t_int - params.gate)
            if not through.any() or blocked.mean() > params.max_block_frac:
                continue
            interior = False
            for k, (q, _) in enumerate(cands):
                if k in (i, j):
                    continue
                s = float((q - a) @ e) / (L * L)
                if 0.0 < s < 1.0 and abs((q - a)[0] * e[1] - (q - a)[1] * e[0]) / L <= params.gate:
                    if min(np.hypot(*(q - a)), np.hypot(*(q - b))) > params.merge_dist:
                        interior = True
                        break
            if interior:
                continue
            score = hist[bin_] + float(a_end) + float(b_end)
            survivors.append((score, a, b))

    survivors.sort(key=lambda s: -s[0])
    kept: list[tuple[float, np.ndarray, np.ndarray]] = []
    for score, a, b in survivors:
        mid = 0.5 * (a + b)
        L = float(np.hypot(*(b - a)))
        dup = False
        for _, ka, kb in kept:
            kL = float(np.hypot(*(kb - ka)))
            if (np.hypot(*(mid - 0.5 * (ka + kb))) < 0.5 * min(L, kL)
                    and _angle_diff(math.atan2(*(b - a)[::-1]), math.atan2(*(kb - ka)[::-1]))
                    < math.radians(20.0)):
                dup = True
                break
        if not dup:
            kept.append((score, a, b))

    out = []
    for _, a, b in kept:
        ends = np.array([a, b])
        along, perp = _project(pts, a, (b - a) / np.hypot(*(b - a)))
        on = hits & (perp <= params.gate) & (along > 0) & (along < np.hypot(*(b - a)))
        members = np.nonzero(on)[0]
        expected = max(1, expected_beam_count(scan, ends))
        out.append(ObjectHypothesis(SPATIAL, ends, members, min(1.0, len(members) / expected)))
    return out


# -- rule-based classification -------------------------------------------------

class RuleTableError(ValueError):
    pass


@dataclass
class RuleTable:
    """Piecewise map from ``(kind, point_rate)`` to a class simplex.

    ``rules[kind]`` is a list of ``(lo, hi, {class_name: weight})`` intervals
    that must tile [0, 1]; the last interval is closed on the right.
    """

    rules: Mapping[str, Sequence[tuple[float, float, Mapping[str, float]]]]
    class_table: ClassTable

    def __post_init__(self):
        checked = {}
        for kind, entries in self.rules.items():
            entries = sorted((float(lo), float(hi), dict(p)) for lo, hi, p in entries)
            if not entries:
                raise RuleTableError(f"rules for {kind!r} are empty")
            edge = 0.0
            for lo, hi, probs in entries:
                if abs(lo - edge) > 1e-12 or hi <= lo:
                    raise RuleTableError(f"rules for {kind!r} do not tile [0, 1] near {edge}")
                if not probs or min(probs.values()) < 0 or sum(probs.values()) <= 0:
                    raise RuleTableError(f"rules for {kind!r}: invalid probabilities")
                for name in probs:
                    self.class_table.id_of(name)
                edge = hi
            if abs(edge - 1.0) > 1e-12:
                raise RuleTableError(f"rules for {kind!r} do not reach 1.0")
            checked[kind] = entries
        self.rules = checked

    @classmethod
    def from_config(cls, cfg: Mapping, class_table: ClassTable) -> "RuleTable":
        """``cfg`` maps ``physical``/``spatial`` to lists of
        ``{range: [lo, hi], probs: {name: p}}``."""
        rules = {}
        for key, kind in (("physical", PHYSICAL), ("spatial", SPATIAL)):
            if key in cfg:
                rules[kind] = [(e["range"][0], e["range"][1], e["probs"]) for e in cfg[key]]
        try:
            return cls(rules, class_table)
        except KeyError as exc:
            raise RuleTableError(str(exc)) from None

    def simplex(self, kind: str, rate: float) -> np.ndarray:
        entries = self.rules.get(kind)
        if entries is None:
            raise RuleTableError(f"no rules for {kind!r}")
        rate = min(max(float(rate), 0.0), 1.0)
        for lo, hi, probs in entries:
            if lo <= rate < hi or (hi == entries[-1][1] and rate == hi):
                out = np.zeros(len(self.class_table))
                for name, p in probs.items():
                    out[self.class_table.id_of(name)] += p
                return out / out.sum()
        raise RuleTableError(f"rate {rate} not covered")


def default_rules(class_table: ClassTable) -> RuleTable:
    """Rules for the indoor class set: solid lines favour walls, fences and
    closed doors; sparse lines favour glass; spatial lines favour openings."""
    return RuleTable({
        PHYSICAL: [
            (0.0, 0.5, {"close_glass_door": 0.4, "fence": 0.3, "others": 0.3}),
            (0.5, 1.0, {"others": 0.5, "close_door": 0.25, "fence": 0.25}),
        ],
        SPATIAL: [
            (0.0, 0.3, {"open_door": 0.4, "no_entry_line": 0.3, "free_space": 0.2,
                        "open_glass_door": 0.1}),
            (0.3, 1.0, {"open_glass_door": 0.4, "open_door": 0.2, "no_entry_line": 0.2,
                        "free_space": 0.2}),
        ],
    }, class_table)


def classify_by_point_rate(obj: ObjectHypothesis, rules: RuleTable) -> np.ndarray:
    return rules.simplex(obj.kind, obj.point_rate)


# -- simulated recognizer ------------------------------------------------------

DIRICHLET_FLOOR = 0.01


@dataclass
class ConfusionRecognizer:
    """Row-stochastic confusion matrix (row = true class) and a concentration."""

    confusion: np.ndarray
    kappa: float = 1.0

    def __post_init__(self):
        c = np.asarray(self.confusion, dtype=float)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError("confusion matrix must be square")
        if c.min() < 0 or not np.allclose(c.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("confusion rows must be probability vectors")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        self.confusion = c

    @classmethod
    def uniform_confusion(cls, n_labels: int, diagonal: float, kappa: float = 1.0) -> "ConfusionRecognizer":
        off = (1.0 - diagonal) / (n_labels - 1)
        c = np.full((n_labels, n_labels), off)
        np.fill_diagonal(c, diagonal)
        return cls(c, kappa)


def simulate_recognition(true_label: int, recog: ConfusionRecognizer,
                         rng: np.random.Generator) -> np.ndarray:
    """Draw a class simplex from ``Dir(kappa * C[true] + 0.01)``."""
    alpha = recog.kappa * recog.confusion[true_label] + DIRICHLET_FLOOR
    c = rng.dirichlet(alpha)
    return c / c.sum()


def beam_objects(scan: Scan, beams: Sequence[int], recog: ConfusionRecognizer,
                 rng: np.random.Generator) -> list[ObjectHypothesis]:
    """One point object per selected hit beam, labelled by the recognizer."""
    if scan.truth_labels is None:
        raise ValueError("scan carries no truth labels to recognise from")
    pts = scan.points()
    out = []
    for b in beams:
        if not scan.hits[b]:
            continue
        truth = int(scan.truth_labels[b])
        out.append(ObjectHypothesis(POINT, np.array([pts[b], pts[b]]), np.array([b]), 1.0,
                                    simulate_recognition(truth, recog, rng), truth))
    return out
