import math

import numpy as np
import pytest

from slamer.recognition import (PHYSICAL, POINT, SPATIAL, ConfusionRecognizer, LineParams,
                                ObjectHypothesis, RuleTable, RuleTableError, beam_objects,
                                classify_by_point_rate, default_rules, detect_lines,
                                detect_spatial_lines, incline_histogram, simulate_recognition)
from slamer.semantic_map import INDOOR_CLASSES, Pose2D, rasterize_shapes
from slamer.world_sim import Scan, ScanParams, raycast_scan

RES = 0.05
PARAMS = ScanParams.from_fov(541, 270.0, 8.0)


def wall(x0, y0, x1, y1, label="others"):
    return {"type": "rect", "label": label, "min": [x0, y0], "max": [x1, y1]}


def scene(shapes, pose, params=PARAMS):
    grid = rasterize_shapes((8, 6), RES, shapes)
    return raycast_scan(grid, pose, params)


def angle_between(a, b):
    d = abs(a - b) % math.pi
    return min(d, math.pi - d)


DOOR_POSE = Pose2D(3.5, 2.0, math.pi / 2)
DOORWAY = [wall(0, 4, 3, 4.2), wall(3.9, 4, 8, 4.2)]


def synthetic_wall_scan(distance, normal, params):
    """Exact ranges to an infinite wall with the given normal angle."""
    a = params.angles
    c = np.cos(a - normal)
    with np.errstate(divide="ignore"):
        r = np.where(c > 1e-6, distance / c, params.r_max)
    return Scan(params, np.minimum(r, params.r_max))


class TestDetectLines:
    def test_single_wall(self):
        s = scene([wall(4, 0.5, 4.2, 3.5)], Pose2D(1, 2, 0))
        lines = detect_lines(s)
        assert len(lines) == 1
        ln = lines[0]
        assert ln.kind == PHYSICAL and ln.point_rate >= 0.95
        ends = ln.endpoints[np.argsort(ln.endpoints[:, 1])]
        np.testing.assert_allclose(ends, [[3.0, -1.5], [3.0, 1.5]], atol=2 * RES)

    def test_nothing_in_range(self):
        s = Scan(PARAMS, np.full(PARAMS.beam_count, PARAMS.r_max))
        assert detect_lines(s) == []

    def test_corner(self):
        s = scene([wall(4, 0.5, 4.2, 3.5), wall(1, 3.5, 4.2, 3.7)], Pose2D(1.5, 1.5, 0))
        lines = detect_lines(s)
        assert len(lines) == 2
        assert math.degrees(angle_between(lines[0].direction, lines[1].direction)) == pytest.approx(90, abs=5)

    def test_rotation_covariance(self):
        p = ScanParams(beam_count=360, angle_min=-math.pi, angle_increment=math.radians(1.0), r_max=8.0)
        base = synthetic_wall_scan(2.0, 0.0, p)
        turned = synthetic_wall_scan(2.0, math.radians(30.0), p)
        np.testing.assert_allclose(turned.ranges, np.roll(base.ranges, 30), atol=1e-9)
        a, b = detect_lines(base), detect_lines(turned)
        assert len(a) == len(b) == 1
        assert math.degrees(angle_between(b[0].direction - a[0].direction, math.radians(30))) < 1.0
        rot = Pose2D(0, 0, math.radians(30)).transform_points(a[0].endpoints)
        got = b[0].endpoints
        if np.linalg.norm(got[0] - rot[0]) > np.linalg.norm(got[0] - rot[1]):
            got = got[::-1]
        np.testing.assert_allclose(got, rot, atol=2 * RES)

    def test_seed_determinism(self):
        s = scene(DOORWAY + [wall(4, 0.5, 4.2, 3.5)], Pose2D(1, 2, 0.3))
        a = detect_lines(s, LineParams(seed=7))
        b = detect_lines(s, LineParams(seed=7))
        assert len(a) == len(b)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.endpoints, y.endpoints)
            np.testing.assert_array_equal(x.member_beams, y.member_beams)


class TestSpatialLines:
    def test_doorway(self):
        s = scene(DOORWAY, DOOR_POSE)
        phys = detect_lines(s)
        sp = detect_spatial_lines(s, phys)
        assert len(sp) == 1
        ends = sp[0].world_endpoints(DOOR_POSE)
        ends = ends[np.argsort(ends[:, 0])]
        np.testing.assert_allclose(ends, [[3.0, 4.0], [3.9, 4.0]], atol=2 * RES)
        assert math.degrees(angle_between(sp[0].direction + DOOR_POSE.theta, 0.0)) < 5.0
        assert sp[0].kind == SPATIAL

    def test_closed_wall(self):
        s = scene([wall(0, 4, 8, 4.2)], DOOR_POSE)
        assert detect_spatial_lines(s, detect_lines(s)) == []

    def test_blocked_gap(self):
        s = scene(DOORWAY + [wall(2.5, 4.2, 4.5, 4.4)], DOOR_POSE)
        assert detect_spatial_lines(s, detect_lines(s)) == []

    def test_no_physical_lines(self):
        s = Scan(PARAMS, np.full(PARAMS.beam_count, PARAMS.r_max))
        assert detect_spatial_lines(s, []) == []

    @pytest.mark.parametrize("pose", [DOOR_POSE, Pose2D(2.0, 2.5, 1.2), Pose2D(5.0, 1.5, 2.0)])
    def test_not_on_physical_lines(self, pose):
        s = scene(DOORWAY + [wall(0, 0, 0.2, 4), wall(7.8, 0, 8, 4)], pose)
        phys = detect_lines(s)
        for sp in detect_spatial_lines(s, phys):
            assert 0.5 <= sp.length <= 3.0
            mid = sp.endpoints.mean(axis=0)
            for ph in phys:
                a, b = ph.endpoints
                d = b - a
                t = np.clip((mid - a) @ d / (d @ d), 0, 1)
                assert np.hypot(*(a + t * d - mid)) > 0.06

    def test_incline_histogram(self):
        lines = [ObjectHypothesis(PHYSICAL, [[0, 0], [2, 0]], [0]),
                 ObjectHypothesis(PHYSICAL, [[0, 0], [0, 1]], [0])]
        h = incline_histogram(lines, 18)
        # length-weighted and normalised
        assert h[0] == pytest.approx(2 / 3) and h[9] == pytest.approx(1 / 3)
        assert h.sum() == pytest.approx(1.0)


class TestRules:
    cfg = {"physical": [{"range": [0, 0.6], "probs": {"close_glass_door": 1.0}},
                        {"range": [0.6, 1.0], "probs": {"others": 3.0, "fence": 1.0}}]}

    def test_readback(self):
        rt = RuleTable.from_config(self.cfg, INDOOR_CLASSES)
        p = rt.simplex(PHYSICAL, 0.8)
        assert p[INDOOR_CLASSES.id_of("others")] == pytest.approx(0.75)
        assert p[INDOOR_CLASSES.id_of("fence")] == pytest.approx(0.25)
        assert rt.simplex(PHYSICAL, 0.2)[INDOOR_CLASSES.id_of("close_glass_door")] == 1.0
        assert rt.simplex(PHYSICAL, 1.0)[INDOOR_CLASSES.id_of("others")] == pytest.approx(0.75)

    def test_gap_rejected(self):
        bad = {"physical": [{"range": [0, 0.4], "probs": {"others": 1}},
                            {"range": [0.5, 1.0], "probs": {"others": 1}}]}
        with pytest.raises(RuleTableError):
            RuleTable.from_config(bad, INDOOR_CLASSES)

    def test_short_rejected(self):
        with pytest.raises(RuleTableError):
            RuleTable.from_config({"spatial": [{"range": [0, 0.9], "probs": {"open_door": 1}}]}, INDOOR_CLASSES)

    def test_unknown_class(self):
        with pytest.raises(RuleTableError):
            RuleTable.from_config({"spatial": [{"range": [0, 1], "probs": {"portal": 1}}]}, INDOOR_CLASSES)

    def test_missing_kind(self):
        rt = RuleTable.from_config(self.cfg, INDOOR_CLASSES)
        with pytest.raises(RuleTableError):
            rt.simplex(SPATIAL, 0.5)

    @pytest.mark.parametrize("kind", [PHYSICAL, SPATIAL])
    @pytest.mark.parametrize("rate", [0.0, 0.1, 0.3, 0.5, 0.99, 1.0])
    def test_default_simplex(self, kind, rate):
        p = classify_by_point_rate(ObjectHypothesis(kind, [[0, 0], [1, 0]], [0], rate),
                                   default_rules(INDOOR_CLASSES))
        assert p.sum() == pytest.approx(1.0) and p.min() >= 0


class TestConfusionRecognizer:
    L = len(INDOOR_CLASSES)

    def test_validation(self):
        with pytest.raises(ValueError):
            ConfusionRecognizer(np.ones((3, 3)))
        with pytest.raises(ValueError):
            ConfusionRecognizer(np.eye(3), kappa=0.0)

    def test_sharp_identity(self):
        rec = ConfusionRecognizer(np.eye(self.L), kappa=1e4)
        rng = np.random.default_rng(0)
        hits = sum(int(np.argmax(simulate_recognition(t % self.L, rec, rng)) == t % self.L) for t in range(2000))
        assert hits / 2000 >= 0.99

    def test_uniform_mean(self):
        rec = ConfusionRecognizer.uniform_confusion(self.L, 1.0 / self.L, kappa=5.0)
        rng = np.random.default_rng(1)
        draws = np.array([simulate_recognition(3, rec, rng) for _ in range(20000)])
        np.testing.assert_allclose(draws.mean(axis=0), 1.0 / self.L, atol=0.02)
        np.testing.assert_allclose(draws.sum(axis=1), 1.0, atol=1e-12)

    def test_beam_objects(self, room):
        s = raycast_scan(room, Pose2D(2, 2, 0), ScanParams(r_max=6.0))
        rec = ConfusionRecognizer.uniform_confusion(self.L, 0.8, 2.0)
        beams = range(0, s.beam_count, 5)
        a = beam_objects(s, beams, rec, np.random.default_rng(4))
        b = beam_objects(s, beams, rec, np.random.default_rng(4))
        assert len(a) == int(s.hits[::5].sum())
        for x, y in zip(a, b):
            assert x.kind == POINT and x.truth_label == s.truth_labels[x.member_beams[0]]
            np.testing.assert_array_equal(x.probs, y.probs)
            np.testing.assert_allclose(x.endpoints[0], s.points()[x.member_beams[0]])
