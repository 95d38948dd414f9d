from pathlib import Path

import numpy as np
import pytest

from slamer.pipeline import (ConfigError, config_from_dict, localize, recognize, seed_streams,
                             simulate_scenario, summarize)
from slamer.recognition import SPATIAL
from slamer.semantic_map import INDOOR_CLASSES

WALLS = [{"type": "rect", "label": "others", "min": [0, 0], "max": [22, 0.2]},
         {"type": "rect", "label": "others", "min": [0, 3.8], "max": [22, 4]},
         {"type": "rect", "label": "others", "min": [0, 0.2], "max": [0.2, 3.8]},
         {"type": "rect", "label": "others", "min": [21.8, 0.2], "max": [22, 3.8]}]


def corridor_with_pillars(seed=5):
    """20 m corridor with irregular typed pillars on alternating walls."""
    rng = np.random.default_rng(seed)
    labels = ["fence", "close_door", "close_glass_door", "others"]
    shapes = list(WALLS)
    x, i = 1.0, 0
    while x < 20.5:
        w, d = rng.uniform(0.3, 0.8), rng.uniform(0.2, 0.6)
        y0, y1 = (0.2, 0.2 + d) if i % 2 == 0 else (3.8 - d, 3.8)
        shapes.append({"type": "rect", "label": labels[i % 4], "min": [x, y0], "max": [x + w, y1]})
        x += w + rng.uniform(0.8, 2.0)
        i += 1
    return {"size": [22, 4], "resolution": 0.05, "shapes": shapes}


def scenario(**changes):
    raw = {"map": corridor_with_pillars(),
           "trajectory": {"waypoints": [[1.0, 2.0, 0.0], [21.0, 2.0]], "speed": 1.0, "dt": 0.1},
           "noise": {"odometry": {"sigma_v": 0.05, "sigma_w": 0.02}, "range_sigma": 0.02},
           "scan": {"beam_count": 360, "fov_deg": 270.0, "r_max": 10.0},
           "recognition": {"source": "confusion", "beam_stride": 5},
           "recognizer": {"confusion": {"diagonal": 0.8}, "kappa": 2.0},
           "model": {"a1": 1.2, "a2": 1.0, "sigma_d": 0.25},
           "filter": {"particles": 200, "init_spread": [0.05, 0.05, 0.01]}}
    raw.update(changes)
    return config_from_dict(raw, Path("."))


@pytest.fixture(scope="module")
def corridor():
    cfg = scenario()
    return cfg, simulate_scenario(cfg)


class TestConfig:
    def test_unknown_scan_key(self):
        with pytest.raises(ConfigError):
            scenario(scan={"beams": 10})

    def test_bad_source(self):
        with pytest.raises(ConfigError):
            scenario(recognition={"source": "oracle"})

    def test_bad_rules(self):
        with pytest.raises(ConfigError):
            scenario(rules={"physical": [{"range": [0, 0.5], "probs": {"fence": 1}}]})

    def test_missing_waypoints(self):
        with pytest.raises(ConfigError):
            scenario(trajectory={"speed": 1.0})

    def test_scan_range_sets_model_range(self):
        assert scenario().hyper.r_max == 10.0

    def test_confusion_size(self):
        with pytest.raises(ConfigError):
            scenario(recognizer={"confusion": np.eye(3).tolist()})


class TestRuns:
    def test_noise_free_replay(self, corridor):
        cfg = scenario(noise={}, filter={"particles": 20})
        truth = simulate_scenario(cfg)
        run = localize(cfg, truth, "slamer", 0, measure=False)
        for rec, p in zip(run.steps, truth.poses):
            e = rec.estimate
            assert abs(e.x - p.x) < 1e-9 and abs(e.y - p.y) < 1e-9 and abs(e.theta - p.theta) < 1e-9

    def test_streams_independent(self, corridor):
        cfg, truth = corridor
        a = seed_streams(3)["odometry"].random(5)
        b = seed_streams(3)
        b["recognition"].random(100)
        np.testing.assert_array_equal(a, b["odometry"].random(5))

    def test_bit_reproducible(self, corridor):
        cfg, truth = corridor
        cfg = scenario(filter={"particles": 30, "init_spread": [0.05, 0.05, 0.01]})
        a = localize(cfg, truth, "slamer", 4)
        b = localize(cfg, truth, "slamer", 4)
        assert [r.estimate for r in a.steps] == [r.estimate for r in b.steps]

    def test_recognize_truth_labels(self, corridor):
        cfg, truth = corridor
        objs = recognize(cfg, truth.scans[10], truth.poses[10], np.random.default_rng(0))
        assert objs
        for o in objs:
            assert o.truth_label == truth.scans[10].truth_labels[o.member_beams[0]]
            assert o.probs.sum() == pytest.approx(1.0)

    def test_tracking_property(self, corridor):
        cfg, truth = corridor
        for mode in ("lfm", "slfm", "slamer"):
            errs = [summarize(localize(cfg, truth, mode, seed), truth).mean_position_error_m
                    for seed in range(10)]
            assert max(errs) < 0.2, (mode, errs)


class TestSpatialTruth:
    def test_doorway_labels(self):
        cfg = config_from_dict({
            "map": {"size": [10, 8], "resolution": 0.05, "shapes": [
                {"type": "rect", "label": "others", "min": [0.2, 3.0], "max": [4.0, 3.2]},
                {"type": "rect", "label": "others", "min": [4.9, 3.0], "max": [9.8, 3.2]},
                {"type": "segment", "label": "open_door", "physical": False,
                 "p0": [4.0, 3.1], "p1": [4.9, 3.1], "thickness": 0.2}]},
            "trajectory": {"waypoints": [[4.4, 1.5, 1.5708], [4.5, 1.5]]},
            "scan": {"r_max": 8.0},
            "recognition": {"source": "lines"}}, Path("."))
        truth = simulate_scenario(cfg)
        objs = recognize(cfg, truth.scans[0], truth.poses[0], np.random.default_rng(0))
        spatial = [o for o in objs if o.kind == SPATIAL]
        assert spatial
        assert all(o.truth_label == INDOOR_CLASSES.id_of("open_door") for o in spatial)
