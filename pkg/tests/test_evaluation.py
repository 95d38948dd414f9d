import math
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_map
from slamer.evaluation import (RECOGNITION_COLUMNS, TABLE_COLUMNS, ErrorStats, RecognitionStats,
                               aggregate, majority_label, pose_error, read_csv,
                               recognition_accuracy, recognition_counts, render_svg,
                               simple_map_recognition, table_row, write_csv)
from slamer.pipeline import RunSummary, table_rows
from slamer.semantic_map import FREE, INDOOR_CLASSES, Pose2D, build_distance_fields, rasterize_shapes
from slamer.world_sim import Scan, ScanParams, raycast_scan


class TestPoseError:
    def test_wrap(self):
        pos, ang = pose_error(Pose2D(0, 0, math.radians(179)), Pose2D(0, 0, math.radians(-179)))
        assert pos == 0.0 and ang == pytest.approx(2.0)

    def test_units(self):
        pos, ang = pose_error(Pose2D(0.03, 0.04, 0.1), Pose2D(0, 0, 0))
        assert pos == pytest.approx(5.0) and ang == pytest.approx(math.degrees(0.1))

    def test_perfect(self):
        assert pose_error(Pose2D(1, 2, 3), Pose2D(1, 2, 3)) == (0.0, 0.0)


class TestAggregate:
    def test_two_values(self):
        assert aggregate([0.0, 10.0]) == (5.0, 5.0, 10.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate([])

    @settings(max_examples=50)
    @given(st.lists(st.floats(0, 1e4), min_size=1, max_size=30), st.randoms())
    def test_order_independent(self, xs, rnd):
        ys = list(xs)
        rnd.shuffle(ys)
        np.testing.assert_allclose(aggregate(xs), aggregate(ys), rtol=1e-12, atol=1e-9)

    def test_stats(self):
        e = ErrorStats.from_series([1, 2, 3], [0, 0, 3])
        assert e.pos_ave_cm == 2.0 and e.pos_max_cm == 3.0 and e.ang_ave_deg == 1.0
        r = RecognitionStats.from_series([50.0, 100.0])
        assert (r.er_ave_pct, r.er_std_pct, r.er_min_pct, r.er_max_pct) == (75.0, 25.0, 50.0, 100.0)


class TestAccuracy:
    def test_free_excluded(self):
        assert recognition_counts([1, 2, 3, 0], [1, 3, 3, FREE]) == (2, 3)
        assert recognition_accuracy([1, 2, 3, 0], [1, 3, 3, FREE]) == pytest.approx(200 / 3)

    def test_perfect(self):
        assert recognition_accuracy([4, 5, 6], [4, 5, 6]) == 100.0

    def test_empty(self):
        with pytest.raises(ValueError):
            recognition_accuracy([], [])

    def test_all_free(self):
        with pytest.raises(ValueError):
            recognition_accuracy([1, 2], [FREE, FREE])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            recognition_accuracy([1, 2], [1])

    def test_majority(self):
        assert majority_label([3, 2, 2, 3, 5]) == 2
        assert majority_label([]) == FREE


class TestSimpleMapRecognition:
    def test_tie_goes_to_lowest_id(self):
        fence, glass = INDOOR_CLASSES.id_of("fence"), INDOOR_CLASSES.id_of("close_glass_door")
        shapes = [{"type": "rect", "label": "close_glass_door", "min": [2.0, 0.0], "max": [2.1, 1.0]},
                  {"type": "rect", "label": "fence", "min": [2.0, 1.1], "max": [2.1, 2.0]}]
        g = build_distance_fields(rasterize_shapes((3, 2), 0.1, shapes))
        # beam ending in the row midway between the two blocks
        p = ScanParams(beam_count=1, angle_min=0.0, angle_increment=0.0, r_max=5.0)
        scan = Scan(p, np.array([1.0]))
        out = simple_map_recognition(g, Pose2D(0.95, 1.05, 0.0), scan)
        assert out[0] == min(fence, glass)

    def test_max_range_is_free(self, room):
        p = ScanParams(beam_count=3, r_max=2.0)
        scan = Scan(p, np.array([2.0, 1.0, 2.0]))
        out = simple_map_recognition(room, Pose2D(2, 2, 0), scan)
        assert out[0] == FREE and out[2] == FREE and out[1] != FREE

    def test_requires_fields(self):
        g = rasterize_shapes((2, 2), 0.1, [])
        with pytest.raises(RuntimeError):
            simple_map_recognition(g, Pose2D(1, 1, 0), Scan(ScanParams(beam_count=1), np.array([1.0])))

    def test_noise_free_scan_matches_truth(self, room):
        s = raycast_scan(room, Pose2D(3, 2.5, 0.4), ScanParams(r_max=10.0))
        out = simple_map_recognition(room, Pose2D(3, 2.5, 0.4), s)
        assert recognition_accuracy(out, s.truth_labels) > 95.0

    @pytest.mark.parametrize("seed", range(3))
    def test_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        g = build_distance_fields(random_map(rng, 30, 25, 0.1, p_occ=0.05), d_max=1.0)
        free = np.argwhere(~g.occupied)
        iy, ix = free[rng.integers(len(free))]
        pose = Pose2D((ix + 0.5) * 0.1, (iy + 0.5) * 0.1, 0.0)
        scan = raycast_scan(g, pose, ScanParams(beam_count=60, r_max=3.0))
        out = simple_map_recognition(g, pose, scan)
        centres = (np.argwhere(np.ones_like(g.semantic, bool)) + 0.5) * 0.1  # (iy, ix) order
        ends = pose.transform_points(scan.points())
        for b in np.nonzero(scan.hits)[0]:
            end = ends[b]
            cx, cy, _ = g.cells_of(end)
            c = (np.array([cy, cx]) + 0.5) * 0.1
            best = {}
            for lab in range(1, len(g.class_table)):
                mask = (g.semantic == lab).ravel()
                if mask.any():
                    best[lab] = min(1.0, float(np.min(np.hypot(*(centres[mask] - c).T))))
                else:
                    best[lab] = 1.0
            m = min(best.values())
            assert best[int(out[b])] == pytest.approx(m, abs=1e-9)
            assert int(out[b]) == min(l for l, v in best.items() if abs(v - m) < 1e-9)


class TestTables:
    def test_csv_round_trip(self, tmp_path):
        rows = [table_row("lfm", 0, ErrorStats(1, 2, 3, 4, 5, 6)),
                table_row("slamer", "all", ErrorStats(1, 2, 3, 4, 5, 6), RecognitionStats(90, 1, 80, 99))]
        write_csv(rows, TABLE_COLUMNS, tmp_path / "t.csv")
        back = read_csv(tmp_path / "t.csv")
        assert list(back[0]) == TABLE_COLUMNS
        assert back[0]["er_ave_pct"] == "" and float(back[1]["er_min_pct"]) == 80.0
        assert float(back[0]["pos_max_cm"]) == 3.0

    def summaries(self):
        rng = np.random.default_rng(0)
        out = []
        for mode in ("lfm", "slamer"):
            for seed in range(3):
                out.append(RunSummary(mode, seed, rng.random(10) * 10, rng.random(10), rng.random(5) * 100,
                                      rng.random(5) * 100, rng.random(5) * 100))
        return out

    def test_layout(self):
        rows, rec = table_rows(self.summaries())
        assert [(r["method"], r["seed"]) for r in rows] == [
            ("lfm", 0), ("lfm", 1), ("lfm", 2), ("lfm", "all"),
            ("slamer", 0), ("slamer", 1), ("slamer", 2), ("slamer", "all")]
        assert all(r["er_ave_pct"] is None for r in rows[:4])
        assert all(r["er_ave_pct"] is not None for r in rows[4:])
        assert {r["method"] for r in rec} == {"slamer:raw", "slamer:map_based", "slamer:slamer"}
        assert set(RECOGNITION_COLUMNS) <= set(rec[0])

    def test_pooled_rows_order_independent(self):
        s = self.summaries()
        a, _ = table_rows(s)
        b, _ = table_rows(s[:3][::-1] + s[3:][::-1])
        pooled = lambda rows: [r for r in rows if r["seed"] == "all"]
        for x, y in zip(pooled(a), pooled(b)):
            for k in TABLE_COLUMNS[2:]:
                if x[k] is not None:
                    assert x[k] == pytest.approx(y[k], rel=1e-12)

    def test_perfect_estimates_zero_error(self):
        s = RunSummary("lfm", 0, np.zeros(5), np.zeros(5), np.array([]), np.array([]), np.array([]))
        rows, rec = table_rows([s])
        assert rows[0]["pos_ave_cm"] == 0.0 and rows[0]["ang_max_deg"] == 0.0
        assert rec == []


class TestRender:
    def test_deterministic_and_legend(self, room, tmp_path):
        truth = [Pose2D(1, 1, 0), Pose2D(2, 1.5, 0.3)]
        est = [Pose2D(1.05, 1, 0), Pose2D(2.1, 1.4, 0.3)]
        objs = [(6, 4.0, 1.0, 4.0, 3.0), (3, 1.0, 5.8, 1.0, 5.8)]
        render_svg(room, truth, est, objs, tmp_path / "a.svg")
        render_svg(room, truth, est, objs, tmp_path / "b.svg")
        a = (tmp_path / "a.svg").read_bytes()
        assert a == (tmp_path / "b.svg").read_bytes()
        text = a.decode()
        assert text.startswith("<svg") and text.rstrip().endswith("</svg>")
        legend = re.findall(r">(\d+) (\w+)</text>", text)
        assert [int(i) for i, _ in legend] == list(range(len(INDOOR_CLASSES)))
        assert [n for _, n in legend] == [INDOOR_CLASSES.name_of(i) for i in range(len(INDOOR_CLASSES))]
        assert text.count("<polyline") == 2 and text.count("<circle") == 1
