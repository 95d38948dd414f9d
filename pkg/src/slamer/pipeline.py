"""Scenario configuration and end-to-end runs (simulate, localize, evaluate)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from . import filter as pf
from .evaluation import (ErrorStats, RecognitionStats, majority_label, pose_error,
                         recognition_counts, simple_map_recognition, table_row)
from .models import MODES, Hyperparameters, beam_labels
from .recognition import (SPATIAL, ConfusionRecognizer, LineParams, ObjectHypothesis,
                          RuleTable, SpatialParams, beam_objects, default_rules,
                          detect_lines, detect_spatial_lines)
from .semantic_map import (FREE, INDOOR_CLASSES, ClassTable, Pose2D, SemanticGridMap,
                           build_distance_fields, load_map, rasterize_shapes)
from .world_sim import (NoiseConfig, Scan, ScanParams, ScenarioTruth, SpatialTruth,
                        add_range_noise, corrupt_odometry, simulate)

SOURCES = ("none", "confusion", "lines")


class ConfigError(ValueError):
    """Invalid or inconsistent scenario configuration."""


# -- map specs ----------------------------------------------------------------

def load_map_spec(path) -> dict:
    with open(path) as fh:
        spec = yaml.safe_load(fh)
    if not isinstance(spec, dict) or "shapes" not in spec:
        raise ConfigError(f"{path}: map spec needs 'size', 'resolution' and 'shapes'")
    return spec


def map_from_spec(spec: Mapping) -> SemanticGridMap:
    try:
        table = ClassTable(tuple(spec["classes"])) if "classes" in spec else INDOOR_CLASSES
        origin = Pose2D(*spec.get("origin", (0.0, 0.0, 0.0)))
        return rasterize_shapes(spec["size"], float(spec["resolution"]), spec["shapes"], table, origin)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad map spec: {exc}") from None


def spatial_truth_from_spec(spec: Mapping, table: ClassTable) -> list[SpatialTruth]:
    """Ground-truth spatial objects: the non-physical segments of a map spec."""
    out = []
    for shape in spec.get("shapes", []):
        if not shape.get("physical", True) and shape.get("type") == "segment":
            out.append(SpatialTruth(table.id_of(shape["label"]), tuple(shape["p0"]), tuple(shape["p1"])))
    return out


# -- scenario config ------------------------------------------------------------

@dataclass
class ScenarioConfig:
    grid: SemanticGridMap
    waypoints: list[Pose2D]
    speed: float
    dt: float
    turn_rate: float
    odometry: NoiseConfig
    motion: NoiseConfig
    range_sigma: float
    scan: ScanParams
    source: str
    object_stride: int
    recognizer: ConfusionRecognizer | None
    rules: RuleTable
    line_params: LineParams
    spatial_params: SpatialParams
    hyper: Hyperparameters
    mode: str
    particles: int
    init_spread: tuple[float, float, float]
    seeds: list[int]
    out: Path
    spatial_truth: list[SpatialTruth] = field(default_factory=list)
    base_dir: Path = Path(".")


def _noise(section: Mapping | None) -> NoiseConfig:
    section = section or {}
    if "cov" in section:
        return NoiseConfig(tuple(map(tuple, section["cov"])))
    return NoiseConfig.diagonal(float(section.get("sigma_v", 0.0)), float(section.get("sigma_w", 0.0)))


def _dataclass_from(cls, section: Mapping | None):
    section = dict(section or {})
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def load_config(path, overrides: Mapping[str, Any] | None = None) -> ScenarioConfig:
    """Read a YAML scenario file. Relative paths resolve against its directory."""
    path = Path(path)
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return config_from_dict(raw, path.parent, overrides)


def config_from_dict(raw: Mapping, base_dir=Path("."), overrides: Mapping[str, Any] | None = None
                     ) -> ScenarioConfig:
    raw = dict(raw)
    base_dir = Path(base_dir)
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
    try:
        return _build_config(raw, base_dir)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _build_config(raw: dict, base_dir: Path) -> ScenarioConfig:
    if "map" not in raw:
        raise ConfigError("missing 'map'")
    map_ref = raw["map"]
    spatial = []
    if isinstance(map_ref, Mapping):
        spec = map_ref
        grid = map_from_spec(spec)
        spatial = spatial_truth_from_spec(spec, grid.class_table)
    else:
        mpath = base_dir / map_ref
        if not mpath.exists():
            raise ConfigError(f"map file not found: {mpath}")
        if mpath.suffix in (".yaml", ".yml"):
            spec = load_map_spec(mpath)
            grid = map_from_spec(spec)
            spatial = spatial_truth_from_spec(spec, grid.class_table)
        else:
            grid = load_map(mpath)

    model = dict(raw.get("model") or {})
    d_max = float(model.pop("d_max", 10.0))
    hyper = Hyperparameters.from_mapping(model)
    try:
        grid.class_table.ids_of(hyper.unknown_labels)
    except KeyError as exc:
        raise ConfigError(f"model.unknown_labels: {exc}") from None
    grid = build_distance_fields(grid, d_max=d_max)

    traj = raw.get("trajectory") or {}
    if "waypoints" not in traj:
        raise ConfigError("missing 'trajectory.waypoints'")
    waypoints = [Pose2D(*(list(w) + [0.0] * (3 - len(w)))) for w in traj["waypoints"]]

    noise = raw.get("noise") or {}
    odometry = _noise(noise.get("odometry"))
    motion = _noise(noise["motion"]) if "motion" in noise else odometry

    sc = dict(raw.get("scan") or {})
    offset = Pose2D(*sc.pop("sensor_offset", (0.0, 0.0, 0.0)))
    params = ScanParams.from_fov(int(sc.pop("beam_count", 360)), float(sc.pop("fov_deg", 270.0)),
                                 float(sc.pop("r_max", hyper.r_max)), offset)
    if sc:
        raise ConfigError(f"unknown scan keys: {sorted(sc)}")
    if params.r_max != hyper.r_max:
        hyper = hyper.with_(r_max=params.r_max)

    rec = raw.get("recognition") or {}
    source = rec.get("source", "none")
    if source not in SOURCES:
        raise ConfigError(f"recognition.source must be one of {SOURCES}")
    recognizer = None
    rcfg = raw.get("recognizer") or {}
    if source == "confusion":
        conf = rcfg.get("confusion", {"diagonal": 0.8})
        kappa = float(rcfg.get("kappa", 1.0))
        L = len(grid.class_table)
        if isinstance(conf, Mapping):
            recognizer = ConfusionRecognizer.uniform_confusion(L, float(conf["diagonal"]), kappa)
        else:
            recognizer = ConfusionRecognizer(np.asarray(conf, dtype=float), kappa)
        if recognizer.confusion.shape[0] != L:
            raise ConfigError("recognizer.confusion size does not match the class table")
    rules = RuleTable.from_config(raw["rules"], grid.class_table) if raw.get("rules") else default_rules(grid.class_table)

    filt = raw.get("filter") or {}
    mode = raw.get("mode", "slamer")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    seeds = raw.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    spread = tuple(float(s) for s in filt.get("init_spread", (0.0, 0.0, 0.0)))
    if len(spread) != 3:
        raise ConfigError("filter.init_spread needs three standard deviations")
    if "spatial_truth" in raw:
        spatial = [SpatialTruth(grid.class_table.id_of(s["label"]), tuple(s["p0"]), tuple(s["p1"]))
                   for s in raw["spatial_truth"]]
    return ScenarioConfig(
        grid=grid, waypoints=waypoints, speed=float(traj.get("speed", 1.0)),
        dt=float(traj.get("dt", 0.1)), turn_rate=float(traj.get("turn_rate", 1.0)),
        odometry=odometry, motion=motion, range_sigma=float(noise.get("range_sigma", 0.0)),
        scan=params, source=source, object_stride=int(rec.get("beam_stride", 5)),
        recognizer=recognizer, rules=rules,
        line_params=_dataclass_from(LineParams, raw.get("lines")),
        spatial_params=_dataclass_from(SpatialParams, raw.get("spatial_lines")),
        hyper=hyper, mode=mode, particles=int(filt.get("particles", 200)),
        init_spread=spread, seeds=[int(s) for s in seeds],
        out=(base_dir / raw.get("out", "out")).resolve(), spatial_truth=spatial, base_dir=base_dir)


# -- simulation ---------------------------------------------------------------

def simulate_scenario(cfg: ScenarioConfig) -> ScenarioTruth:
    """Noise-free ground truth: poses, controls, scans. Noise is added per seed."""
    return simulate(cfg.grid, cfg.waypoints, cfg.speed, cfg.dt, cfg.scan,
                    cfg.spatial_truth, cfg.turn_rate)


# -- recognition --------------------------------------------------------------

def _spatial_truth_label(obj: ObjectHypothesis, pose: Pose2D, offset: Pose2D,
                         truths: Sequence[SpatialTruth], tol: float = 0.5) -> int:
    mid = obj.world_endpoints(pose, offset).mean(axis=0)
    best, best_d = FREE, tol
    for s in truths:
        a, b = np.asarray(s.p0, float), np.asarray(s.p1, float)
        d = b - a
        t = np.clip(((mid - a) @ d) / (d @ d), 0.0, 1.0) if d @ d > 0 else 0.0
        dist = float(np.hypot(*(mid - (a + t * d))))
        if dist <= best_d:
            best, best_d = s.label, dist
    return best


def recognize(cfg: ScenarioConfig, scan: Scan, true_pose: Pose2D,
              rng: np.random.Generator,
              spatial_truth: Sequence[SpatialTruth] | None = None) -> list[ObjectHypothesis]:
    """Object hypotheses for one scan under the configured source, with truth labels."""
    if cfg.source == "none":
        return []
    if cfg.source == "confusion":
        beams = np.arange(0, scan.beam_count, cfg.object_stride)
        return beam_objects(scan, beams, cfg.recognizer, rng)
    physical = detect_lines(scan, cfg.line_params)
    spatial = detect_spatial_lines(scan, physical, cfg.spatial_params)
    objects = physical + spatial
    for obj in objects:
        obj.probs = cfg.rules.simplex(obj.kind, obj.point_rate)
        if obj.kind == SPATIAL:
            obj.truth_label = _spatial_truth_label(obj, true_pose, scan.params.sensor_offset,
                                                   cfg.spatial_truth if spatial_truth is None
                                                   else spatial_truth)
        elif scan.truth_labels is not None:
            obj.truth_label = majority_label(scan.truth_labels[obj.member_beams])
    return objects


# -- localization -------------------------------------------------------------

@dataclass
class StepRecord:
    t: int
    estimate: Pose2D
    ess: float
    resampled: bool
    posteriors: list
    raw: tuple[int, int]
    map_based: tuple[int, int]
    slamer: tuple[int, int]


@dataclass
class RunResult:
    mode: str
    seed: int
    steps: list[StepRecord]


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for each noise source so that turning one off
    (e.g. recognition) leaves the others' draws unchanged."""
    ss = np.random.SeedSequence(seed).spawn(4)
    return {name: np.random.default_rng(s) for name, s in zip(("odometry", "range", "recognition", "filter"), ss)}


def localize(cfg: ScenarioConfig, truth: ScenarioTruth, mode: str | None = None,
             seed: int = 0, particles: int | None = None, measure: bool = True) -> RunResult:
    """Run the filter over the whole scenario for one (mode, seed)."""
    mode = mode or cfg.mode
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    rngs = seed_streams(seed)
    controls = corrupt_odometry(truth.controls, cfg.odometry, rngs["odometry"])
    state = pf.init(cfg.grid, truth.initial_pose, cfg.init_spread, particles or cfg.particles,
                    cfg.hyper, mode, rng=rngs["filter"])
    cov = cfg.motion.matrix
    records = []
    for t, (u, clean, true_pose) in enumerate(zip(controls, truth.scans, truth.poses), start=1):
        scan = add_range_noise(clean, cfg.range_sigma, rngs["range"]) if measure else None
        objects = []
        if measure and mode != "lfm":
            objects = recognize(cfg, scan, true_pose, rngs["recognition"],
                                truth.spatial_objects or cfg.spatial_truth)
        state, est, posts = pf.step(state, u, cov, scan, objects)

        raw = mb = sl = (0, 0)
        if objects and scan.truth_labels is not None:
            owned = np.zeros(scan.beam_count, dtype=bool)
            for obj in objects:
                owned[obj.member_beams] = True
            idx = np.nonzero(owned)[0]
            truth_b = scan.truth_labels[idx]
            raw = recognition_counts(beam_labels(scan, objects, idx), truth_b)
            mb = recognition_counts(simple_map_recognition(cfg.grid, est, scan)[idx], truth_b)
            sl = recognition_counts([p.map_label for p in posts],
                                    [FREE if p.obj.truth_label is None else p.obj.truth_label for p in posts])
        records.append(StepRecord(t, est, pf.ess(state), state.resampled, posts, raw, mb, sl))
    return RunResult(mode, seed, records)


ESTIMATE_COLUMNS = ["t", "x_est", "y_est", "theta_est", "ess", "resampled"]
OBJECT_COLUMNS = ["t", "k", "kind", "map_label", "p_top", "x1", "y1", "x2", "y2",
                  "raw_label", "truth_label"]
COUNT_COLUMNS = ["t", "raw_correct", "raw_total", "map_correct", "map_total",
                 "slamer_correct", "slamer_total"]


def write_run(run: RunResult, directory, offset: Pose2D = Pose2D()) -> None:
    """``estimates.csv``, ``objects.csv`` and ``recognition_counts.csv``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "estimates.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(ESTIMATE_COLUMNS)
        for r in run.steps:
            e = r.estimate
            wr.writerow([r.t, *(repr(float(v)) for v in (e.x, e.y, e.theta, r.ess)), int(r.resampled)])
    with open(d / "objects.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(OBJECT_COLUMNS)
        for r in run.steps:
            for k, p in enumerate(r.posteriors):
                (x1, y1), (x2, y2) = p.obj.world_endpoints(r.estimate, offset)
                raw = int(np.argmax(p.obj.probs))
                tl = "" if p.obj.truth_label is None else int(p.obj.truth_label)
                wr.writerow([r.t, k, p.obj.kind, p.map_label,
                             *(repr(float(v)) for v in (p.p_top, x1, y1, x2, y2)), raw, tl])
    with open(d / "recognition_counts.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(COUNT_COLUMNS)
        for r in run.steps:
            wr.writerow([r.t, *r.raw, *r.map_based, *r.slamer])


def read_run(directory) -> tuple[list[tuple[int, Pose2D]], list[dict], list[dict]]:
    d = Path(directory)
    with open(d / "estimates.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or list(rows[0]) != ESTIMATE_COLUMNS:
        raise ValueError(f"{d / 'estimates.csv'}: unexpected columns")
    est = [(int(r["t"]), Pose2D(float(r["x_est"]), float(r["y_est"]), float(r["theta_est"]))) for r in rows]
    objs, counts = [], []
    if (d / "objects.csv").exists():
        with open(d / "objects.csv", newline="") as fh:
            objs = list(csv.DictReader(fh))
    if (d / "recognition_counts.csv").exists():
        with open(d / "recognition_counts.csv", newline="") as fh:
            counts = [{k: int(v) for k, v in r.items()} for r in csv.DictReader(fh)]
    return est, objs, counts


# -- evaluation ---------------------------------------------------------------

def step_errors(estimates: Sequence[Pose2D], truth_poses: Sequence[Pose2D]) -> tuple[np.ndarray, np.ndarray]:
    if len(estimates) != len(truth_poses):
        raise ValueError("estimate and truth lengths differ")
    errs = np.array([pose_error(e, t) for e, t in zip(estimates, truth_poses)]).reshape(-1, 2)
    return errs[:, 0], errs[:, 1]


def accuracy_series(counts: Sequence[tuple[int, int]]) -> np.ndarray:
    """Per-step percentages, skipping steps with nothing to evaluate."""
    return np.array([100.0 * c / n for c, n in counts if n > 0])


@dataclass
class RunSummary:
    mode: str
    seed: int
    pos_cm: np.ndarray
    ang_deg: np.ndarray
    raw_pct: np.ndarray
    map_pct: np.ndarray
    slamer_pct: np.ndarray

    @property
    def errors(self) -> ErrorStats:
        return ErrorStats.from_series(self.pos_cm, self.ang_deg)

    @property
    def mean_position_error_m(self) -> float:
        return float(self.pos_cm.mean()) / 100.0


def summarize(run: RunResult, truth: ScenarioTruth) -> RunSummary:
    pos, ang = step_errors([r.estimate for r in run.steps], truth.poses)
    return RunSummary(run.mode, run.seed, pos, ang,
                      accuracy_series([r.raw for r in run.steps]),
                      accuracy_series([r.map_based for r in run.steps]),
                      accuracy_series([r.slamer for r in run.steps]))


def summarize_files(directory, truth: ScenarioTruth, mode: str, seed: int) -> RunSummary:
    est, _, counts = read_run(directory)
    pos, ang = step_errors([e for _, e in est], truth.poses[:len(est)])
    return RunSummary(mode, seed, pos, ang,
                      accuracy_series([(c["raw_correct"], c["raw_total"]) for c in counts]),
                      accuracy_series([(c["map_correct"], c["map_total"]) for c in counts]),
                      accuracy_series([(c["slamer_correct"], c["slamer_total"]) for c in counts]))


def _rec_stats(pct: np.ndarray) -> RecognitionStats | None:
    return RecognitionStats.from_series(pct) if len(pct) else None


def table_rows(summaries: Sequence[RunSummary]) -> tuple[list[dict], list[dict]]:
    """Error table (one row per run plus a pooled row per mode) and the
    recognition table (raw / map-based / SLAMER accuracy per run and pooled)."""
    rows, rec_rows = [], []
    modes = list(dict.fromkeys(s.mode for s in summaries))
    for mode in modes:
        group = [s for s in summaries if s.mode == mode]
        for s in group:
            rows.append(table_row(mode, s.seed, s.errors,
                                  _rec_stats(s.slamer_pct) if mode == "slamer" else None))
        pos = np.concatenate([s.pos_cm for s in group])
        ang = np.concatenate([s.ang_deg for s in group])
        sl = np.concatenate([s.slamer_pct for s in group])
        rows.append(table_row(mode, "all", ErrorStats.from_series(pos, ang),
                              _rec_stats(sl) if mode == "slamer" else None))
    for mode in modes:
        if mode == "lfm":
            continue
        group = [s for s in summaries if s.mode == mode]
        for attr, name in (("raw_pct", "raw"), ("map_pct", "map_based"), ("slamer_pct", "slamer")):
            if name == "slamer" and mode != "slamer":
                continue
            label = f"{mode}:{name}"
            for s in group:
                st = _rec_stats(getattr(s, attr))
                if st is not None:
                    rec_rows.append({"method": label, "seed": s.seed, **vars(st)})
            pooled = np.concatenate([getattr(s, attr) for s in group])
            if len(pooled):
                rec_rows.append({"method": label, "seed": "all", **vars(RecognitionStats.from_series(pooled))})
    return rows, rec_rows
