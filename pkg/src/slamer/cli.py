"""Command-line interface.

Exit codes: 0 success, 1 configuration error, 2 runtime/model error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import yaml

from .evaluation import RECOGNITION_COLUMNS, TABLE_COLUMNS, render_svg, write_csv
from .models import MODES
from .pipeline import (ConfigError, load_config, load_map_spec, localize, map_from_spec,
                       read_run, simulate_scenario, summarize, summarize_files, table_rows,
                       write_run)
from .semantic_map import MapFormatError, save_map
from .world_sim import read_truth_log, write_truth_log

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _config(args):
    return load_config(args.config, {"mode": getattr(args, "mode", None)})


def _truth_dir(cfg, args) -> Path:
    return Path(args.truth) if getattr(args, "truth", None) else cfg.out / "truth"


def _load_truth(cfg, args):
    d = _truth_dir(cfg, args)
    if not (d / "truth.csv").exists():
        raise ConfigError(f"no truth log in {d}; run 'simulate' first")
    return read_truth_log(d)


def _run_dir(cfg, mode: str, seed: int) -> Path:
    return cfg.out / f"{mode}_seed{seed}"


def cmd_make_map(args) -> None:
    spec = load_map_spec(args.spec)
    grid = map_from_spec(spec)
    out = Path(args.out) if args.out else Path(args.spec).with_suffix(".map")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_map(grid, out)
    print(f"wrote {out}")


def cmd_simulate(args) -> None:
    cfg = _config(args)
    truth = simulate_scenario(cfg)
    out = Path(args.out) if args.out else cfg.out / "truth"
    write_truth_log(truth, out)
    print(f"wrote {len(truth)} steps to {out}")


def cmd_localize(args) -> None:
    cfg = _config(args)
    truth = _load_truth(cfg, args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    run = localize(cfg, truth, cfg.mode, seed, args.particles)
    out = Path(args.out) if args.out else _run_dir(cfg, cfg.mode, seed)
    write_run(run, out, cfg.scan.sensor_offset)
    print(f"wrote {len(run.steps)} steps to {out}")


def _modes(args, cfg) -> list[str]:
    return args.modes or [cfg.mode]


def _seeds(args, cfg) -> list[int]:
    return args.seeds or cfg.seeds


def _write_tables(summaries, out: Path) -> None:
    rows, rec_rows = table_rows(summaries)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(rows, TABLE_COLUMNS, out / "table.csv")
    write_csv(rec_rows, RECOGNITION_COLUMNS, out / "recognition.csv")
    print(f"wrote {out / 'table.csv'} ({len(rows)} rows)")


def cmd_evaluate(args) -> None:
    cfg = load_config(args.config)
    truth = _load_truth(cfg, args)
    summaries = []
    for mode in _modes(args, cfg):
        for seed in _seeds(args, cfg):
            d = _run_dir(cfg, mode, seed)
            if not (d / "estimates.csv").exists():
                raise ConfigError(f"missing run outputs in {d}; run 'localize' first")
            summaries.append(summarize_files(d, truth, mode, seed))
    _write_tables(summaries, Path(args.out) if args.out else cfg.out)


def cmd_render(args) -> None:
    cfg = _config(args)
    truth = _load_truth(cfg, args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    d = _run_dir(cfg, cfg.mode, seed)
    est, objs, _ = read_run(d) if (d / "estimates.csv").exists() else ([], [], [])
    t_last = max((int(o["t"]) for o in objs), default=None)
    segments = [(int(o["map_label"]), float(o["x1"]), float(o["y1"]), float(o["x2"]), float(o["y2"]))
                for o in objs if args.all_objects or int(o["t"]) == t_last]
    out = Path(args.out) if args.out else d / "render.svg"
    out.parent.mkdir(parents=True, exist_ok=True)
    render_svg(cfg.grid, [truth.initial_pose] + truth.poses, [e for _, e in est], segments, out)
    print(f"wrote {out}")


def cmd_sweep(args) -> None:
    cfg = load_config(args.config)
    if args.modes:
        bad = [m for m in args.modes if m not in MODES]
        if bad:
            raise ConfigError(f"unknown modes {bad}")
    truth = simulate_scenario(cfg)
    out = Path(args.out) if args.out else cfg.out
    summaries = []
    for mode in args.modes or list(MODES):
        for seed in _seeds(args, cfg):
            run = localize(cfg, truth, mode, seed, args.particles)
            write_run(run, out / f"{mode}_seed{seed}", cfg.scan.sensor_offset)
            summaries.append(summarize(run, truth))
    _write_tables(summaries, out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slamer", description="Semantic-map particle-filter localization")
    sub = p.add_subparsers(dest="command", required=True)

    mm = sub.add_parser("make-map", help="rasterise a map spec into a map file")
    mm.add_argument("spec")
    mm.add_argument("--out")
    mm.set_defaults(func=cmd_make_map)

    def common(sp, mode=True, seed=True, particles=False, truth=True):
        sp.add_argument("--config", required=True)
        sp.add_argument("--out")
        if mode:
            sp.add_argument("--mode", choices=MODES)
        if seed:
            sp.add_argument("--seed", type=int)
        if particles:
            sp.add_argument("--particles", type=int)
        if truth:
            sp.add_argument("--truth", help="truth log directory (default OUT/truth)")

    sim = sub.add_parser("simulate", help="write the noise-free truth log")
    common(sim, mode=False, seed=False, truth=False)
    sim.set_defaults(func=cmd_simulate)

    loc = sub.add_parser("localize", help="run the filter for one mode and seed")
    common(loc, particles=True)
    loc.set_defaults(func=cmd_localize)

    ev = sub.add_parser("evaluate", help="error and recognition tables from run outputs")
    common(ev, mode=False, seed=False)
    ev.add_argument("--mode", dest="modes", action="append", choices=MODES)
    ev.add_argument("--seed", dest="seeds", action="append", type=int)
    ev.set_defaults(func=cmd_evaluate)

    rd = sub.add_parser("render", help="SVG of map, trajectories and objects")
    common(rd)
    rd.add_argument("--all-objects", action="store_true", help="draw objects from every step")
    rd.set_defaults(func=cmd_render)

    sw = sub.add_parser("sweep", help="simulate and localize every mode x seed")
    common(sw, mode=False, seed=False, particles=True, truth=False)
    sw.add_argument("--mode", dest="modes", action="append", choices=MODES)
    sw.add_argument("--seed", dest="seeds", action="append", type=int)
    sw.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, MapFormatError, yaml.YAMLError, FileNotFoundError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
