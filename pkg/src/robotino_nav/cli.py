"""Command line entry point: ``robotino-nav {run,calibrate,make-reference,plan-demo,summarize}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .costmap import build_costmap
from .harness import (
    ConfigError,
    ExperimentConfig,
    calibrate_scale_factor,
    format_summary,
    load_records,
    load_reference,
    make_reference,
    run_experiment,
    summarize,
    write_reference,
    write_summary,
)
from .kinematics import RobotGeometry
from .maps import data_path
from .planners import PLANNERS, NoPathError, plan, segment_count
from .plotting import planner_svg
from .world import SimConfig, WorldMap

DEFAULT_REFERENCE_RUNS = [
    (1.0, 0.2, 0.0), (2.0, 0.5, 0.0), (3.0, 0.7, 0.0),
    (1.5, 0.3, 90.0), (2.5, 0.6, 45.0), (2.0, 0.4, 180.0),
]


def _load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    if not p.is_file() and data_path(path).is_file():
        return ExperimentConfig.from_dict(json.loads(data_path(path).read_text()))
    return ExperimentConfig.from_file(p)


def cmd_run(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out or cfg.output)
    if args.out is not None:
        cfg = replace(cfg, output=str(out))
    records, _ = run_experiment(cfg, out, progress=True)
    print(format_summary(summarize(records)))
    failed = sum(r.failures for r in records)
    collisions = sum(r.collisions for r in records)
    print(f"{len(records)} records, {failed} failed legs, {collisions} collisions -> {out}")
    return 0


def cmd_calibrate(args) -> int:
    cfg = _load_config(args.config)
    reference = load_reference(args.reference)
    geometry = RobotGeometry.from_config(cfg.geometry)
    sim = SimConfig.from_config(cfg.sim)
    result = calibrate_scale_factor(reference, geometry, sim, trials=args.trials, seed=cfg.seed)
    print(f"scale_factor {result.scale_factor:.6g}")
    for row, t in zip(reference, result.predicted_times):
        print(f"  {row.distance:6.3f} m at {row.speed:5.3f} m/s ({row.direction_deg:6.1f} deg): "
              f"reference {row.reference_time:8.4f} s, simulated {t:8.4f} s")
    print(f"max relative time error {result.max_relative_error:.4%}")
    return 0


def cmd_make_reference(args) -> int:
    cfg = _load_config(args.config)
    geometry = RobotGeometry.from_config(cfg.geometry)
    if args.scale_factor is not None:
        geometry = geometry.with_scale_factor(args.scale_factor)
    rows = make_reference(geometry, DEFAULT_REFERENCE_RUNS, SimConfig.from_config(cfg.sim), seed=cfg.seed)
    write_reference(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def load_demo(path: str):
    """A map file that also carries ``start`` and ``goal`` points and optional costmap settings."""
    p = Path(path)
    data = json.loads((p if p.is_file() else data_path(path)).read_text())
    if "start" not in data or "goal" not in data:
        raise ConfigError(f"{path} needs 'start' and 'goal' entries")
    return WorldMap.from_dict(data), tuple(data["start"]), tuple(data["goal"]), data.get("costmap", {})


def cmd_plan_demo(args) -> int:
    world_map, start, goal, cm_cfg = load_demo(args.map)
    costmap = build_costmap(world_map, **cm_cfg)
    names = PLANNERS if args.planner == "all" else (args.planner,)
    paths = []
    for name in names:
        try:
            path = plan(costmap, start, goal, name)
        except NoPathError as exc:
            print(f"{name}: no path ({exc})")
            return 1
        paths.append(path)
        print(f"{name}: length {path.length:.3f} m, {segment_count(path.points)} segments, "
              f"{path.expansions} expansions")
    out = Path(args.out or f"plan_{args.planner}.svg")
    out.write_text(planner_svg(world_map, paths, costmap))
    print(f"wrote {out}")
    return 0


def cmd_summarize(args) -> int:
    records = load_records(args.input)
    baseline = load_records(args.baseline) if args.baseline else None
    rows = summarize(records, baseline)
    print(format_summary(rows))
    if args.out:
        write_summary(rows, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robotino-nav", description=__doc__.split(":")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment and write CSV and SVG outputs")
    p.add_argument("--config", help="experiment JSON file or bundled name (e1.json, e2.json)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory (default: config 'output')")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("calibrate", help="estimate the scale factor from a reference travel-time table")
    p.add_argument("--config", help="experiment JSON file supplying geometry and sim settings")
    p.add_argument("--reference", required=True, help="CSV with distance,speed,direction_deg,reference_time")
    p.add_argument("--trials", type=int, default=3, help="simulated trials per reference row")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("make-reference", help="write a reference travel-time table from the simulator")
    p.add_argument("--config", help="experiment JSON file supplying geometry and sim settings")
    p.add_argument("--scale-factor", type=float, help="override the geometry scale factor")
    p.add_argument("--out", required=True, help="CSV file to write")
    p.set_defaults(func=cmd_make_reference)

    p = sub.add_parser("plan-demo", help="plan on a demo map and write a comparison SVG")
    p.add_argument("--map", default="demo_map.json", help="map JSON with start and goal")
    p.add_argument("--planner", choices=(*PLANNERS, "all"), default="all")
    p.add_argument("--out", help="SVG file to write")
    p.set_defaults(func=cmd_plan_demo)

    p = sub.add_parser("summarize", help="summarize a run directory, optionally against a baseline")
    p.add_argument("--in", dest="input", required=True, help="run output directory")
    p.add_argument("--baseline", help="run output directory to compute time ratios against")
    p.add_argument("--out", help="write the summary table to this CSV file")
    p.set_defaults(func=cmd_summarize)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
