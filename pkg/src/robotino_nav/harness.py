"""Waypoint navigation experiments and scale-factor calibration.

An experiment drives one or three robots through randomly generated waypoint
paths on the field.  Each robot runs its own localization, global planner and
MPPI controller; in multi-robot runs the other robots are fed to the
controller as dynamic obstacles.  Every random draw is derived from the
configured seed, so a (config, seed) pair fixes every output byte.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .costmap import Costmap, build_costmap
from .kinematics import BodyTwist, RobotGeometry
from .localization import LocalizationConfig, Localizer, build_likelihood_field
from .maps import data_path, load_bundled_map
from .mppi import DynamicObstacle, MppiController, MppiParams, ProgressChecker, spin_recovery
from .odometry import OdometrySource, Pose2D, wrap_angle
from .planners import NoPathError, PlannedPath, plan
from .world import SimConfig, World, WorldMap

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "E1"
    map: str = "default_map.json"
    robots: int = 1
    paths_per_experiment: int = 5
    waypoints_per_path: int = 4
    repetitions: int = 5
    seed: int = 0
    output: str = "out"
    leg_timeout: float = 120.0
    standoff: float = 0.45
    min_spacing: float = 0.8
    planner: str = "thetastar"
    odometry_source: str = "ground_truth"
    obstacle_noise: float = 0.02  # std of the other robots' reported positions (m)
    trajectory_every: int = 2  # control ticks between trajectory samples
    geometry: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)
    costmap: dict = field(default_factory=dict)
    planning_costmap: dict = field(default_factory=lambda: {"robot_radius": 0.33, "inflation_radius": 0.7})
    controller: dict = field(default_factory=dict)
    localization: dict = field(default_factory=dict)
    base_dir: str = "."

    def __post_init__(self):
        for name in ("robots", "paths_per_experiment", "repetitions", "trajectory_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.waypoints_per_path < 2:
            raise ConfigError("waypoints_per_path must be >= 2")
        if self.leg_timeout <= 0:
            raise ConfigError("leg_timeout must be positive")
        OdometrySource(self.odometry_source)

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | Path = ".") -> "ExperimentConfig":
        known = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data, base_dir=str(base_dir))

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("base_dir")
        return out

    def load_map(self) -> WorldMap:
        return resolve_map(self.map, self.base_dir)


def resolve_map(name: str, base_dir: str | Path = ".") -> WorldMap:
    """A map file path (absolute or relative to ``base_dir``) or the name of a bundled map."""
    candidate = Path(base_dir) / name
    if candidate.is_file():
        return WorldMap.from_dict(json.loads(candidate.read_text()))
    if data_path(name).is_file():
        return load_bundled_map(name)
    raise ConfigError(f"map not found: {name}")


def load_bundled_config(name: str) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(data_path(name).read_text()))


@dataclass
class RunRecord:
    experiment: str
    path_id: int
    repetition: int
    robot_id: int
    leg_starts: list[float] = field(default_factory=list)
    leg_times: list[float] = field(default_factory=list)
    reached: list[bool] = field(default_factory=list)
    # true-pose position and heading error when each leg ended
    arrival_errors: list[tuple[float, float]] = field(default_factory=list)
    collisions: int = 0
    recoveries: int = 0
    waypoints: list[Pose2D] = field(default_factory=list)
    trajectory: np.ndarray = field(default_factory=lambda: np.zeros((0, 7)))  # t, x, y, theta, est x, y, theta

    @property
    def total_time(self) -> float:
        return float(sum(self.leg_times))

    @property
    def failures(self) -> int:
        return sum(not r for r in self.reached)

    @property
    def key(self) -> tuple[str, int, int, int]:
        return self.experiment, self.path_id, self.repetition, self.robot_id


# ---------------------------------------------------------------- waypoints

def side_waypoints(world_map: WorldMap, standoff: float = 0.45) -> list[Pose2D]:
    """One pose per machine side: ``standoff`` out from the side centre, facing the machine."""
    poses = []
    for m in world_map.machines:
        for centre, normal, _ in m.sides():
            p = centre + standoff * normal
            poses.append(Pose2D(float(p[0]), float(p[1]), math.atan2(-normal[1], -normal[0])).normalized())
    return poses


def generate_waypoints(world_map: WorldMap, rng: np.random.Generator, n: int, *, standoff: float = 0.45,
                       min_spacing: float = 0.8, costmap: Costmap | None = None,
                       avoid: Sequence[Pose2D] = (), budget: int = 1000) -> list[Pose2D]:
    """``n`` waypoints at uniformly drawn machine sides.

    A draw is rejected if it is lethal in ``costmap`` or closer than
    ``min_spacing`` to an already chosen waypoint or to any pose in ``avoid``.
    """
    if not world_map.machines:
        raise ConfigError("map has no machines")
    candidates = side_waypoints(world_map, standoff)
    chosen: list[Pose2D] = []
    draws = 0
    while len(chosen) < n:
        if draws >= budget:
            raise ConfigError(f"could not place {n} waypoints within {budget} draws")
        draws += 1
        pose = candidates[int(rng.integers(len(candidates)))]
        if costmap is not None and costmap.is_lethal_at(pose.x, pose.y):
            continue
        if any(math.hypot(pose.x - q.x, pose.y - q.y) < min_spacing for q in (*chosen, *avoid)):
            continue
        chosen.append(pose)
    return chosen


# ------------------------------------------------------------------ running

@dataclass
class Event:
    t: float
    robot: int
    kind: str
    detail: str = ""


@dataclass
class TrialLog:
    """Per-run artifacts besides the records themselves."""

    path_id: int
    repetition: int
    events: list[Event] = field(default_factory=list)
    world_events: list = field(default_factory=list)  # WorldEvent
    odometry: list[tuple] = field(default_factory=list)  # t, robot, x, y, theta, source
    localization: list[tuple] = field(default_factory=list)  # t, robot, est xyz, true xyz, cov trace
    paths: list[tuple] = field(default_factory=list)  # robot, leg, plan, index, x, y


@dataclass
class Stack:
    """Everything one robot needs to drive itself through a waypoint path."""

    robot_id: int
    localizer: Localizer
    controller: MppiController
    record: RunRecord
    progress: ProgressChecker = field(default_factory=ProgressChecker)
    target: int = 1  # index of the waypoint being driven to
    leg_start: float = 0.0
    path: PlannedPath | None = None
    script: list[BodyTwist] = field(default_factory=list)
    spin_direction: int = 1
    done: bool = False
    in_contact: bool = False


@dataclass
class Setup:
    """Derived objects shared by every run of an experiment."""

    config: ExperimentConfig
    world_map: WorldMap
    geometry: RobotGeometry
    sim: SimConfig
    control_costmap: Costmap
    planning_costmap: Costmap
    params: MppiParams
    localization: LocalizationConfig
    likelihood: object

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "Setup":
        world_map = cfg.load_map()
        control = build_costmap(world_map, **cfg.costmap)
        planning_kw = {"resolution": control.resolution, **cfg.planning_costmap}
        loc = LocalizationConfig.from_config(cfg.localization)
        return cls(
            config=cfg,
            world_map=world_map,
            geometry=RobotGeometry.from_config(cfg.geometry),
            sim=SimConfig.from_config(cfg.sim),
            control_costmap=control,
            planning_costmap=build_costmap(world_map, **planning_kw),
            params=MppiParams.from_config(cfg.controller),
            localization=loc,
            likelihood=build_likelihood_field(world_map, loc.field_resolution, sigma_hit=loc.sigma_hit,
                                              z_hit=loc.z_hit, z_rand=loc.z_rand),
        )


def path_waypoints(setup: Setup, path_id: int) -> list[list[Pose2D]]:
    """Waypoints of every robot for one path; each robot has its own random stream."""
    cfg = setup.config
    out: list[list[Pose2D]] = []
    for robot in range(cfg.robots):
        rng = np.random.default_rng([cfg.seed, path_id, robot])
        taken = [p for other in out for p in other]
        out.append(generate_waypoints(setup.world_map, rng, cfg.waypoints_per_path, standoff=cfg.standoff,
                                      min_spacing=cfg.min_spacing, costmap=setup.planning_costmap, avoid=taken))
    return out


def _nearest_free(costmap: Costmap, x: float, y: float) -> tuple[float, float] | None:
    free = np.argwhere(~costmap.lethal)
    if len(free) == 0:
        return None
    cx = costmap.origin[0] + (free[:, 1] + 0.5) * costmap.resolution
    cy = costmap.origin[1] + (free[:, 0] + 0.5) * costmap.resolution
    i = int(np.argmin(np.hypot(cx - x, cy - y)))
    return float(cx[i]), float(cy[i])


def plan_leg(costmap: Costmap, start: Pose2D, goal: Pose2D, planner: str) -> PlannedPath:
    """Plan from the estimate; a start inside the clearance zone is first moved to the nearest free cell."""
    if not costmap.is_lethal_at(start.x, start.y):
        return plan(costmap, (start.x, start.y), (goal.x, goal.y), planner)
    free = _nearest_free(costmap, start.x, start.y)
    if free is None:
        raise NoPathError("costmap has no free cell")
    tail = plan(costmap, free, (goal.x, goal.y), planner)
    points = np.vstack([[start.x, start.y], tail.points])
    return PlannedPath(points, tail.planner_id, cost=tail.cost + math.dist((start.x, start.y), free),
                       expansions=tail.expansions)


def _world_velocity(pose: Pose2D, twist: BodyTwist) -> tuple[float, float]:
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    return c * twist.vx - s * twist.vy, s * twist.vx + c * twist.vy


class Trial:
    """One repetition of one path with all robots driving simultaneously."""

    def __init__(self, setup: Setup, path_id: int, repetition: int, waypoints: Sequence[Sequence[Pose2D]]):
        cfg = setup.config
        self.setup = setup
        self.cfg = cfg
        base = [cfg.seed, path_id, repetition]
        self.world = World(setup.world_map, setup.geometry, [wps[0] for wps in waypoints], setup.sim, seed=base)
        self.noise_rng = np.random.default_rng(base + [len(waypoints), 0])
        self.trial_log = TrialLog(path_id, repetition)
        self.events = self.trial_log.events
        self.plans = 0
        self.stacks = [
            Stack(
                robot_id=i,
                localizer=Localizer(wps[0], setup.likelihood, setup.localization,
                                    np.random.default_rng(base + [i, 2])),
                controller=MppiController(setup.params, setup.control_costmap, np.random.default_rng(base + [i, 1]),
                                          robot_radius=setup.sim.footprint_radius),
                record=RunRecord(cfg.experiment, path_id, repetition, i, waypoints=list(wps)),
            )
            for i, wps in enumerate(waypoints)
        ]

    def log(self, t: float, robot: int, kind: str, detail: str = "") -> None:
        self.events.append(Event(t, robot, kind, detail))

    def dispatch(self, st: Stack, t: float) -> None:
        goal = st.record.waypoints[st.target]
        st.leg_start = t
        st.script = []
        st.progress.reset()
        self.log(t, st.robot_id, "dispatch", f"leg={st.target} x={goal.x:.3f} y={goal.y:.3f}")
        self.replan(st, t)

    def replan(self, st: Stack, t: float) -> None:
        goal = st.record.waypoints[st.target]
        try:
            st.path = plan_leg(self.setup.planning_costmap, st.localizer.estimate, goal, self.cfg.planner)
        except NoPathError as exc:
            st.path = None
            self.log(t, st.robot_id, "no_path", str(exc))
            return
        st.controller.set_path(st.path, goal)
        st.controller.reset_sequence()
        self.plans += 1
        self.trial_log.paths.extend((st.robot_id, st.target, self.plans, i, float(x), float(y))
                                    for i, (x, y) in enumerate(st.path.points))
        self.log(t, st.robot_id, "plan", f"length={st.path.length:.3f}")

    def finish_leg(self, st: Stack, t: float, reached: bool) -> None:
        st.record.leg_starts.append(st.leg_start)
        st.record.leg_times.append(t - st.leg_start)
        st.record.reached.append(reached)
        truth, goal = self.world.robots[st.robot_id].pose, st.record.waypoints[st.target]
        err = (truth.distance_to(goal), abs(wrap_angle(truth.theta - goal.theta)))
        st.record.arrival_errors.append(err)
        self.log(t, st.robot_id, "reached" if reached else "timeout",
                 f"leg={st.target} err_xy={err[0]:.4f} err_theta={err[1]:.4f}")
        st.target += 1
        st.controller.clear()
        if st.target >= len(st.record.waypoints):
            st.done = True
            st.path = None
        else:
            self.dispatch(st, t)

    def obstacles_for(self, robot_id: int) -> list[DynamicObstacle]:
        out = []
        sigma = self.cfg.obstacle_noise
        for other in self.world.robots:
            if other.robot_id == robot_id:
                continue
            nx, ny = self.noise_rng.normal(0.0, sigma, 2) if sigma > 0 else (0.0, 0.0)
            vx, vy = _world_velocity(other.pose, other.twist)
            out.append(DynamicObstacle(other.pose.x + float(nx), other.pose.y + float(ny), vx, vy,
                                       other.footprint_radius))
        return out

    def control(self, st: Stack, t: float, tick: int) -> BodyTwist:
        """One control tick of one robot's navigation state machine."""
        if t - st.leg_start >= self.cfg.leg_timeout:
            self.finish_leg(st, t, False)
            if st.done:
                return BodyTwist()
        if st.script:
            cmd = st.script.pop(0)
            if not st.script:
                self.log(t, st.robot_id, "replan", "after recovery")
                self.replan(st, t)
            return cmd
        if st.path is None:
            # planning failed; retry once per second
            if tick % round(self.setup.params.frequency) == 0:
                self.replan(st, t)
            return BodyTwist()
        est = st.localizer.estimate
        cmd = st.controller.compute_command(est, self.obstacles_for(st.robot_id))
        if st.controller.goal_reached:
            self.finish_leg(st, t, True)
            return BodyTwist()
        if not st.progress.update(t, est.x, est.y):
            st.record.recoveries += 1
            self.log(t, st.robot_id, "recovery", f"spin={'+' if st.spin_direction > 0 else '-'}")
            st.script = spin_recovery(self.setup.params, math.pi / 2, st.spin_direction)
            st.spin_direction = -st.spin_direction
            st.progress.reset()
            st.controller.reset_sequence()
            return st.script.pop(0)
        return cmd

    def sample(self, t: float, samples: list[list[tuple]]) -> None:
        log = self.trial_log
        for st in self.stacks:
            i = st.robot_id
            truth, est = self.world.robots[i].pose, st.localizer.estimate
            samples[i].append((t, *truth, *est))
            wheel = self.world.wheel_odometry[i].pose
            log.odometry.append((t, i, *wheel, OdometrySource.WHEEL_ENCODERS.value))
            log.odometry.append((t, i, *truth, OdometrySource.GROUND_TRUTH.value))
            log.localization.append((t, i, *est, *truth, st.localizer.cov_trace))

    def run(self) -> tuple[list[RunRecord], TrialLog]:
        cfg, world = self.cfg, self.world
        dt = self.setup.sim.dt * self.setup.sim.act_every
        use_truth = cfg.odometry_source == OdometrySource.GROUND_TRUTH.value
        samples: list[list[tuple]] = [[] for _ in self.stacks]
        for st in self.stacks:
            self.dispatch(st, 0.0)
        tick = 0
        while not all(st.done for st in self.stacks):
            t = world.t
            if tick % cfg.trajectory_every == 0:
                self.sample(t, samples)
            commands = [BodyTwist() if st.done else self.control(st, t, tick) for st in self.stacks]
            for st, cmd in zip(self.stacks, commands):
                world.command(st.robot_id, cmd)
            for st, s in zip(self.stacks, world.step()):
                st.localizer.on_odometry((s.truth_odometry if use_truth else s.wheel_odometry).twist, dt)
                if s.imu is not None:
                    st.localizer.on_imu(s.imu)
                if s.scan is not None:
                    st.localizer.on_scan(s.scan)
                if s.collided and not st.in_contact:
                    st.record.collisions += 1
                st.in_contact = s.collided
            tick += 1
        self.sample(world.t, samples)
        for st in self.stacks:
            st.record.trajectory = np.array(samples[st.robot_id], dtype=float)
        self.trial_log.world_events = list(world.events)
        for e in world.events:
            self.log(e.step * self.setup.sim.dt, e.robot_id, e.event, e.details)
        self.events.sort(key=lambda e: (round(e.t, 9), e.robot))
        return [st.record for st in self.stacks], self.trial_log


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   progress: bool = False) -> tuple[list[RunRecord], list[TrialLog]]:
    """Run every path × repetition; writes all artifacts when ``out_dir`` is given."""
    setup = Setup.from_config(cfg)
    records: list[RunRecord] = []
    logs: list[TrialLog] = []
    for path_id in range(1, cfg.paths_per_experiment + 1):
        waypoints = path_waypoints(setup, path_id)
        for rep in range(1, cfg.repetitions + 1):
            recs, trial_log = Trial(setup, path_id, rep, waypoints).run()
            records.extend(recs)
            logs.append(trial_log)
            if progress:
                times = " ".join(f"{r.total_time:.1f}" for r in recs)
                log.info("%s path %d rep %d: run time %s s", cfg.experiment, path_id, rep, times)
    records.sort(key=lambda r: r.key)
    if out_dir is not None:
        write_outputs(records, logs, cfg, setup.world_map, out_dir)
    return records, logs


# ------------------------------------------------------------------ outputs

TIMING_COLUMNS = ["experiment", "path", "rep", "robot", "leg", "t_start", "t_end", "duration", "reached"]
TRAJECTORY_COLUMNS = ["t", "robot", "x", "y", "theta", "est_x", "est_y", "est_theta"]
EVENT_COLUMNS = ["t", "robot", "kind", "detail"]
LOCALIZATION_COLUMNS = ["t", "robot_id", "est_x", "est_y", "est_theta", "true_x", "true_y", "true_theta",
                        "cov_trace"]
RUN_COLUMNS = ["experiment", "path", "rep", "robot", "total_time", "legs_reached", "legs_failed", "collisions",
               "recoveries"]


def _f(v: float) -> str:
    return f"{v:.6f}"


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def timing_rows(records: Iterable[RunRecord]) -> list[list]:
    rows = []
    for r in records:
        for leg, (start, dur, ok) in enumerate(zip(r.leg_starts, r.leg_times, r.reached), start=1):
            rows.append([r.experiment, r.path_id, r.repetition, r.robot_id, leg, _f(start), _f(start + dur),
                         _f(dur), int(ok)])
    return rows


def write_outputs(records: Sequence[RunRecord], logs: Sequence[TrialLog], cfg: ExperimentConfig,
                  world_map: WorldMap, out_dir: str | Path) -> None:
    """Top-level tables, one directory of per-run CSVs per path × repetition, SVG plots."""
    from .plotting import plot_paths

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    _write_csv(out / "timings.csv", TIMING_COLUMNS, timing_rows(records))
    _write_csv(out / "runs.csv", RUN_COLUMNS, [
        [r.experiment, r.path_id, r.repetition, r.robot_id, _f(r.total_time), len(r.reached) - r.failures,
         r.failures, r.collisions, r.recoveries] for r in records])
    _write_csv(out / "waypoints.csv", ["path", "robot", "index", "x", "y", "theta"], sorted({
        (r.path_id, r.robot_id, i, _f(p.x), _f(p.y), _f(p.theta)) for r in records
        for i, p in enumerate(r.waypoints)}))
    by_run: dict[tuple[int, int], list[RunRecord]] = {}
    for r in records:
        by_run.setdefault((r.path_id, r.repetition), []).append(r)
    for trial_log in sorted(logs, key=lambda g: (g.path_id, g.repetition)):
        key = (trial_log.path_id, trial_log.repetition)
        run_dir = out / "runs" / f"path{key[0]:02d}_rep{key[1]:02d}"
        rows = [[_f(s[0]), r.robot_id, *(_f(v) for v in s[1:])] for r in by_run.get(key, []) for s in r.trajectory]
        rows.sort(key=lambda row: (float(row[0]), row[1]))
        _write_csv(run_dir / "trajectories.csv", TRAJECTORY_COLUMNS, rows)
        _write_csv(run_dir / "events.csv", EVENT_COLUMNS,
                   [[_f(e.t), e.robot, e.kind, e.detail] for e in trial_log.events])
        _write_csv(run_dir / "world_events.csv", ["step", "robot_id", "event", "details"],
                   [[e.step, e.robot_id, e.event, e.details] for e in trial_log.world_events])
        _write_csv(run_dir / "odometry.csv", ["t", "robot", "x", "y", "theta", "source"],
                   [[_f(t), i, _f(x), _f(y), _f(th), src] for t, i, x, y, th, src in trial_log.odometry])
        _write_csv(run_dir / "localization.csv", LOCALIZATION_COLUMNS,
                   [[_f(row[0]), row[1], *(_f(v) for v in row[2:])] for row in trial_log.localization])
        _write_csv(run_dir / "paths.csv", ["robot_id", "leg", "plan", "index", "x", "y"],
                   [[*row[:4], _f(row[4]), _f(row[5])] for row in trial_log.paths])
    plot_paths(records, world_map, out / "plots")
    write_summary(summarize(records), out / "summary.csv")


def load_records(in_dir: str | Path) -> list[RunRecord]:
    """Rebuild records (without trajectories) from a run directory's timings and run tables."""
    in_dir = Path(in_dir)
    records: dict[tuple, RunRecord] = {}
    with open(in_dir / "timings.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["experiment"], int(row["path"]), int(row["rep"]), int(row["robot"]))
            rec = records.setdefault(key, RunRecord(*key))
            rec.leg_starts.append(float(row["t_start"]))
            rec.leg_times.append(float(row["duration"]))
            rec.reached.append(row["reached"] == "1")
    runs = in_dir / "runs.csv"
    if runs.is_file():
        with open(runs, newline="") as fh:
            for row in csv.DictReader(fh):
                key = (row["experiment"], int(row["path"]), int(row["rep"]), int(row["robot"]))
                if key in records:
                    records[key].collisions = int(row["collisions"])
                    records[key].recoveries = int(row["recoveries"])
    if not records:
        raise ConfigError(f"no records in {in_dir}")
    return [records[k] for k in sorted(records)]


# ------------------------------------------------------------------ summary

SUMMARY_COLUMNS = ["path", "robot", "runs", "mean_time", "min_time", "max_time", "total_time", "failures",
                   "collisions", "recoveries", "ratio"]


def _mean_total(records: Sequence[RunRecord]) -> float:
    return sum(r.total_time for r in records) / len(records)


def summarize(records: Sequence[RunRecord], baseline: Sequence[RunRecord] | None = None) -> list[dict]:
    """Per path and robot: mean/min/max run time, summed time and failure counts.

    A row with path "all" per robot carries the grand totals.  With a
    baseline, ``ratio`` is this set's mean run time over the baseline's for
    the same path and robot (falling back to the baseline's robot 0, so a
    three-robot set can be compared against a single-robot one).
    """
    if not records:
        raise ValueError("no records to summarize")
    groups: dict[tuple[int, int], list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.path_id, r.robot_id), []).append(r)
    base_groups: dict[tuple, list[RunRecord]] = {}
    for r in baseline or ():
        base_groups.setdefault((r.path_id, r.robot_id), []).append(r)
        base_groups.setdefault(("all", r.robot_id), []).append(r)

    def ratio(path, robot, recs):
        if baseline is None:
            return None
        base = base_groups.get((path, robot)) or base_groups.get((path, 0))
        if not base:
            return None
        ref = _mean_total(base) if path != "all" else _per_path_sum(base)
        mine = _mean_total(recs) if path != "all" else _per_path_sum(recs)
        return mine / ref if ref > 0 else None

    rows = []
    for (path, robot), recs in sorted(groups.items()):
        rows.append(_summary_row(path, robot, recs, ratio(path, robot, recs)))
    for robot in sorted({r.robot_id for r in records}):
        recs = [r for r in records if r.robot_id == robot]
        row = _summary_row("all", robot, recs, ratio("all", robot, recs))
        row["mean_time"] = _per_path_sum(recs)
        rows.append(row)
    return rows


def _per_path_sum(records: Sequence[RunRecord]) -> float:
    """Sum over paths of the mean run time, i.e. the expected time to drive every path once."""
    by_path: dict[int, list[RunRecord]] = {}
    for r in records:
        by_path.setdefault(r.path_id, []).append(r)
    return sum(_mean_total(v) for _, v in sorted(by_path.items()))


def _summary_row(path, robot, recs, ratio) -> dict:
    times = [r.total_time for r in recs]
    return {
        "path": path, "robot": robot, "runs": len(recs),
        "mean_time": sum(times) / len(times), "min_time": min(times), "max_time": max(times),
        "total_time": sum(times),
        "failures": sum(r.failures for r in recs),
        "collisions": sum(r.collisions for r in recs),
        "recoveries": sum(r.recoveries for r in recs),
        "ratio": ratio,
    }


def format_summary(rows: Sequence[dict]) -> str:
    def cell(v):
        if v is None:
            return "-"
        return f"{v:.3f}" if isinstance(v, float) else str(v)

    table = [SUMMARY_COLUMNS] + [[cell(row[c]) for c in SUMMARY_COLUMNS] for row in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(SUMMARY_COLUMNS))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in table)


def write_summary(rows: Sequence[dict], path: str | Path) -> None:
    _write_csv(Path(path), SUMMARY_COLUMNS, [
        ["" if row[c] is None else (_f(row[c]) if isinstance(row[c], float) else row[c]) for c in SUMMARY_COLUMNS]
        for row in rows])


# -------------------------------------------------------------- calibration

@dataclass(frozen=True)
class ReferenceRow:
    distance: float  # m
    speed: float  # commanded m/s
    direction_deg: float  # heading of the commanded velocity in the body frame
    reference_time: float  # s

    def __post_init__(self):
        if not self.distance > 0:
            raise ConfigError(f"reference distance must be positive, got {self.distance}")
        if not self.speed > 0:
            raise ConfigError(f"reference speed must be positive, got {self.speed}")
        if not self.reference_time > 0:
            raise ConfigError(f"reference time must be positive, got {self.reference_time}")

    @property
    def twist(self) -> BodyTwist:
        a = math.radians(self.direction_deg)
        return BodyTwist(self.speed * math.cos(a), self.speed * math.sin(a), 0.0)


REFERENCE_COLUMNS = ["distance", "speed", "direction_deg", "reference_time"]


def load_reference(path: str | Path) -> list[ReferenceRow]:
    with open(path, newline="") as fh:
        rows = [ReferenceRow(float(r["distance"]), float(r["speed"]), float(r.get("direction_deg") or 0.0),
                             float(r["reference_time"])) for r in csv.DictReader(fh)]
    if not rows:
        raise ConfigError(f"reference table {path} is empty")
    return rows


def write_reference(rows: Sequence[ReferenceRow], path: str | Path) -> None:
    _write_csv(Path(path), REFERENCE_COLUMNS,
               [[_f(r.distance), _f(r.speed), _f(r.direction_deg), _f(r.reference_time)] for r in rows])


def travel_time(geometry: RobotGeometry, twist: BodyTwist, distance: float, sim: SimConfig = SimConfig(), *,
                seed=0, dt: float = 0.001, max_time: float = 600.0) -> float:
    """Simulated time to cover ``distance`` under a constant command on an open field.

    The crossing time is interpolated between the two straddling steps.
    """
    field_map = WorldMap(machines=(), walls=False)
    sim = replace(sim, dt=dt, act_every=1, scan_every=2**62, imu_every=2**62)
    world = World(field_map, geometry, [Pose2D()], sim, seed=seed)
    prev_t, prev_d = 0.0, 0.0
    while world.t < max_time:
        world.command(0, twist)
        world.step()
        pose = world.robots[0].pose
        d = math.hypot(pose.x, pose.y)
        if d >= distance:
            return prev_t + (world.t - prev_t) * (distance - prev_d) / (d - prev_d)
        prev_t, prev_d = world.t, d
    raise RuntimeError(f"robot did not cover {distance} m within {max_time} s")


@dataclass(frozen=True)
class CalibrationResult:
    scale_factor: float
    ratios: tuple[float, ...]  # simulated time at scale factor 1 over reference time, per row and trial
    predicted_times: tuple[float, ...]  # per row, with the calibrated scale factor
    max_relative_error: float


def calibrate_scale_factor(reference: Sequence[ReferenceRow], geometry: RobotGeometry = RobotGeometry(),
                           sim: SimConfig = SimConfig(), *, trials: int = 3, seed: int = 0,
                           dt: float = 0.001) -> CalibrationResult:
    """Scale factor that makes simulated travel times match the reference.

    Simulated speed is proportional to the scale factor (it multiplies every
    motor value), so a run at scale factor 1 taking t1 where the reference
    takes t_ref implies scale factor t1 / t_ref.  The estimate is the mean
    of that ratio over rows and trials.
    """
    if not reference:
        raise ConfigError("reference table is empty")
    unit = geometry.with_scale_factor(1.0)
    ratios = []
    for i, row in enumerate(reference):
        for trial in range(trials):
            t1 = travel_time(unit, row.twist, row.distance, sim, seed=[seed, i, trial], dt=dt)
            ratios.append(t1 / row.reference_time)
    sc = float(np.mean(ratios))
    calibrated = geometry.with_scale_factor(sc)
    predicted = [travel_time(calibrated, row.twist, row.distance, sim, seed=[seed, i, trials], dt=dt)
                 for i, row in enumerate(reference)]
    err = max(abs(p - r.reference_time) / r.reference_time for p, r in zip(predicted, reference))
    return CalibrationResult(sc, tuple(ratios), tuple(predicted), float(err))


def make_reference(geometry: RobotGeometry, runs: Sequence[tuple[float, float, float]], sim: SimConfig = SimConfig(),
                   *, seed: int = 0, dt: float = 0.001) -> list[ReferenceRow]:
    """Reference table from the simulator itself: (distance, speed, direction_deg) per row."""
    rows = []
    for i, (distance, speed, direction) in enumerate(runs):
        probe = ReferenceRow(distance, speed, direction, 1.0)
        t = travel_time(geometry, probe.twist, distance, sim, seed=[seed, 1000 + i], dt=dt)
        rows.append(replace(probe, reference_time=t))
    return rows
