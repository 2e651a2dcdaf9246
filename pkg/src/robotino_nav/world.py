"""Deterministic fixed-step 2D world: field, machines, robots, LIDAR, IMU.

The field is centred on the origin, so x spans [-width/2, width/2] and y
spans [-height/2, height/2].  Robots are discs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .kinematics import BodyTwist, RobotGeometry, WheelSpeeds, forward_kinematics
from .odometry import (
    OdometryState,
    Pose2D,
    ground_truth_odometry,
    integrate_odometry,
    update_from_wheels,
    wrap_angle,
)

# Wheel rad/s produced per commanded motor rpm unit by the simulated drive.
# With the default scale factor the commanded twist is executed exactly.
DRIVE_GAIN = 2.0 * math.pi / (60.0 * 16.0 * 0.009375)

DEFAULT_FOOTPRINT_RADIUS = 0.23


@dataclass(frozen=True)
class Machine:
    id: str
    x: float
    y: float
    theta: float
    length: float
    width: float

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        hl, hw = self.length / 2, self.width / 2
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])

    def distance(self, px, py):
        """Euclidean distance from point(s) to the footprint, 0 inside."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx, dy = np.subtract(px, self.x), np.subtract(py, self.y)
        lx = np.abs(c * dx + s * dy) - self.length / 2
        ly = np.abs(-s * dx + c * dy) - self.width / 2
        return np.hypot(np.maximum(lx, 0.0), np.maximum(ly, 0.0))

    def sides(self) -> list[tuple[np.ndarray, np.ndarray, float]]:
        """(side centre, outward normal, half side length) for the four sides."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        ax, ay = np.array([c, s]), np.array([-s, c])
        centre = np.array([self.x, self.y])
        hl, hw = self.length / 2, self.width / 2
        return [
            (centre + hl * ax, ax, hw),
            (centre + hw * ay, ay, hl),
            (centre - hl * ax, -ax, hw),
            (centre - hw * ay, -ay, hl),
        ]


def _rects_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    for poly in (a, b):
        for i in range(4):
            edge = poly[(i + 1) % 4] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            pa, pb = a @ axis, b @ axis
            if pa.max() <= pb.min() or pb.max() <= pa.min():
                return False
    return True


@dataclass(frozen=True)
class WorldMap:
    width: float = 12.0
    height: float = 6.0
    machines: tuple[Machine, ...] = ()
    walls: bool = True  # border walls block motion and beams

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("field dimensions must be positive")
        hx, hy = self.width / 2, self.height / 2
        corners = [m.corners() for m in self.machines]
        for m, c in zip(self.machines, corners):
            if np.any(np.abs(c[:, 0]) > hx + 1e-9) or np.any(np.abs(c[:, 1]) > hy + 1e-9):
                raise ValueError(f"machine {m.id} leaves the field")
        for i in range(len(corners)):
            for j in range(i + 1, len(corners)):
                if _rects_overlap(corners[i], corners[j]):
                    raise ValueError(f"machines {self.machines[i].id} and {self.machines[j].id} overlap")

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return -self.width / 2, -self.height / 2, self.width / 2, self.height / 2

    def segments(self) -> np.ndarray:
        """All wall and machine edges as rows (x0, y0, x1, y1)."""
        x0, y0, x1, y1 = self.bounds
        border = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
        segs = []
        polys = ([border] if self.walls else []) + [m.corners() for m in self.machines]
        for poly in polys:
            for i in range(4):
                segs.append([*poly[i], *poly[(i + 1) % 4]])
        return np.array(segs, dtype=float).reshape(-1, 4)

    def obstacle_distance(self, px, py):
        """Distance from point(s) to the nearest machine or wall."""
        x0, y0, x1, y1 = self.bounds
        px, py = np.asarray(px, dtype=float), np.asarray(py, dtype=float)
        if self.walls:
            d = np.minimum.reduce([px - x0, x1 - px, py - y0, y1 - py])
        else:
            d = np.full(np.broadcast(px, py).shape, np.inf)
        for m in self.machines:
            d = np.minimum(d, m.distance(px, py))
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "WorldMap":
        machines = tuple(
            Machine(
                id=str(m.get("id", f"M{i + 1}")),
                x=float(m["x"]),
                y=float(m["y"]),
                theta=math.radians(float(m.get("theta_deg", 0.0))),
                length=float(m["length"]),
                width=float(m["width"]),
            )
            for i, m in enumerate(data.get("machines", []))
        )
        return cls(width=float(data.get("width", 12.0)), height=float(data.get("height", 6.0)),
                   machines=machines, walls=bool(data.get("walls", True)))

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "walls": self.walls,
            "machines": [
                {"id": m.id, "x": m.x, "y": m.y, "theta_deg": math.degrees(m.theta), "length": m.length, "width": m.width}
                for m in self.machines
            ],
        }


def load_map(path: str | Path) -> WorldMap:
    with open(path) as fh:
        return WorldMap.from_dict(json.load(fh))


@dataclass(frozen=True)
class RobotState:
    robot_id: int = 0
    pose: Pose2D = Pose2D()
    twist: BodyTwist = BodyTwist()
    footprint_radius: float = DEFAULT_FOOTPRINT_RADIUS
    last_command: tuple[BodyTwist, float] | None = None
    # encoder reading of the last act tick, rpm
    wheel_speeds: WheelSpeeds = WheelSpeeds()
    in_collision: bool = False

    def __post_init__(self):
        if self.footprint_radius <= 0:
            raise ValueError("footprint_radius must be positive")


@dataclass(frozen=True)
class LidarSpec:
    mount: Pose2D = Pose2D()
    fov: float = math.radians(270.0)
    beam_count: int = 271
    max_range: float = 10.0
    min_range: float = 0.05
    noise_sigma: float = 0.01

    def __post_init__(self):
        if self.beam_count < 2:
            raise ValueError("beam_count must be at least 2")
        if not 0 < self.min_range < self.max_range:
            raise ValueError("need 0 < min_range < max_range")

    @property
    def angles(self) -> np.ndarray:
        return np.linspace(-self.fov / 2, self.fov / 2, self.beam_count)


def default_lidars(noise_sigma: float = 0.01) -> tuple[LidarSpec, LidarSpec]:
    """Front-left and back-right diagonal mounts, 270 deg each."""
    return (
        LidarSpec(mount=Pose2D(0.12, 0.12, math.pi / 4), noise_sigma=noise_sigma),
        LidarSpec(mount=Pose2D(-0.12, -0.12, -3 * math.pi / 4), noise_sigma=noise_sigma),
    )


@dataclass(frozen=True)
class Scan:
    ranges: np.ndarray
    angles: np.ndarray
    valid: np.ndarray  # False marks a no-return beam (range = max_range)
    timestamp: float
    mount: Pose2D = Pose2D()


@dataclass(frozen=True)
class MergedScan:
    points: np.ndarray  # (N, 2) robot frame, sorted by bearing
    timestamp: float

    @property
    def angles(self) -> np.ndarray:
        return np.arctan2(self.points[:, 1], self.points[:, 0])

    @property
    def ranges(self) -> np.ndarray:
        return np.hypot(self.points[:, 0], self.points[:, 1])


@dataclass(frozen=True)
class ImuSample:
    yaw_rate: float
    yaw: float
    timestamp: float
    bias: float = 0.0
    sigma: float = 0.0


@dataclass
class SimClock:
    dt: float = 0.05
    step_index: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def t(self) -> float:
        return self.step_index * self.dt

    def advance(self) -> None:
        self.step_index += 1


@dataclass(frozen=True)
class WorldEvent:
    step: int
    robot_id: int
    event: str
    details: str = ""


# ---------------------------------------------------------------- actuation

def apply_command(robot: RobotState, cmd: BodyTwist, now: float) -> RobotState:
    if not all(math.isfinite(v) for v in cmd):
        raise ValueError(f"non-finite command {cmd}")
    return replace(robot, last_command=(BodyTwist(*cmd), now))


def drive_twist(geom: RobotGeometry, motor_rpm: Sequence[float], drive_gain: float = DRIVE_GAIN) -> BodyTwist:
    """Body twist the simulated drive actually produces for the given motor values."""
    surface = np.asarray(motor_rpm, dtype=float) * drive_gain * geom.wheel_radius
    return BodyTwist(*(float(v) for v in geom._k_inv @ surface))


def robot_collides(x: float, y: float, radius: float, world_map: WorldMap | None, others: Iterable[RobotState] = ()) -> bool:
    if world_map is not None:
        x0, y0, x1, y1 = world_map.bounds
        if world_map.walls and (x - radius < x0 or x + radius > x1 or y - radius < y0 or y + radius > y1):
            return True
        for m in world_map.machines:
            if m.distance(x, y) < radius:
                return True
    for o in others:
        if math.hypot(x - o.pose.x, y - o.pose.y) < radius + o.footprint_radius:
            return True
    return False


def contact_with(x: float, y: float, radius: float, world_map: WorldMap | None, others: Iterable[RobotState] = (),
                 tol: float = 1e-3) -> str:
    """What a robot stopped at (x, y) is touching: "wall", "machine", "robot<id>" or ""."""
    if world_map is not None:
        x0, y0, x1, y1 = world_map.bounds
        if world_map.walls and min(x - x0, x1 - x, y - y0, y1 - y) < radius + tol:
            return "wall"
        if any(m.distance(x, y) < radius + tol for m in world_map.machines):
            return "machine"
    for o in others:
        if math.hypot(x - o.pose.x, y - o.pose.y) < radius + o.footprint_radius + tol:
            return f"robot{o.robot_id}"
    return ""


def _move_with_contact(start: Pose2D, target: Pose2D, radius, world_map, others) -> tuple[Pose2D, float]:
    """Largest collision-free fraction of the straight move from start to target."""
    if not robot_collides(target.x, target.y, radius, world_map, others):
        return target, 1.0
    lo, hi = 0.0, 1.0
    dx, dy = target.x - start.x, target.y - start.y
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if robot_collides(start.x + mid * dx, start.y + mid * dy, radius, world_map, others):
            hi = mid
        else:
            lo = mid
    return Pose2D(start.x + lo * dx, start.y + lo * dy, target.theta), lo


def act_tick(
    robot: RobotState,
    geom: RobotGeometry,
    dt: float,
    *,
    world_map: WorldMap | None = None,
    others: Sequence[RobotState] = (),
    slip_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
    drive_gain: float = DRIVE_GAIN,
) -> RobotState:
    """Execute the stored command for one act period, then discard it.

    Without a stored command the robot stands still for this period.
    ``in_collision`` on the result reports whether the move was cut short.
    """
    if robot.last_command is None:
        return replace(robot, twist=BodyTwist(), wheel_speeds=WheelSpeeds(), in_collision=False)
    cmd, _ = robot.last_command
    motor = forward_kinematics(geom, cmd)
    applied = np.asarray(motor, dtype=float)
    if slip_sigma > 0:
        if rng is None:
            raise ValueError("slip noise needs an rng")
        applied = applied * (1.0 + rng.normal(0.0, slip_sigma, 3))
    true_twist = drive_twist(geom, applied, drive_gain)
    target = integrate_odometry(robot.pose, true_twist, dt)
    pose, frac = _move_with_contact(robot.pose, target, robot.footprint_radius, world_map, others)
    twist = true_twist if frac == 1.0 else BodyTwist(true_twist.vx * frac, true_twist.vy * frac, true_twist.omega)
    return replace(robot, pose=pose, twist=twist, wheel_speeds=motor, last_command=None, in_collision=frac < 1.0)


# ------------------------------------------------------------------ sensing

def _ray_hits(origin: np.ndarray, dirs: np.ndarray, segments: np.ndarray, discs: np.ndarray) -> np.ndarray:
    """Distance along each unit ray to the first segment or disc hit (inf if none)."""
    best = np.full(len(dirs), np.inf)
    if len(segments):
        p = segments[:, :2]
        e = segments[:, 2:] - p
        w = p - origin
        dx, dy = dirs[:, 0:1], dirs[:, 1:2]
        denom = dx * e[:, 1] - dy * e[:, 0]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            t = (w[:, 0] * e[:, 1] - w[:, 1] * e[:, 0]) / denom
            u = (w[:, 0] * dy - w[:, 1] * dx) / denom
        ok = (np.abs(denom) > 1e-12) & (t >= 0) & (u >= -1e-12) & (u <= 1 + 1e-12)
        best = np.minimum(best, np.where(ok, t, np.inf).min(axis=1))
    if len(discs):
        oc = origin - discs[:, :2]
        b = dirs @ oc.T
        cc = (oc ** 2).sum(axis=1) - discs[:, 2] ** 2
        disc = b ** 2 - cc
        with np.errstate(invalid="ignore"):
            root = np.sqrt(disc)
        t = np.where(cc > 0, -b - root, -b + root)
        ok = (disc >= 0) & (t >= 0)
        best = np.minimum(best, np.where(ok, t, np.inf).min(axis=1))
    return best


def raycast_scan(
    world: WorldMap,
    robots: Sequence[RobotState],
    sensor_pose: Pose2D,
    spec: LidarSpec,
    rng: np.random.Generator | None = None,
    *,
    timestamp: float = 0.0,
    exclude_robot: int | None = None,
    segments: np.ndarray | None = None,
) -> Scan:
    """Simulate one LIDAR sweep from ``sensor_pose`` (world frame)."""
    local = spec.angles
    bearings = sensor_pose.theta + local
    dirs = np.column_stack([np.cos(bearings), np.sin(bearings)])
    discs = np.array(
        [[r.pose.x, r.pose.y, r.footprint_radius] for r in robots if r.robot_id != exclude_robot], dtype=float
    ).reshape(-1, 3)
    segs = world.segments() if segments is None else segments
    dist = _ray_hits(np.array([sensor_pose.x, sensor_pose.y]), dirs, segs, discs)
    hit = dist <= spec.max_range
    ranges = np.where(hit, dist, spec.max_range)
    if spec.noise_sigma > 0 and rng is not None:
        ranges = np.where(hit, ranges + rng.normal(0.0, spec.noise_sigma, len(ranges)), ranges)
    ranges = np.clip(ranges, spec.min_range, spec.max_range)
    return Scan(ranges=ranges, angles=local, valid=hit, timestamp=timestamp, mount=spec.mount)


def merge_scans(scan_a: Scan, scan_b: Scan, mounts: tuple[Pose2D, Pose2D] | None = None) -> MergedScan:
    """Union of both scans' returns as robot-frame points, sorted by bearing."""
    if scan_a.timestamp != scan_b.timestamp:
        raise ValueError(f"scan timestamps differ: {scan_a.timestamp} vs {scan_b.timestamp}")
    if mounts is None:
        mounts = (scan_a.mount, scan_b.mount)
    parts = []
    for scan, mount in zip((scan_a, scan_b), mounts):
        r = scan.ranges[scan.valid]
        a = scan.angles[scan.valid] + mount.theta
        parts.append(np.column_stack([mount.x + r * np.cos(a), mount.y + r * np.sin(a)]))
    pts = np.concatenate(parts) if parts else np.zeros((0, 2))
    order = np.argsort(np.arctan2(pts[:, 1], pts[:, 0]), kind="stable")
    return MergedScan(points=pts[order], timestamp=scan_a.timestamp)


def imu_sample(robot: RobotState, rng: np.random.Generator | None, *, t: float, bias: float = 0.0, sigma: float = 0.0) -> ImuSample:
    """Gyro reading: yaw drifts with the integrated bias, both channels carry white noise."""
    n_rate = n_yaw = 0.0
    if sigma > 0 and rng is not None:
        n_rate, n_yaw = rng.normal(0.0, sigma, 2)
    return ImuSample(
        yaw_rate=robot.twist.omega + bias + float(n_rate),
        yaw=float(wrap_angle(robot.pose.theta + bias * t + n_yaw)),
        timestamp=t,
        bias=bias,
        sigma=sigma,
    )


# ------------------------------------------------------------ orchestration

@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.05
    act_every: int = 1
    scan_every: int = 2
    imu_every: int = 1
    slip_sigma: float = 0.02
    drive_gain: float = DRIVE_GAIN
    footprint_radius: float = DEFAULT_FOOTPRINT_RADIUS
    lidars: tuple[LidarSpec, ...] = field(default_factory=default_lidars)
    gyro_bias: float = 0.001
    gyro_sigma: float = 0.005

    def __post_init__(self):
        for name in ("act_every", "scan_every", "imu_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if len(self.lidars) not in (1, 2):
            raise ValueError("one or two lidars supported")

    @classmethod
    def from_config(cls, cfg: dict | None) -> "SimConfig":
        cfg = dict(cfg or {})
        range_sigma = float(cfg.pop("range_sigma", 0.01))
        lidar_cfg = cfg.pop("lidars", None)
        if lidar_cfg is None:
            lidars = default_lidars(range_sigma)
        else:
            lidars = tuple(
                LidarSpec(
                    mount=Pose2D(l.get("x", 0.0), l.get("y", 0.0), math.radians(l.get("theta_deg", 0.0))),
                    fov=math.radians(l.get("fov_deg", 270.0)),
                    beam_count=int(l.get("beam_count", 271)),
                    max_range=float(l.get("max_range", 10.0)),
                    min_range=float(l.get("min_range", 0.05)),
                    noise_sigma=float(l.get("noise_sigma", range_sigma)),
                )
                for l in lidar_cfg
            )
        known = {f for f in cls.__dataclass_fields__ if f != "lidars"}
        unknown = set(cfg) - known
        if unknown:
            raise ValueError(f"unknown sim keys: {sorted(unknown)}")
        return cls(lidars=lidars, **cfg)


@dataclass
class RobotSensors:
    wheel_odometry: OdometryState
    truth_odometry: OdometryState
    imu: ImuSample | None = None
    scan: MergedScan | None = None
    collided: bool = False


class World:
    """A single-threaded world stepped at a fixed dt.

    All randomness comes from one generator seeded at construction, so a
    (config, seed) pair fixes every trajectory and sensor reading.
    """

    def __init__(self, world_map: WorldMap, geometry: RobotGeometry, start_poses: Sequence[Pose2D],
                 config: SimConfig = SimConfig(), seed: int | Sequence[int] = 0):
        self.map = world_map
        self.geometry = geometry
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.clock = SimClock(config.dt)
        self.robots = [
            RobotState(robot_id=i, pose=Pose2D(*p).normalized(), footprint_radius=config.footprint_radius)
            for i, p in enumerate(start_poses)
        ]
        for i, r in enumerate(self.robots):
            others = self.robots[:i] + self.robots[i + 1:]
            if robot_collides(r.pose.x, r.pose.y, r.footprint_radius, world_map, others):
                raise ValueError(f"robot {i} starts in collision")
        self.wheel_odometry = [OdometryState(pose=r.pose) for r in self.robots]
        self.events: list[WorldEvent] = []
        self._segments = world_map.segments()

    @property
    def t(self) -> float:
        return self.clock.t

    def command(self, robot_id: int, cmd: BodyTwist) -> None:
        self.robots[robot_id] = apply_command(self.robots[robot_id], cmd, self.clock.t)

    def step(self) -> list[RobotSensors]:
        """Advance one dt; returns per-robot sensor readings for the new time."""
        cfg = self.config
        k = self.clock.step_index
        act = k % cfg.act_every == 0
        if act:
            dt_act = cfg.act_every * cfg.dt
            for i, robot in enumerate(self.robots):
                others = self.robots[:i] + self.robots[i + 1:]
                expired = robot.last_command is None and any(robot.twist)
                moved = act_tick(robot, self.geometry, dt_act, world_map=self.map, others=others,
                                 slip_sigma=cfg.slip_sigma, rng=self.rng, drive_gain=cfg.drive_gain)
                if expired:
                    self.events.append(WorldEvent(k, i, "command_expired", ""))
                if moved.in_collision:
                    what = contact_with(moved.pose.x, moved.pose.y, moved.footprint_radius, self.map, others)
                    self.events.append(WorldEvent(k, i, "collision",
                                                  f"x={moved.pose.x:.3f} y={moved.pose.y:.3f} with={what}"))
                self.robots[i] = moved
                self.wheel_odometry[i] = update_from_wheels(self.wheel_odometry[i], moved.wheel_speeds, self.geometry, dt_act)
        self.clock.advance()
        t = self.clock.t
        out = []
        for i, robot in enumerate(self.robots):
            wheel = replace(self.wheel_odometry[i], timestamp=t)
            self.wheel_odometry[i] = wheel
            sensors = RobotSensors(wheel, ground_truth_odometry(robot, t), collided=act and robot.in_collision)
            if self.clock.step_index % cfg.imu_every == 0:
                sensors.imu = imu_sample(robot, self.rng, t=t, bias=cfg.gyro_bias, sigma=cfg.gyro_sigma)
            if self.clock.step_index % cfg.scan_every == 0:
                sensors.scan = self.scan(i, t)
            out.append(sensors)
        return out

    def scan(self, robot_id: int, t: float | None = None) -> MergedScan:
        robot = self.robots[robot_id]
        t = self.clock.t if t is None else t
        scans = [
            raycast_scan(self.map, self.robots, robot.pose.compose(spec.mount), spec, self.rng,
                         timestamp=t, exclude_robot=robot_id, segments=self._segments)
            for spec in self.config.lidars
        ]
        if len(scans) == 1:
            empty = Scan(np.zeros(0), np.zeros(0), np.zeros(0, bool), t)
            return merge_scans(scans[0], empty)
        return merge_scans(scans[0], scans[1])


def write_event_log(path: str | Path, events: Iterable[WorldEvent]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "robot_id", "event", "details"])
        for e in events:
            w.writerow([e.step, e.robot_id, e.event, e.details])
