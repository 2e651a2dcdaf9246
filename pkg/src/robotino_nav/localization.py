"""Particle-filter localization and an odometry/IMU EKF.

The particle filter uses an omnidirectional motion model (independent noise
on longitudinal, lateral and rotational displacement) and a likelihood-field
measurement model.  The EKF propagates the pose with the Euler odometry step
and corrects the heading with IMU yaw.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .kinematics import BodyTwist
from .odometry import Pose2D, integrate_odometry, wrap_angle
from .world import ImuSample, MergedScan, WorldMap

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ParticleSet:
    poses: np.ndarray  # (N, 3) x, y, theta
    weights: np.ndarray  # (N,), sums to 1

    def __len__(self) -> int:
        return len(self.weights)

    @classmethod
    def uniform_around(cls, center: Pose2D, n: int, xy_spread: float, theta_spread: float,
                       rng: np.random.Generator) -> "ParticleSet":
        poses = np.column_stack([
            center.x + rng.uniform(-xy_spread, xy_spread, n),
            center.y + rng.uniform(-xy_spread, xy_spread, n),
            wrap_angle(center.theta + rng.uniform(-theta_spread, theta_spread, n)),
        ])
        return cls(poses, np.full(n, 1.0 / n))

    @classmethod
    def gaussian_around(cls, center: Pose2D, n: int, sigma_xy: float, sigma_theta: float,
                        rng: np.random.Generator) -> "ParticleSet":
        poses = np.column_stack([
            center.x + rng.normal(0, sigma_xy, n),
            center.y + rng.normal(0, sigma_xy, n),
            wrap_angle(center.theta + rng.normal(0, sigma_theta, n)),
        ])
        return cls(poses, np.full(n, 1.0 / n))


@dataclass(frozen=True)
class MotionNoise:
    """Per-axis displacement noise: sigma = floor + alpha * |displacement|."""

    alpha_xy: float = 0.1
    alpha_theta: float = 0.1
    alpha_xy_to_theta: float = 0.05
    floor_xy: float = 0.005
    floor_theta: float = 0.005

    def sigmas(self, dx: float, dy: float, dth: float) -> tuple[float, float, float]:
        return (
            self.floor_xy + self.alpha_xy * abs(dx),
            self.floor_xy + self.alpha_xy * abs(dy),
            self.floor_theta + self.alpha_theta * abs(dth) + self.alpha_xy_to_theta * math.hypot(dx, dy),
        )


ZERO_NOISE = MotionNoise(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class LikelihoodField:
    distances: np.ndarray  # (rows, cols) metres to nearest obstacle
    origin: tuple[float, float]  # world coords of cell (0, 0) lower-left corner
    resolution: float
    sigma_hit: float = 0.1
    z_hit: float = 0.9
    z_rand: float = 0.1
    max_range: float = 10.0

    EDGE_MARGIN = 2  # cells

    def __post_init__(self):
        if self.z_hit + self.z_rand > 1 + 1e-12 or self.z_hit < 0 or self.z_rand < 0:
            raise ValueError("need z_hit, z_rand >= 0 and z_hit + z_rand <= 1")
        if np.any(self.distances < 0):
            raise ValueError("distances must be non-negative")

    def lookup(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        rows, cols = self.distances.shape
        c = np.floor((x - self.origin[0]) / self.resolution).astype(np.int64)
        r = np.floor((y - self.origin[1]) / self.resolution).astype(np.int64)
        # Wall returns sit exactly on the grid border and round either way, so
        # points just outside are read from the nearest border cell.
        m = self.EDGE_MARGIN
        inside = (c >= -m) & (c < cols + m) & (r >= -m) & (r < rows + m)
        d = np.full(x.shape, self.max_range)
        d[inside] = self.distances[np.clip(r[inside], 0, rows - 1), np.clip(c[inside], 0, cols - 1)]
        return d


def build_likelihood_field(world: WorldMap, resolution: float = 0.05, **kwargs) -> LikelihoodField:
    """Distance to the nearest wall or machine, sampled at cell centres."""
    x0, y0, x1, y1 = world.bounds
    cols = int(round((x1 - x0) / resolution))
    rows = int(round((y1 - y0) / resolution))
    xs = x0 + (np.arange(cols) + 0.5) * resolution
    ys = y0 + (np.arange(rows) + 0.5) * resolution
    gx, gy = np.meshgrid(xs, ys)
    dist = world.obstacle_distance(gx, gy)
    return LikelihoodField(distances=dist, origin=(x0, y0), resolution=resolution, **kwargs)


# ----------------------------------------------------------- particle filter

def pf_predict(particles: ParticleSet, odom_delta: Pose2D, noise: MotionNoise,
               rng: np.random.Generator) -> ParticleSet:
    """Move each particle by ``odom_delta`` expressed in its own frame."""
    dx, dy, dth = odom_delta
    n = len(particles)
    sx, sy, st = noise.sigmas(dx, dy, dth)
    ddx = dx + (rng.normal(0.0, sx, n) if sx > 0 else 0.0)
    ddy = dy + (rng.normal(0.0, sy, n) if sy > 0 else 0.0)
    ddt = dth + (rng.normal(0.0, st, n) if st > 0 else 0.0)
    p = particles.poses
    c, s = np.cos(p[:, 2]), np.sin(p[:, 2])
    poses = np.column_stack([
        p[:, 0] + c * ddx - s * ddy,
        p[:, 1] + s * ddx + c * ddy,
        wrap_angle(p[:, 2] + ddt),
    ])
    return replace(particles, poses=poses)


def scan_log_likelihood(poses: np.ndarray, points: np.ndarray, field: LikelihoodField) -> np.ndarray:
    """Sum over beam endpoints of log(z_hit * N(d; 0, sigma) + z_rand / max_range)."""
    c, s = np.cos(poses[:, 2:3]), np.sin(poses[:, 2:3])
    wx = poses[:, 0:1] + c * points[:, 0] - s * points[:, 1]
    wy = poses[:, 1:2] + s * points[:, 0] + c * points[:, 1]
    d = field.lookup(wx, wy)
    norm = 1.0 / (field.sigma_hit * math.sqrt(2.0 * math.pi))
    p = field.z_hit * norm * np.exp(-0.5 * (d / field.sigma_hit) ** 2) + field.z_rand / field.max_range
    with np.errstate(divide="ignore"):
        return np.log(p).sum(axis=1)


def pf_update(particles: ParticleSet, scan: MergedScan, field: LikelihoodField, beam_step: int = 5) -> ParticleSet:
    """Reweight particles by the likelihood of every ``beam_step``-th scan return."""
    points = scan.points[::beam_step]
    if len(points) == 0:
        return particles
    with np.errstate(divide="ignore"):
        logw = np.log(particles.weights) + scan_log_likelihood(particles.poses, points, field)
    top = logw.max()
    if not np.isfinite(top):
        log.warning("particle weights degenerate, resetting to uniform")
        return replace(particles, weights=np.full(len(particles), 1.0 / len(particles)))
    w = np.exp(logw - top)
    return replace(particles, weights=w / w.sum())


def effective_sample_size(weights: np.ndarray) -> float:
    return 1.0 / float(np.sum(weights ** 2))


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn by one uniform offset and N evenly spaced pointers."""
    n = len(weights)
    positions = (rng.uniform() + np.arange(n)) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="right")


def pf_resample(particles: ParticleSet, rng: np.random.Generator, force: bool = False) -> tuple[ParticleSet, bool]:
    """Systematic resampling when ESS drops below N/2 (or when forced)."""
    n = len(particles)
    if not force and effective_sample_size(particles.weights) >= n / 2:
        return particles, False
    idx = systematic_resample(particles.weights, rng)
    return ParticleSet(particles.poses[idx].copy(), np.full(n, 1.0 / n)), True


def pf_estimate(particles: ParticleSet) -> tuple[Pose2D, np.ndarray]:
    """Weighted mean pose (circular mean heading) and 3x3 covariance."""
    w = particles.weights
    p = particles.poses
    mx, my = float(w @ p[:, 0]), float(w @ p[:, 1])
    mt = math.atan2(float(w @ np.sin(p[:, 2])), float(w @ np.cos(p[:, 2])))
    d = np.column_stack([p[:, 0] - mx, p[:, 1] - my, wrap_angle(p[:, 2] - mt)])
    cov = (d * w[:, None]).T @ d
    return Pose2D(mx, my, float(wrap_angle(mt))), 0.5 * (cov + cov.T)


# ---------------------------------------------------------------------- EKF

@dataclass(frozen=True)
class EkfState:
    mean: np.ndarray  # (3,)
    cov: np.ndarray  # (3, 3)

    @property
    def pose(self) -> Pose2D:
        return Pose2D(float(self.mean[0]), float(self.mean[1]), float(self.mean[2]))

    @classmethod
    def at(cls, pose: Pose2D, cov=None) -> "EkfState":
        return cls(np.array(pose, dtype=float), np.zeros((3, 3)) if cov is None else np.asarray(cov, dtype=float))


def _psd(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    if np.linalg.eigvalsh(cov).min() < -1e-12:
        raise FloatingPointError("covariance lost positive semi-definiteness")
    return cov


def odometry_jacobian(mean: np.ndarray, twist: BodyTwist, dt: float) -> np.ndarray:
    """d(next pose)/d(pose) of the Euler odometry step."""
    vx, vy, _ = twist
    th = mean[2]
    c, s = math.cos(th), math.sin(th)
    return np.array([
        [1.0, 0.0, (-s * vx - c * vy) * dt],
        [0.0, 1.0, (c * vx - s * vy) * dt],
        [0.0, 0.0, 1.0],
    ])


def ekf_predict(state: EkfState, twist: BodyTwist, dt: float, process_noise) -> EkfState:
    """``process_noise`` is a 3x3 Q or the per-axis standard deviations."""
    q = np.asarray(process_noise, dtype=float)
    if q.ndim == 1:
        q = np.diag(q ** 2)
    f = odometry_jacobian(state.mean, twist, dt)
    mean = np.array(integrate_odometry(Pose2D(*state.mean), twist, dt), dtype=float)
    return EkfState(mean, _psd(f @ state.cov @ f.T + q))


def ekf_update_yaw(state: EkfState, imu: ImuSample, meas_noise: float) -> EkfState:
    """Scalar heading update; ``meas_noise`` is the measurement variance."""
    if not meas_noise > 0:
        raise ValueError("meas_noise must be positive")
    p = state.cov
    innovation = float(wrap_angle(imu.yaw - state.mean[2]))
    s = p[2, 2] + meas_noise
    k = p[:, 2] / s
    mean = state.mean + k * innovation
    mean[2] = wrap_angle(mean[2])
    i_kh = np.eye(3)
    i_kh[:, 2] -= k
    cov = i_kh @ p @ i_kh.T + meas_noise * np.outer(k, k)
    return EkfState(mean, _psd(cov))


# ------------------------------------------------------- per-robot pipeline

@dataclass(frozen=True)
class LocalizationConfig:
    particles: int = 1000
    beam_step: int = 5
    pf_every: int = 2  # in scans
    sigma_hit: float = 0.1
    z_hit: float = 0.9
    z_rand: float = 0.1
    field_resolution: float = 0.05
    motion_noise: MotionNoise = MotionNoise()
    init_sigma_xy: float = 0.05
    init_sigma_theta: float = 0.05
    ekf_process_noise: tuple[float, float, float] = (0.002, 0.002, 0.002)
    imu_yaw_variance: float = 0.005 ** 2

    @classmethod
    def from_config(cls, cfg: dict | None) -> "LocalizationConfig":
        cfg = dict(cfg or {})
        if "motion_noise" in cfg:
            cfg["motion_noise"] = MotionNoise(**cfg["motion_noise"])
        if "ekf_process_noise" in cfg:
            cfg["ekf_process_noise"] = tuple(cfg["ekf_process_noise"])
        return cls(**cfg)


class Localizer:
    """EKF in the odom frame plus a particle filter supplying the map->odom correction."""

    def __init__(self, start: Pose2D, field: LikelihoodField, cfg: LocalizationConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.field = field
        self.rng = rng
        self.ekf = EkfState.at(start, np.diag([1e-4, 1e-4, 1e-4]))
        self.particles = ParticleSet.gaussian_around(start, cfg.particles, cfg.init_sigma_xy, cfg.init_sigma_theta, rng)
        self.map_to_odom = Pose2D()
        self._odom_at_pf = self.ekf.pose
        self._scans = 0

    @property
    def estimate(self) -> Pose2D:
        return self.map_to_odom.compose(self.ekf.pose)

    @property
    def cov_trace(self) -> float:
        return float(np.trace(self.ekf.cov))

    def on_odometry(self, twist: BodyTwist, dt: float) -> None:
        self.ekf = ekf_predict(self.ekf, twist, dt, self.cfg.ekf_process_noise)

    def on_imu(self, imu: ImuSample) -> None:
        self.ekf = ekf_update_yaw(self.ekf, imu, self.cfg.imu_yaw_variance)

    def on_scan(self, scan: MergedScan) -> None:
        self._scans += 1
        if self._scans % self.cfg.pf_every:
            return
        odom = self.ekf.pose
        delta = odom.relative_to(self._odom_at_pf)
        self._odom_at_pf = odom
        self.particles = pf_predict(self.particles, delta, self.cfg.motion_noise, self.rng)
        self.particles = pf_update(self.particles, scan, self.field, self.cfg.beam_step)
        pose, _ = pf_estimate(self.particles)
        self.particles, _ = pf_resample(self.particles, self.rng)
        self.map_to_odom = pose.compose(odom.inverse())
