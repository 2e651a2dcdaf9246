"""Forward and inverse kinematics of the three-omniwheel Robotino drive.

Wheel speeds are motor speeds in rpm, i.e. after the planetary gearbox
reduction and the simulator scaling factor have been applied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, NamedTuple, Sequence

import numpy as np

DEFAULT_WHEEL_ANGLES_DEG = (60.0, 180.0, 300.0)
DEFAULT_WHEEL_DISTANCE = 0.18  # m, centre to wheel contact
DEFAULT_WHEEL_RADIUS = 0.040  # m
DEFAULT_GEAR_RATIO = 16.0
DEFAULT_SCALE_FACTOR = 0.009375

RAD_S_TO_RPM = 60.0 / (2.0 * math.pi)


class BodyTwist(NamedTuple):
    """Velocity in the robot frame: v_x, v_y in m/s and omega in rad/s."""

    vx: float = 0.0
    vy: float = 0.0
    omega: float = 0.0


class WheelSpeeds(NamedTuple):
    """Motor speeds of wheels 1..3 in rpm."""

    m1: float = 0.0
    m2: float = 0.0
    m3: float = 0.0


@dataclass(frozen=True)
class RobotGeometry:
    wheel_angles: tuple[float, float, float] = tuple(math.radians(a) for a in DEFAULT_WHEEL_ANGLES_DEG)
    wheel_radii: tuple[float, float, float] = (DEFAULT_WHEEL_DISTANCE,) * 3
    wheel_radius: float = DEFAULT_WHEEL_RADIUS
    gear_ratio: float = DEFAULT_GEAR_RATIO
    scale_factor: float = DEFAULT_SCALE_FACTOR
    _k: np.ndarray = field(init=False, repr=False, compare=False)
    _k_inv: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.wheel_angles) != 3 or len(self.wheel_radii) != 3:
            raise ValueError("exactly three wheels are required")
        if self.wheel_radius <= 0 or self.gear_ratio <= 0 or self.scale_factor <= 0:
            raise ValueError("wheel_radius, gear_ratio and scale_factor must be positive")
        if any(r <= 0 for r in self.wheel_radii):
            raise ValueError("wheel radial distances must be positive")
        values = [self.wheel_radius, self.gear_ratio, self.scale_factor, *self.wheel_angles, *self.wheel_radii]
        if not all(math.isfinite(v) for v in values):
            raise ValueError("geometry values must be finite")
        k = np.array([[-math.sin(d), math.cos(d), r] for d, r in zip(self.wheel_angles, self.wheel_radii)])
        if abs(np.linalg.det(k)) <= 1e-9:
            raise ValueError("kinematic matrix is singular for this wheel layout")
        k.setflags(write=False)
        k_inv = np.linalg.inv(k)
        k_inv.setflags(write=False)
        object.__setattr__(self, "_k", k)
        object.__setattr__(self, "_k_inv", k_inv)

    @property
    def rpm_per_unit(self) -> float:
        """Factor from wheel surface speed (m/s) to motor rpm."""
        return RAD_S_TO_RPM * self.gear_ratio * self.scale_factor / self.wheel_radius

    @classmethod
    def from_config(cls, cfg: dict[str, Any] | None) -> "RobotGeometry":
        """Build from a config block (angles in degrees, uniform radial distance)."""
        cfg = dict(cfg or {})
        angles = cfg.pop("wheel_angles_deg", DEFAULT_WHEEL_ANGLES_DEG)
        if "wheel_distances_m" in cfg:
            radii = tuple(float(r) for r in cfg.pop("wheel_distances_m"))
        else:
            radii = (float(cfg.pop("wheel_distance_m", DEFAULT_WHEEL_DISTANCE)),) * 3
        geom = cls(
            wheel_angles=tuple(math.radians(float(a)) for a in angles),
            wheel_radii=radii,
            wheel_radius=float(cfg.pop("wheel_radius_m", DEFAULT_WHEEL_RADIUS)),
            gear_ratio=float(cfg.pop("gear_ratio", DEFAULT_GEAR_RATIO)),
            scale_factor=float(cfg.pop("scale_factor", DEFAULT_SCALE_FACTOR)),
        )
        if cfg:
            raise ValueError(f"unknown geometry keys: {sorted(cfg)}")
        return geom

    def with_scale_factor(self, scale_factor: float) -> "RobotGeometry":
        return RobotGeometry(self.wheel_angles, self.wheel_radii, self.wheel_radius, self.gear_ratio, scale_factor)


def kinematic_matrix(geom: RobotGeometry) -> np.ndarray:
    """Rows are [-sin(delta_i), cos(delta_i), R_i]."""
    return geom._k.copy()


def forward_kinematics(geom: RobotGeometry, cmd: Sequence[float]) -> WheelSpeeds:
    """Motor speeds (rpm) needed to execute body twist ``cmd``."""
    speeds = geom._k @ np.asarray(cmd, dtype=float) * geom.rpm_per_unit
    return WheelSpeeds(*(float(s) for s in speeds))


def inverse_kinematics(geom: RobotGeometry, speeds: Sequence[float]) -> BodyTwist:
    """Body twist from measured motor speeds (rpm); exact inverse of forward_kinematics."""
    twist = geom._k_inv @ np.asarray(speeds, dtype=float) / geom.rpm_per_unit
    return BodyTwist(*(float(v) for v in twist))
