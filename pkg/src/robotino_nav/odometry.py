"""Dead-reckoning odometry and the ground-truth ("GPS") odometry source."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .kinematics import BodyTwist, RobotGeometry, WheelSpeeds, inverse_kinematics


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    if isinstance(a, np.ndarray):
        return np.where((a > -np.pi) & (a <= np.pi), a, np.pi - np.mod(np.pi - a, 2.0 * np.pi))
    if -math.pi < a <= math.pi:
        return a
    return math.pi - (math.pi - a) % (2.0 * math.pi)


class Pose2D(NamedTuple):
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def normalized(self) -> "Pose2D":
        return Pose2D(self.x, self.y, wrap_angle(self.theta))

    def compose(self, other: "Pose2D") -> "Pose2D":
        """``self (+) other``: ``other`` expressed in the frame of ``self``."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2D(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            wrap_angle(self.theta + other.theta),
        )

    def inverse(self) -> "Pose2D":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2D(-c * self.x - s * self.y, s * self.x - c * self.y, wrap_angle(-self.theta))

    def relative_to(self, origin: "Pose2D") -> "Pose2D":
        """This pose expressed in the frame of ``origin``."""
        return origin.inverse().compose(self)

    def distance_to(self, other: "Pose2D") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


class OdometrySource(str, enum.Enum):
    WHEEL_ENCODERS = "wheel_encoders"
    GROUND_TRUTH = "ground_truth"


@dataclass(frozen=True)
class OdometryState:
    pose: Pose2D = Pose2D()
    twist: BodyTwist = BodyTwist()
    timestamp: float = 0.0
    source: OdometrySource = OdometrySource.WHEEL_ENCODERS


def integrate_odometry(prev: Pose2D, twist: BodyTwist, dt: float) -> Pose2D:
    """One Euler step: rotate the body twist by the previous heading and add it."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    vx, vy, w = twist
    c, s = math.cos(prev.theta), math.sin(prev.theta)
    return Pose2D(
        prev.x + (c * vx - s * vy) * dt,
        prev.y + (s * vx + c * vy) * dt,
        wrap_angle(prev.theta + w * dt),
    )


def update_from_wheels(state: OdometryState, speeds: WheelSpeeds, geom: RobotGeometry, dt: float) -> OdometryState:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    twist = inverse_kinematics(geom, speeds)
    return OdometryState(
        pose=integrate_odometry(state.pose, twist, dt),
        twist=twist,
        timestamp=state.timestamp + dt,
        source=OdometrySource.WHEEL_ENCODERS,
    )


def ground_truth_odometry(robot, timestamp: float = 0.0) -> OdometryState:
    """Read the simulator's exact pose, as a GPS-style odometry source would."""
    return OdometryState(
        pose=Pose2D(robot.pose.x, robot.pose.y, wrap_angle(robot.pose.theta)),
        twist=robot.twist,
        timestamp=timestamp,
        source=OdometrySource.GROUND_TRUTH,
    )
