"""Model predictive path integral (MPPI) controller for the omnidirectional base.

Each control tick perturbs the nominal command sequence with Gaussian noise,
rolls every sample through the Euler odometry model, scores the resulting
trajectories with a handful of critics and replaces the nominal sequence by
the softmax-weighted average of the samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import NamedTuple, Sequence

import numpy as np
from numba import njit

from .costmap import INSCRIBED, Costmap
from .kinematics import BodyTwist
from .odometry import Pose2D, wrap_angle
from .planners import PlannedPath

TABLE1_KEYS = ("time_steps", "model_dt", "frequency", "motion_model", "batch_size", "vx_min", "vx_max",
               "vy_max", "wz_max", "vx_std", "vy_std", "wz_std")


@dataclass(frozen=True)
class MppiParams:
    time_steps: int = 80
    model_dt: float = 0.05
    frequency: float = 20.0
    motion_model: str = "Omni"
    batch_size: int = 2000
    vx_min: float = -0.7
    vx_max: float = 0.7
    vy_max: float = 0.7
    wz_max: float = 0.8
    vx_std: float = 0.4
    vy_std: float = 0.4
    wz_std: float = 0.4
    temperature: float = 0.35
    w_path: float = 5.0
    w_goal: float = 5.0
    w_obst: float = 20.0
    w_dyn: float = 20.0
    w_angle: float = 6.0
    lethal_penalty: float = 100.0
    safety_margin: float = 0.3
    blocked_path_scale: float = 0.1
    lookahead: float = 1.5
    angle_radius: float = 2.0
    smoothing_window: int = 9
    goal_xy_tolerance: float = 0.10
    goal_yaw_tolerance: float = 0.15
    near_goal_distance: float = 0.5  # inside this, inflation no longer repels the rollouts

    def __post_init__(self):
        if self.time_steps < 1 or self.batch_size < 1:
            raise ValueError("time_steps and batch_size must be >= 1")
        if not self.vx_min < self.vx_max:
            raise ValueError("vx_min must be below vx_max")
        if min(self.vx_std, self.vy_std, self.wz_std) <= 0:
            raise ValueError("sampling std must be positive")
        if self.model_dt <= 0 or self.frequency <= 0 or self.temperature <= 0:
            raise ValueError("model_dt, frequency and temperature must be positive")
        if self.smoothing_window < 1 or self.smoothing_window % 2 == 0:
            raise ValueError("smoothing_window must be a positive odd integer")
        if self.motion_model != "Omni":
            raise ValueError("only the Omni motion model is supported")

    @property
    def horizon(self) -> float:
        return self.time_steps * self.model_dt

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.vx_min, -self.vy_max, -self.wz_max])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.vx_max, self.vy_max, self.wz_max])

    @property
    def std(self) -> np.ndarray:
        return np.array([self.vx_std, self.vy_std, self.wz_std])

    @classmethod
    def from_config(cls, cfg: dict | None) -> "MppiParams":
        cfg = dict(cfg or {})
        unknown = set(cfg) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown controller keys: {sorted(unknown)}")
        return cls(**cfg)


class DynamicObstacle(NamedTuple):
    """Another robot: world position, world velocity, footprint radius."""

    x: float
    y: float
    vx: float = 0.0
    vy: float = 0.0
    radius: float = 0.23


def zero_sequence(params: MppiParams) -> np.ndarray:
    return np.zeros((params.time_steps, 3))


def clamp_sequence(seq: np.ndarray, params: MppiParams) -> np.ndarray:
    return np.clip(seq, params.lower, params.upper)


@njit(cache=True)
def _perturb(rng, seq, std, lower, upper, b_n):
    t_n = seq.shape[0]
    out = np.empty((b_n, t_n, 3))
    for b in range(b_n):
        for t in range(t_n):
            for j in range(3):
                v = seq[t, j] + rng.standard_normal() * std[j]
                out[b, t, j] = min(max(v, lower[j]), upper[j])
    return out


def sample_rollouts(seq: np.ndarray, params: MppiParams, rng: np.random.Generator) -> np.ndarray:
    """batch_size perturbed copies of ``seq``, clamped to the velocity box.

    Noise is independent Gaussian per sample, step and axis, drawn from ``rng``.
    """
    return _perturb(rng, np.ascontiguousarray(seq, dtype=np.float64), params.std, params.lower, params.upper,
                    params.batch_size)


@njit(cache=True)
def _rollout(batch, x0, y0, th0, dt):
    b_n, t_n, _ = batch.shape
    out = np.empty((b_n, t_n, 3))
    for b in range(b_n):
        x, y, th = x0, y0, th0
        for t in range(t_n):
            vx, vy, w = batch[b, t, 0], batch[b, t, 1], batch[b, t, 2]
            c, s = math.cos(th), math.sin(th)
            x += (c * vx - s * vy) * dt
            y += (s * vx + c * vy) * dt
            th += w * dt
            out[b, t, 0] = x
            out[b, t, 1] = y
            out[b, t, 2] = th
    return out


def rollout_trajectories(batch: np.ndarray, start_pose: Pose2D, params: MppiParams) -> np.ndarray:
    """Integrate each sequence with the Euler odometry step; returns (B, T, 3) poses.

    Headings are left unwrapped.
    """
    return _rollout(np.ascontiguousarray(batch, dtype=np.float64), float(start_pose[0]), float(start_pose[1]),
                    float(start_pose[2]), params.model_dt)


class PathField:
    """Distance-to-path grid on the costmap lattice plus arc-length helpers."""

    def __init__(self, path: PlannedPath, costmap: Costmap):
        self.path = path
        pts = np.asarray(path.points, dtype=float)
        if len(pts) == 1:
            pts = np.vstack([pts, pts])
        self.points = pts
        seg = np.diff(pts, axis=0)
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.cum = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.origin = costmap.origin
        self.resolution = costmap.resolution
        rows, cols = costmap.cost.shape
        xs = costmap.origin[0] + (np.arange(cols) + 0.5) * costmap.resolution
        ys = costmap.origin[1] + (np.arange(rows) + 0.5) * costmap.resolution
        gx, gy = np.meshgrid(xs, ys)
        self.grid = self.distance(gx, gy).astype(np.float64)

    def _project(self, px, py):
        """Per point: distance to the polyline and arc length of the closest point."""
        px, py = np.asarray(px, dtype=float), np.asarray(py, dtype=float)
        best = np.full(px.shape, np.inf)
        arc = np.zeros(px.shape)
        for i, (a, d, ln) in enumerate(zip(self.points[:-1], np.diff(self.points, axis=0), self.seg_len)):
            if ln > 0:
                t = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / (ln * ln), 0.0, 1.0)
            else:
                t = np.zeros(px.shape)
            dist = np.hypot(px - a[0] - t * d[0], py - a[1] - t * d[1])
            closer = dist < best
            best = np.where(closer, dist, best)
            arc = np.where(closer, self.cum[i] + t * ln, arc)
        return best, arc

    def distance(self, px, py):
        return self._project(px, py)[0]

    def arc_length(self, x: float, y: float, min_arc: float = 0.0, window: float | None = None) -> float:
        """Arc length of the closest path point at or after ``min_arc`` (within ``window``)."""
        hi = self.cum[-1] if window is None else min(self.cum[-1], min_arc + window)
        samples = np.linspace(min_arc, hi, max(2, int((hi - min_arc) / 0.02) + 1))
        pts = np.array([self.point_at(s) for s in samples])
        return float(samples[np.argmin(np.hypot(pts[:, 0] - x, pts[:, 1] - y))])

    def point_at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.cum[-1])
        i = min(int(np.searchsorted(self.cum, s, side="right")) - 1, len(self.seg_len) - 1)
        ln = self.seg_len[i]
        t = 0.0 if ln == 0 else (s - self.cum[i]) / ln
        return self.points[i] + t * (self.points[i + 1] - self.points[i])

    @property
    def total_length(self) -> float:
        return float(self.cum[-1])


@njit(cache=True)
def _costs(traj, cost_grid, path_grid, ox, oy, res, gx, gy, goal_th, angle_on, dyn, robot_r, margin,
           dt, w_path, w_goal, w_obst, w_dyn, w_angle, lethal_penalty, inscribed, repulsion):
    b_n, t_n, _ = traj.shape
    rows, cols = cost_grid.shape
    out = np.empty(b_n)
    k_n = dyn.shape[0]
    for b in range(b_n):
        path_sum = 0.0
        goal_sum = 0.0
        obst_sum = 0.0
        dyn_sum = 0.0
        ang_sum = 0.0
        for t in range(t_n):
            x, y = traj[b, t, 0], traj[b, t, 1]
            c = int(math.floor((x - ox) / res))
            r = int(math.floor((y - oy) / res))
            if r < 0 or r >= rows or c < 0 or c >= cols:
                obst_sum += lethal_penalty
                path_sum += 10.0
            else:
                cc = cost_grid[r, c]
                if cc >= inscribed:
                    obst_sum += lethal_penalty
                elif repulsion:
                    obst_sum += cc / inscribed
                path_sum += path_grid[r, c]
            goal_sum += math.hypot(x - gx, y - gy)
            if angle_on:
                e = traj[b, t, 2] - goal_th
                ang_sum += abs(math.pi - ((math.pi - e) % (2.0 * math.pi)))
            tt = (t + 1) * dt
            for k in range(k_n):
                dx = x - (dyn[k, 0] + dyn[k, 2] * tt)
                dy = y - (dyn[k, 1] + dyn[k, 3] * tt)
                clearance = math.sqrt(dx * dx + dy * dy) - robot_r - dyn[k, 4]
                if clearance < margin:
                    dyn_sum += (margin - clearance) / margin
                    if clearance < 0.0:
                        dyn_sum += lethal_penalty
        total = (w_path * path_sum / t_n + w_goal * goal_sum / t_n
                 + w_obst * obst_sum / t_n + w_dyn * dyn_sum / t_n + w_angle * ang_sum / t_n)
        out[b] = total
    return out


def _dyn_array(obstacles: Sequence[DynamicObstacle]) -> np.ndarray:
    return np.array([tuple(o) for o in obstacles], dtype=np.float64).reshape(-1, 5)


def evaluate_costs(trajectories: np.ndarray, path: PlannedPath | PathField, costmap: Costmap, goal,
                   dynamic_obstacles: Sequence[DynamicObstacle] = (), params: MppiParams = MppiParams(), *,
                   goal_heading: float | None = None, robot_radius: float | None = None,
                   repulsion: bool = True) -> np.ndarray:
    """Cost per sample.

    ``goal`` is the active goal point (x, y); its critic averages the distance
    over the whole trajectory, so arriving early is cheaper than arriving at
    the end of the horizon.  The heading critic averages the same way and is
    active only when ``goal_heading`` is given.  Without ``repulsion`` only
    lethal cells are penalised, so a goal close to an obstacle stays reachable.
    """
    pf = path if isinstance(path, PathField) else PathField(path, costmap)
    rr = costmap.robot_radius if robot_radius is None else robot_radius
    p = params
    return _costs(np.ascontiguousarray(trajectories, dtype=np.float64), costmap.cost, pf.grid,
                  costmap.origin[0], costmap.origin[1], costmap.resolution, float(goal[0]), float(goal[1]),
                  0.0 if goal_heading is None else float(goal_heading), goal_heading is not None,
                  _dyn_array(dynamic_obstacles), rr, p.safety_margin, p.model_dt, p.w_path, p.w_goal, p.w_obst,
                  p.w_dyn, p.w_angle, p.lethal_penalty, float(INSCRIBED), repulsion)


def softmax_weights(costs: np.ndarray, temperature: float) -> np.ndarray:
    costs = np.asarray(costs, dtype=float)
    w = np.exp(-(costs - costs.min()) / temperature)
    return w / w.sum()


def update_sequence(seq: np.ndarray, batch: np.ndarray, costs: np.ndarray, params: MppiParams) -> np.ndarray:
    """Softmax-weighted average of the sampled sequences, clamped to the bounds."""
    w = softmax_weights(costs, params.temperature)
    new = np.tensordot(w, batch, axes=1)
    return clamp_sequence(new, params)


def smooth_sequence(seq: np.ndarray, window: int) -> np.ndarray:
    """Centred moving average along time, padding with the end values."""
    if window <= 1:
        return seq
    half = window // 2
    padded = np.concatenate([np.repeat(seq[:1], half, axis=0), seq, np.repeat(seq[-1:], half, axis=0)])
    csum = np.concatenate([np.zeros((1, seq.shape[1])), np.cumsum(padded, axis=0)])
    return (csum[window:] - csum[:-window]) / window


def shift_sequence(seq: np.ndarray) -> np.ndarray:
    out = np.empty_like(seq)
    out[:-1] = seq[1:]
    out[-1] = seq[-1]
    return out


# ------------------------------------------------------------------ checkers

def goal_checker(estimate: Pose2D, goal: Pose2D, xy_tolerance: float = 0.10, yaw_tolerance: float = 0.15) -> bool:
    return (math.hypot(estimate[0] - goal[0], estimate[1] - goal[1]) < xy_tolerance
            and abs(wrap_angle(estimate[2] - goal[2])) < yaw_tolerance)


def progress_checker(history: Sequence[tuple[float, float, float]], window: float = 10.0,
                     min_move: float = 0.05) -> bool:
    """False (stalled) when some ``window``-second stretch moved less than ``min_move``.

    ``history`` holds (t, x, y) samples in time order; only the trailing
    window is examined, so this is meant to be called every tick.
    """
    if not history or history[-1][0] - history[0][0] < window:
        return True
    t_end = history[-1][0]
    recent = [(x, y) for t, x, y in history if t >= t_end - window]
    x0, y0 = recent[0]
    return max(math.hypot(x - x0, y - y0) for x, y in recent) >= min_move


class ProgressChecker:
    """Incremental form of progress_checker: resets whenever the robot moves min_move."""

    def __init__(self, window: float = 10.0, min_move: float = 0.05):
        self.window = window
        self.min_move = min_move
        self._ref: tuple[float, float, float] | None = None

    def reset(self) -> None:
        self._ref = None

    def update(self, t: float, x: float, y: float) -> bool:
        if self._ref is None or math.hypot(x - self._ref[1], y - self._ref[2]) >= self.min_move:
            self._ref = (t, x, y)
            return True
        return t - self._ref[0] < self.window


def spin_recovery(params: MppiParams, angle: float = math.pi / 2, direction: int = 1) -> list[BodyTwist]:
    """Command script turning in place by ``angle`` at no more than wz_max."""
    dt = 1.0 / params.frequency
    wz = params.wz_max
    n_full = int(angle / (wz * dt))
    script = [BodyTwist(0.0, 0.0, direction * wz)] * n_full
    rest = angle - n_full * wz * dt
    if rest > 1e-12:
        script.append(BodyTwist(0.0, 0.0, direction * rest / dt))
    return script


# ---------------------------------------------------------------- controller

@dataclass
class ControllerState:
    seq: np.ndarray
    path: PathField | None = None
    goal: Pose2D | None = None
    progress_arc: float = 0.0
    last_batch: np.ndarray | None = field(default=None, repr=False)


class MppiController:
    """One controller per robot, ticked at ``params.frequency``."""

    def __init__(self, params: MppiParams, costmap: Costmap, rng: np.random.Generator,
                 robot_radius: float | None = None):
        self.params = params
        self.costmap = costmap
        self.rng = rng
        self.robot_radius = costmap.robot_radius if robot_radius is None else robot_radius
        self.state = ControllerState(seq=zero_sequence(params))
        self.goal_reached = False

    def set_path(self, path: PlannedPath, goal: Pose2D) -> None:
        self.state.path = PathField(path, self.costmap)
        self.state.goal = Pose2D(*goal)
        self.state.progress_arc = 0.0
        self.goal_reached = False

    def clear(self) -> None:
        self.state = ControllerState(seq=zero_sequence(self.params))
        self.goal_reached = False

    def reset_sequence(self) -> None:
        self.state.seq = zero_sequence(self.params)

    def active_goal(self, estimate: Pose2D) -> np.ndarray:
        pf = self.state.path
        s = pf.arc_length(estimate[0], estimate[1], self.state.progress_arc, window=1.5)
        self.state.progress_arc = max(self.state.progress_arc, s)
        return pf.point_at(self.state.progress_arc + self.params.lookahead)

    def path_blocked(self, estimate: Pose2D, obstacles: Sequence[DynamicObstacle]) -> bool:
        """True when another robot stands on the path within lookahead of the robot.

        Following the path tightly is then pointless, so the path critic is
        weakened and the robot may swerve around.
        """
        p = self.params
        reach = p.lookahead + p.vx_max * p.horizon / 2
        for o in obstacles:
            if math.hypot(o.x - estimate[0], o.y - estimate[1]) > reach:
                continue
            if float(self.state.path.distance(o.x, o.y)) < self.robot_radius + o.radius + p.safety_margin:
                return True
        return False

    def compute_command(self, estimate: Pose2D, obstacles: Sequence[DynamicObstacle] = ()) -> BodyTwist:
        st = self.state
        p = self.params
        if st.path is None or st.goal is None:
            raise RuntimeError("no active path")
        goal = st.goal
        if goal_checker(estimate, goal, p.goal_xy_tolerance, p.goal_yaw_tolerance):
            self.goal_reached = True
            st.seq = zero_sequence(p)
            return BodyTwist()
        self.goal_reached = False
        target = self.active_goal(estimate)
        to_goal = math.hypot(estimate[0] - goal[0], estimate[1] - goal[1])
        near = to_goal < p.angle_radius
        # rollouts carry unwrapped headings, so unwrap the goal heading to the estimate
        goal_heading = estimate[2] + wrap_angle(goal[2] - estimate[2]) if near else None
        if self.path_blocked(estimate, obstacles):
            p = replace(p, w_path=p.w_path * p.blocked_path_scale)
        batch = sample_rollouts(st.seq, p, self.rng)
        traj = rollout_trajectories(batch, estimate, p)
        costs = evaluate_costs(traj, st.path, self.costmap, target, obstacles, p,
                               goal_heading=goal_heading, robot_radius=self.robot_radius,
                               repulsion=to_goal >= p.near_goal_distance)
        st.seq = smooth_sequence(update_sequence(st.seq, batch, costs, p), p.smoothing_window)
        cmd = BodyTwist(*(float(v) for v in st.seq[0]))
        st.seq = shift_sequence(st.seq)
        return cmd


def compute_command(estimate: Pose2D, path: PlannedPath | None, costmap: Costmap,
                    obstacles: Sequence[DynamicObstacle], controller: MppiController,
                    goal: Pose2D | None = None) -> tuple[BodyTwist, str]:
    """Functional wrapper: returns (command, status) with status in {active, goal_reached, no_path}."""
    if path is None:
        return BodyTwist(), "no_path"
    if controller.state.path is None or controller.state.path.path is not path:
        controller.set_path(path, goal if goal is not None else Pose2D(*path.goal, estimate[2]))
    cmd = controller.compute_command(estimate, obstacles)
    return cmd, "goal_reached" if controller.goal_reached else "active"
