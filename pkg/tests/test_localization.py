import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robotino_nav.kinematics import BodyTwist, RobotGeometry
from robotino_nav.localization import (
    ZERO_NOISE,
    EkfState,
    LikelihoodField,
    LocalizationConfig,
    Localizer,
    MotionNoise,
    ParticleSet,
    build_likelihood_field,
    effective_sample_size,
    ekf_predict,
    ekf_update_yaw,
    odometry_jacobian,
    pf_estimate,
    pf_predict,
    pf_resample,
    pf_update,
)
from robotino_nav.odometry import Pose2D, integrate_odometry, wrap_angle
from robotino_nav.world import ImuSample, MergedScan, SimConfig, World, WorldMap, default_lidars

QUIET = SimConfig(slip_sigma=0.0, gyro_bias=0.0, gyro_sigma=0.0, lidars=default_lidars(0.0))


@pytest.fixture(scope="module")
def field(default_map):
    return build_likelihood_field(default_map)


def particles_at(poses, weights=None):
    poses = np.asarray(poses, dtype=float)
    n = len(poses)
    return ParticleSet(poses, np.full(n, 1 / n) if weights is None else np.asarray(weights, dtype=float))


def imu(yaw):
    return ImuSample(yaw_rate=0.0, yaw=yaw, timestamp=0.0)


# --------------------------------------------------------- likelihood field

def test_field_distances(default_map, field):
    assert np.all(field.distances >= 0)
    m = default_map.machines[0]
    assert field.lookup(np.array([m.x]), np.array([m.y]))[0] == 0.0
    # far outside the grid the lookup reports max_range, just outside it reads the border
    assert field.lookup(np.array([50.0]), np.array([0.0]))[0] == field.max_range
    assert field.lookup(np.array([0.0]), np.array([-3.0 - 1e-12]))[0] == pytest.approx(field.resolution / 2)


def test_field_validation():
    with pytest.raises(ValueError):
        LikelihoodField(np.zeros((2, 2)), (0, 0), 0.1, z_hit=0.8, z_rand=0.3)
    with pytest.raises(ValueError):
        LikelihoodField(-np.ones((2, 2)), (0, 0), 0.1)


# ---------------------------------------------------------------- predict

def test_predict_zero(rng):
    ps = ParticleSet.uniform_around(Pose2D(1, 1, 0.5), 50, 0.3, 0.2, rng)
    out = pf_predict(ps, Pose2D(), ZERO_NOISE, rng)
    np.testing.assert_array_equal(out.poses, ps.poses)


def test_predict_in_particle_frame(rng):
    out = pf_predict(particles_at([[0, 0, math.pi / 2]]), Pose2D(0.1, 0, 0), ZERO_NOISE, rng)
    np.testing.assert_allclose(out.poses[0], [0, 0.1, math.pi / 2], atol=1e-12)


def test_predict_lateral_spread(rng):
    noise = MotionNoise(alpha_xy=0.2, floor_xy=0.01)
    ps = particles_at(np.zeros((10_000, 3)))
    out = pf_predict(ps, Pose2D(0, 0.1, 0), noise, rng)
    _, sy, _ = noise.sigmas(0, 0.1, 0)
    assert out.poses[:, 1].std() == pytest.approx(sy, rel=0.1)
    # longitudinal spread only has the floor, independent of the lateral motion
    assert out.poses[:, 0].std() == pytest.approx(noise.floor_xy, rel=0.1)


# ----------------------------------------------------------------- update

def test_true_pose_gets_max_weight(default_map, field, rng):
    truth = Pose2D(-1.0, 2.0, 0.3)
    scan = World(default_map, RobotGeometry(), [truth], QUIET).scan(0)
    offsets = rng.normal(size=(40, 2))
    offsets = 0.3 * offsets / np.linalg.norm(offsets, axis=1, keepdims=True)
    poses = [[truth.x, truth.y, truth.theta]] + [[truth.x + dx, truth.y + dy, truth.theta] for dx, dy in offsets]
    out = pf_update(particles_at(poses), scan, field)
    assert np.argmax(out.weights) == 0


def test_identical_particles_stay_uniform(default_map, field):
    scan = World(default_map, RobotGeometry(), [Pose2D(-1, 2, 0)], QUIET).scan(0)
    out = pf_update(particles_at([[-1.1, 2, 0]] * 8), scan, field)
    np.testing.assert_allclose(out.weights, 1 / 8, atol=1e-12)


def test_no_returns_keep_weights(field):
    ps = particles_at([[0, 0, 0], [1, 0, 0]], [0.3, 0.7])
    out = pf_update(ps, MergedScan(np.zeros((0, 2)), 0.0), field)
    np.testing.assert_array_equal(out.weights, ps.weights)


def test_degenerate_weights_reset(field):
    ps = particles_at([[0, 0, 0], [1, 0, 0]], [0.0, 0.0])
    out = pf_update(ps, MergedScan(np.array([[1.0, 0.0]]), 0.0), field)
    np.testing.assert_allclose(out.weights, 0.5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_update_normalizes(seed):
    rng = np.random.default_rng(seed)
    field = build_likelihood_field(WorldMap(), resolution=0.2)
    ps = ParticleSet.uniform_around(Pose2D(0, 0, 0), 64, 2.0, 3.0, rng)
    scan = World(WorldMap(), RobotGeometry(), [Pose2D(0.5, 0.5, 1.0)], QUIET).scan(0)
    out = pf_update(ps, scan, field)
    assert out.weights.sum() == pytest.approx(1.0, abs=1e-9)
    assert len(out) == len(ps)


# --------------------------------------------------------------- resample

def test_uniform_weights_not_resampled(rng):
    ps = ParticleSet.uniform_around(Pose2D(), 100, 1, 1, rng)
    assert effective_sample_size(ps.weights) == pytest.approx(100)
    out, done = pf_resample(ps, rng)
    assert not done and out is ps


def test_single_heavy_particle(rng):
    ps = particles_at([[0, 0, 0], [1, 1, 1], [2, 2, 2]], [0, 1, 0])
    out, done = pf_resample(ps, rng)
    assert done
    np.testing.assert_array_equal(out.poses, [[1, 1, 1]] * 3)
    np.testing.assert_allclose(out.weights, 1 / 3)


def test_two_equal_halves(rng):
    # ESS is exactly N/2 here, which does not trigger the strict rule on its own.
    ps = particles_at([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], [0.5, 0.5, 0, 0])
    assert pf_resample(ps, rng)[1] is False
    for seed in range(20):
        out, _ = pf_resample(ps, np.random.default_rng(seed), force=True)
        assert sorted(out.poses[:, 0].tolist()) == [0, 0, 1, 1]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=60).filter(lambda w: sum(w) > 1e-6), st.integers(0, 1000))
def test_resample_preserves_count(raw, seed):
    w = np.array(raw) / sum(raw)
    n = len(w)
    out, _ = pf_resample(particles_at(np.arange(3 * n).reshape(n, 3), w), np.random.default_rng(seed), force=True)
    assert len(out) == n
    assert out.weights.sum() == pytest.approx(1.0, abs=1e-9)
    # systematic resampling: each index is copied floor(N w) or ceil(N w) times
    counts = np.bincount((out.poses[:, 0] // 3).astype(int), minlength=n)
    assert np.all(counts >= np.floor(n * w - 1e-9)) and np.all(counts <= np.ceil(n * w + 1e-9))


# --------------------------------------------------------------- estimate

def test_estimate_single_pose():
    pose, cov = pf_estimate(particles_at([[1, 2, 0.4]] * 5))
    assert pose == pytest.approx((1, 2, 0.4))
    np.testing.assert_allclose(cov, 0, atol=1e-15)


def test_estimate_wraps_heading():
    pose, _ = pf_estimate(particles_at([[0, 0, 3.1], [0, 0, -3.1]]))
    assert abs(pose.theta) == pytest.approx(math.pi, abs=1e-9)


def test_estimate_symmetric_cloud():
    offsets = np.array([[0.1, 0], [-0.1, 0], [0, 0.2], [0, -0.2], [0.3, 0.3], [-0.3, -0.3]])
    pose, cov = pf_estimate(particles_at(np.column_stack([2 + offsets[:, 0], 3 + offsets[:, 1], np.zeros(6)])))
    assert pose.x == pytest.approx(2, abs=1e-6) and pose.y == pytest.approx(3, abs=1e-6)
    assert cov[0, 0] == pytest.approx(np.mean(offsets[:, 0] ** 2))


# -------------------------------------------------------------------- EKF

def test_ekf_zero_twist():
    s = EkfState.at(Pose2D(1, 2, 0.3), np.eye(3) * 0.01)
    out = ekf_predict(s, BodyTwist(), 0.05, np.zeros((3, 3)))
    np.testing.assert_array_equal(out.mean, s.mean)
    np.testing.assert_allclose(out.cov, s.cov)


@given(st.floats(-3, 3), st.floats(-0.7, 0.7), st.floats(-0.7, 0.7), st.floats(-0.8, 0.8))
def test_jacobian_matches_finite_differences(theta, vx, vy, w):
    mean = np.array([0.4, -0.2, theta])
    twist, dt, h = BodyTwist(vx, vy, w), 0.05, 1e-6
    numeric = np.zeros((3, 3))
    for j in range(3):
        up, down = mean.copy(), mean.copy()
        up[j] += h
        down[j] -= h
        a = np.array(integrate_odometry(Pose2D(*up), twist, dt))
        b = np.array(integrate_odometry(Pose2D(*down), twist, dt))
        diff = a - b
        diff[2] = wrap_angle(diff[2])
        numeric[:, j] = diff / (2 * h)
    np.testing.assert_allclose(odometry_jacobian(mean, twist, dt), numeric, atol=1e-6)


@settings(max_examples=40)
@given(st.floats(-3, 3), st.floats(-0.7, 0.7), st.floats(-0.7, 0.7), st.floats(-0.8, 0.8))
def test_covariance_psd_and_growing(theta, vx, vy, w):
    s = EkfState.at(Pose2D(0, 0, theta), np.diag([0.01, 0.02, 0.03]))
    for _ in range(5):
        nxt = ekf_predict(s, BodyTwist(vx, vy, w), 0.05, (0.01, 0.01, 0.01))
        assert np.trace(nxt.cov) >= np.trace(s.cov) - 1e-15
        s = ekf_update_yaw(nxt, imu(theta), 0.01)
        assert np.allclose(s.cov, s.cov.T, atol=1e-12)
        assert np.linalg.eigvalsh(s.cov).min() >= -1e-12


def test_update_with_matching_measurement():
    s = EkfState.at(Pose2D(1, 2, 0.3), np.diag([0.01, 0.01, 0.04]))
    out = ekf_update_yaw(s, imu(0.3), 0.01)
    np.testing.assert_allclose(out.mean, s.mean, atol=1e-15)
    assert out.cov[2, 2] < s.cov[2, 2]


def test_update_wraps_innovation():
    s = EkfState.at(Pose2D(0, 0, 3.1), np.diag([0.0, 0.0, 1.0]))
    out = ekf_update_yaw(s, imu(-3.1), 1.0)
    # innovation is 2*pi - 6.2 = +0.0832; half of it is applied with equal variances
    assert wrap_angle(out.mean[2] - 3.1) == pytest.approx((2 * math.pi - 6.2) / 2, abs=1e-9)


def test_huge_measurement_noise_is_identity():
    s = EkfState.at(Pose2D(0, 0, 0.2), np.diag([0.01, 0.01, 0.04]))
    out = ekf_update_yaw(s, imu(1.0), 1e12)
    assert np.max(np.abs(out.mean - s.mean)) < 1e-6


def test_update_rejects_bad_noise():
    with pytest.raises(ValueError):
        ekf_update_yaw(EkfState.at(Pose2D()), imu(0), 0.0)


# --------------------------------------------------------------- pipeline

def test_localizer_tracks_a_moving_robot(default_map, field):
    start = Pose2D(-5.0, 0.0, 0.0)
    world = World(default_map, RobotGeometry(), [start], SimConfig(), seed=5)
    loc = Localizer(start, field, LocalizationConfig(particles=300), np.random.default_rng(5))
    for _ in range(100):
        world.command(0, BodyTwist(0.4, 0.0, 0.1))
        s = world.step()[0]
        loc.on_odometry(s.wheel_odometry.twist, world.config.dt)
        if s.imu:
            loc.on_imu(s.imu)
        if s.scan:
            loc.on_scan(s.scan)
    truth = world.robots[0].pose
    assert not world.events
    assert loc.estimate.distance_to(truth) < 0.1
    assert abs(wrap_angle(loc.estimate.theta - truth.theta)) < 0.05
    assert loc.cov_trace > 0


def test_config_from_dict():
    cfg = LocalizationConfig.from_config({"particles": 10, "motion_noise": {"alpha_xy": 0.3}})
    assert cfg.particles == 10 and cfg.motion_noise.alpha_xy == 0.3
    with pytest.raises(TypeError):
        LocalizationConfig.from_config({"bogus": 1})
