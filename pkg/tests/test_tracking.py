import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from devo import synth
from devo.errors import DegenerateProblemError, TrackingLost
from devo.events import AnalyticField, EventStream, PotentialField, bilinear_sample
from devo.geometry import PinholeCamera, PoseSE3
from devo.mapping import SemiDensePointCloud
from devo.tracking import (
    SolverConfig, StaticKeyframes, TrackerConfig, TrackingProblem, add_jacobian,
    compose_increment, huber_loss, huber_weight, linearize, residuals, solve, track_stream,
)

CAM = PinholeCamera(400.0, 400.0, 319.5, 239.5, 640, 480)
A, B, PU, PV = 40.0, 25.0, 70.0, 90.0


def wave(u, v):
    return A * np.sin(2 * np.pi * u / PU) + B * np.sin(2 * np.pi * v / PV)


def wave_grad(u, v):
    return (A * 2 * np.pi / PU * np.cos(2 * np.pi * u / PU),
            B * 2 * np.pi / PV * np.cos(2 * np.pi * v / PV))


WAVE = AnalyticField(wave, wave_grad, CAM.size)


def cloud_from(points):
    points = np.asarray(points, dtype=np.float64)
    uv, _ = CAM.project_points(points)
    return SemiDensePointCloud(np.rint(uv).astype(np.int64), points, points[:, 2].copy())


def zero_set_problem(truth: PoseSE3, n=300, seed=0):
    """Map points whose projections under ``truth`` lie on the zero set of ``wave``."""
    rng = np.random.default_rng(seed)
    v = rng.uniform(40, 440, n)
    s = np.clip(-B / A * np.sin(2 * np.pi * v / PV), -1, 1)
    k = rng.integers(1, 8, n)
    branch = rng.random(n) < 0.5
    u = PU / (2 * np.pi) * np.where(branch, np.arcsin(s), np.pi - np.arcsin(s)) + k * PU
    z = rng.uniform(1.0, 4.0, n)
    P_cur = CAM.backproject_points(np.column_stack([u, v]), z)
    return truth.transform(P_cur)


# Huber --------------------------------------------------------------------------------

def test_huber_values():
    k = 10.0
    np.testing.assert_allclose(huber_loss(np.array([0, 3, -10, 25]), k), [0, 4.5, 50, 200])
    np.testing.assert_allclose(huber_weight(np.array([0, 3, -10, 25]), k), [1, 1, 1, 0.4])


@pytest.mark.parametrize("k", [0.5, 10.0, 37.0])
def test_huber_continuous_and_c1_at_width(k):
    below = np.nextafter(k, 0)
    above = np.nextafter(k, np.inf)
    assert abs(huber_loss(below, k) - huber_loss(above, k)) < 1e-12 * max(1.0, k * k)
    # slopes on both sides of the knee
    h = 1e-7
    left = (huber_loss(k, k) - huber_loss(k - h, k)) / h
    right = (huber_loss(k + h, k) - huber_loss(k, k)) / h
    assert abs(left - right) < 1e-5 * k
    # analytic derivatives agree exactly at the knee
    assert k * huber_weight(k, k) == pytest.approx(k, abs=1e-12)


# residuals ---------------------------------------------------------------------------

def test_perfect_field_gives_zero_residuals_at_truth():
    truth = PoseSE3([0.02, -0.01, 0.015], [0.01, 0.02, -0.005])
    pb = TrackingProblem(cloud_from(zero_set_problem(truth)), WAVE, CAM)
    assert np.max(np.abs(residuals(pb, truth))) < 1e-9


def test_uniform_field_gives_constant_residuals():
    rng = np.random.default_rng(1)
    P = np.column_stack([rng.uniform(-1, 1, 200), rng.uniform(-0.7, 0.7, 200), rng.uniform(2, 4, 200)])
    pb = TrackingProblem(cloud_from(P), PotentialField(np.full((480, 640), 42.0)), CAM)
    for _ in range(5):
        theta = PoseSE3(rng.normal(size=3) * 0.02, rng.normal(size=3) * 0.01)
        np.testing.assert_array_equal(residuals(pb, theta), 42.0)


def test_residuals_match_pointwise_pipeline():
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 255, (480, 640))
    P = np.column_stack([rng.uniform(-1, 1, 300), rng.uniform(-0.8, 0.8, 300), rng.uniform(1.5, 4, 300)])
    pb = TrackingProblem(cloud_from(P), PotentialField(img), CAM)
    theta = PoseSE3([0.05, -0.03, 0.1], [0.02, -0.04, 0.03])
    lin = linearize(pb, theta, jacobian=False)
    R, t = theta.R, theta.t
    expected = []
    for p in pb.points:
        Pc = R.T @ (p - t)
        u = CAM.fx * Pc[0] / Pc[2] + CAM.cx
        v = CAM.fy * Pc[1] / Pc[2] + CAM.cy
        if Pc[2] <= 0 or not (0 <= u <= 639 and 0 <= v <= 479):
            continue
        x0, y0 = min(int(math.floor(u)), 638), min(int(math.floor(v)), 478)
        ax, ay = u - x0, v - y0
        expected.append(img[y0, x0] * (1 - ax) * (1 - ay) + img[y0, x0 + 1] * ax * (1 - ay)
                        + img[y0 + 1, x0] * (1 - ax) * ay + img[y0 + 1, x0 + 1] * ax * ay)
    assert len(expected) == lin.n_valid
    np.testing.assert_allclose(lin.r, expected, rtol=1e-12, atol=0)


def test_all_points_out_of_view_is_degenerate():
    P = np.column_stack([np.linspace(-1, 1, 60), np.zeros(60), np.full(60, 2.0)])
    pb = TrackingProblem(cloud_from(P), WAVE, CAM)
    with pytest.raises(DegenerateProblemError):
        residuals(pb, PoseSE3([0, 0, 5.0], [0, 0, 0]))


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(3)
    P = zero_set_problem(PoseSE3.identity(), n=80, seed=3)
    pb = TrackingProblem(cloud_from(P), WAVE, CAM)
    h = 1e-6
    for _ in range(10):
        theta = PoseSE3(rng.normal(size=3) * 0.03, rng.normal(size=3) * 0.02)
        lin = linearize(pb, theta)
        num = np.empty_like(lin.J)
        for i in range(6):
            d = np.zeros(6)
            d[i] = h
            plus = linearize(pb, compose_increment(d, theta), jacobian=False)
            minus = linearize(pb, compose_increment(-d, theta), jacobian=False)
            assert np.array_equal(plus.valid, lin.valid) and np.array_equal(minus.valid, lin.valid)
            num[:, i] = (plus.r - minus.r) / (2 * h)
        big = np.abs(lin.J) > 1e-6
        assert np.max(np.abs(lin.J - num)[big] / np.abs(lin.J)[big]) < 1e-4


# solve --------------------------------------------------------------------------------

def test_solve_at_truth_is_a_fixed_point():
    truth = PoseSE3([0.02, -0.01, 0.015], [0.01, 0.02, -0.005])
    pb = TrackingProblem(cloud_from(zero_set_problem(truth)), WAVE, CAM, truth)
    res = solve(pb)
    assert res.converged and res.iterations <= 2
    assert res.first_step_norm < 1e-8
    delta = np.linalg.norm((truth.inverse() @ res.theta_rel).as_vector())
    assert delta < 1e-6


def recovery_problem(seed):
    scene = synth.default_scene(0)
    rng = np.random.default_rng(seed)
    dt = rng.normal(size=3)
    dq = rng.normal(size=3)
    truth = PoseSE3(dt / np.linalg.norm(dt) * 0.01, dq / np.linalg.norm(dq) * math.radians(0.5))
    # oblique keyframe view: edges cross the pixel grid at varied phases, which keeps the
    # bilinear ripple of the sampled field from biasing the minimum
    ref = scene.trajectory.pose(4.0)
    pts = scene.edge_points()
    uv_ref, vis = synth._project_edges(scene, ref, pts)
    vis &= synth._unoccluded(scene, ref, pts) & scene.cam_e.contains(uv_ref)
    P = ref.inverse().transform(pts[vis])
    uv_cur, ok = scene.cam_e.project_points(truth.inverse().transform(P))
    field = PotentialField(synth.distance_field(uv_cur[ok], scene.cam_e.size, sigma=4.0))
    cloud = SemiDensePointCloud(np.rint(uv_ref[vis]).astype(np.int64), P, P[:, 2].copy())
    return TrackingProblem(cloud, field, scene.cam_e), truth


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_recovers_small_motion_from_identity(seed):
    pb, truth = recovery_problem(seed)
    res = solve(pb)
    err = truth.inverse() @ res.theta_rel
    assert np.linalg.norm(err.t) < 1e-3
    assert math.degrees(err.angle) < 0.05


def test_accepted_steps_never_increase_cost():
    pb, _ = recovery_problem(4)
    # a 60 px border keeps every point in view for the whole solve, so no point enters
    # or leaves the cost between iterations
    px = pb.cloud.pixels
    inner = ((px[:, 0] >= 60) & (px[:, 0] <= 579) & (px[:, 1] >= 60) & (px[:, 1] <= 419))
    c = pb.cloud
    pb = TrackingProblem(SemiDensePointCloud(px[inner], c.points[inner], c.depths[inner]),
                         pb.field, pb.cam_e)
    res = solve(pb, SolverConfig(ftol=0.0))
    assert len(res.costs) > 2
    assert np.all(np.diff(res.costs) <= 0)


def test_uniform_field_does_not_move():
    rng = np.random.default_rng(5)
    P = np.column_stack([rng.uniform(-1, 1, 200), rng.uniform(-0.7, 0.7, 200), rng.uniform(2, 4, 200)])
    init = PoseSE3([0.01, 0.0, 0.0], [0.0, 0.01, 0.0])
    pb = TrackingProblem(cloud_from(P), PotentialField(np.full((480, 640), 100.0)), CAM, init)
    res = solve(pb)
    assert res.first_step_norm == 0.0
    np.testing.assert_array_equal(res.theta_rel.as_vector(), init.as_vector())


def test_point_order_does_not_change_solution():
    pb, _ = recovery_problem(6)
    rng = np.random.default_rng(6)
    p = rng.permutation(len(pb.cloud))
    c = pb.cloud
    shuffled = SemiDensePointCloud(c.pixels[p], c.points[p], c.depths[p])
    a = solve(pb)
    b = solve(TrackingProblem(shuffled, pb.field, pb.cam_e))
    assert np.max(np.abs(a.theta_rel.as_vector() - b.theta_rel.as_vector())) <= 1e-10


def test_too_few_points_is_tracking_lost():
    P = zero_set_problem(PoseSE3.identity(), n=49)
    with pytest.raises(TrackingLost):
        solve(TrackingProblem(cloud_from(P), WAVE, CAM))


def test_rank_deficient_normal_equations_are_tracking_lost():
    # field varies only along u and every point shares one depth and one row:
    # translation along y and several rotations leave the cost unchanged
    field = AnalyticField(lambda u, v: 20 * np.sin(u / 15), lambda u, v: (4 / 3 * np.cos(u / 15), 0 * v),
                          CAM.size)
    P = CAM.backproject_points(np.column_stack([np.linspace(50, 600, 100), np.full(100, 239.5)]),
                               np.full(100, 2.0))
    with pytest.raises(TrackingLost):
        solve(TrackingProblem(cloud_from(P), field, CAM, PoseSE3([0.003, 0, 0], [0, 0, 0])))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000))
def test_result_fields_in_range(seed):
    rng = np.random.default_rng(seed)
    truth = PoseSE3(rng.normal(size=3) * 0.005, rng.normal(size=3) * 0.003)
    pb = TrackingProblem(cloud_from(zero_set_problem(truth, n=120, seed=seed)), WAVE, CAM)
    res = solve(pb)
    assert res.final_cost >= 0
    assert 0 <= res.inlier_fraction <= 1
    assert res.iterations <= SolverConfig().max_iters


# track_stream ------------------------------------------------------------------------

def flicker_stream(duration_us=300_000, period_us=1000):
    """Full-width rows and full-height columns firing together, camera at rest."""
    xs = np.arange(640)
    ys = np.arange(480)
    px = np.concatenate([np.column_stack([xs, np.full(640, r)]) for r in (100, 250, 400)]
                        + [np.column_stack([np.full(480, c), ys]) for c in (120, 330, 520)])
    px = np.unique(px, axis=0)
    ts = np.arange(0, duration_us, period_us)
    t = np.repeat(ts, len(px))
    xy = np.tile(px, (len(ts), 1))
    return EventStream(t, xy[:, 0], xy[:, 1], np.ones(len(t)), CAM.size), px


def test_zero_motion_keeps_initial_pose():
    events, px = flicker_stream()
    rng = np.random.default_rng(7)
    P = CAM.backproject_points(px.astype(float), rng.uniform(1.5, 3.0, len(px)))
    cloud = SemiDensePointCloud(px, P, P[:, 2].copy())
    traj = track_stream(events, StaticKeyframes(cloud), CAM)
    assert len(traj) > 20 and traj.lost_at is None
    for pose in traj.poses:
        assert np.linalg.norm(pose.t) < 1e-6 and pose.angle < 1e-6


def test_stream_ending_before_first_tick_is_empty():
    events = EventStream([0, 10, 20_000], [1, 2, 3], [1, 2, 3], [1, 1, 1], CAM.size)
    cloud = cloud_from(zero_set_problem(PoseSE3.identity(), n=60))
    traj = track_stream(events, StaticKeyframes(cloud), CAM, TrackerConfig(bootstrap_delay_us=50_000))
    assert len(traj) == 0 and traj.lost_at is None


def test_empty_stream_is_empty_trajectory():
    cloud = cloud_from(zero_set_problem(PoseSE3.identity(), n=60))
    assert len(track_stream(EventStream.empty(CAM.size), StaticKeyframes(cloud), CAM)) == 0


def test_loss_is_reported_and_truncates_trajectory():
    events, px = flicker_stream(100_000)
    P = CAM.backproject_points(px[:30].astype(float), np.full(30, 2.0))
    cloud = SemiDensePointCloud(px[:30], P, P[:, 2].copy())
    diag = []
    traj = track_stream(events, StaticKeyframes(cloud), CAM, diagnostics=diag)
    assert len(traj) == 0
    assert traj.lost_at == pytest.approx(0.05)
    assert {row["status"] for row in diag} == {"lost"}
