import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from devo.errors import ParameterError
from devo.geometry import ExtrinsicCalib, PinholeCamera, PoseSE3
from devo.mapping import (
    DepthFrame, WarpedSamples, assign_depths, scatter_depth, should_create_keyframe,
)

CAM = PinholeCamera(50.0, 50.0, 20.0, 15.0, 40, 30)


def brute_assign(region, uv, z, radius, gap):
    """Per-pixel reference: gather, sort, split on gaps, blend the nearest cluster."""
    out = {}
    for x, y in region:
        d = np.hypot(uv[:, 0] - x, uv[:, 1] - y)
        near = d <= radius
        if not near.any():
            continue
        zs, ds = z[near], d[near]
        order = np.argsort(zs, kind="stable")
        zs, ds = zs[order], ds[order]
        end = 1
        while end < len(zs) and zs[end] - zs[end - 1] <= gap:
            end += 1
        zs, ds = zs[:end], ds[:end]
        if np.any(ds < 1e-9):
            val = zs[ds < 1e-9].mean()
        else:
            w = 1.0 / ds
            val = (w * zs).sum() / w.sum()
        out[(int(x), int(y))] = val
    return out


def random_case(rng, n_region=60, n_samples=400):
    region = np.unique(np.column_stack([rng.integers(0, CAM.width, n_region),
                                        rng.integers(0, CAM.height, n_region)]), axis=0)
    uv = np.column_stack([rng.uniform(-0.5, CAM.width - 0.5, n_samples),
                          rng.uniform(-0.5, CAM.height - 0.5, n_samples)])
    z = np.where(rng.random(n_samples) < 0.3, rng.uniform(4, 5, n_samples),
                 rng.uniform(1, 1.5, n_samples))
    return region, WarpedSamples(uv, z)


# scatter_depth -------------------------------------------------------------------

def test_scatter_identity_lands_on_pixel_centers():
    depth = DepthFrame(np.full((30, 40), 2.0), 0, CAM)
    s = scatter_depth(depth, ExtrinsicCalib.identity(), CAM)
    assert len(s) == 30 * 40
    xs, ys = np.meshgrid(np.arange(40.0), np.arange(30.0))
    np.testing.assert_allclose(s.uv, np.column_stack([xs.ravel(), ys.ravel()]), atol=1e-12)
    np.testing.assert_allclose(s.z, 2.0)


def test_scatter_all_zero_frame_is_empty():
    s = scatter_depth(DepthFrame(np.zeros((30, 40)), 0, CAM), ExtrinsicCalib.identity(), CAM)
    assert len(s) == 0
    assert s.dropped_invalid == 30 * 40


def test_scatter_matches_matrix_oracle_on_two_planes():
    cam_d = PinholeCamera(45.0, 46.0, 19.0, 14.5, 40, 30)
    calib = ExtrinsicCalib(PoseSE3([-0.05, 0.01, 0.02], [0.01, -0.03, 0.02]))
    values = np.full((30, 40), 4.0)
    values[8:20, 10:25] = 1.5
    values[0, :5] = 0.0
    s = scatter_depth(DepthFrame(values, 0, cam_d), calib, CAM)
    K_d = np.array([[45.0, 0, 19.0], [0, 46.0, 14.5], [0, 0, 1]])
    K_e = np.array([[50.0, 0, 20.0], [0, 50.0, 15.0], [0, 0, 1]])
    T = calib.T_ed.matrix()
    expected = []
    for y in range(30):
        for x in range(40):
            z = values[y, x]
            if z <= 0:
                continue
            P = T @ np.append(np.linalg.inv(K_d) @ [x, y, 1.0] * z, 1.0)
            p = K_e @ P[:3]
            u, v = p[0] / p[2], p[1] / p[2]
            if P[2] > 0 and 0 <= u <= 39 and 0 <= v <= 29:
                expected.append((u, v, P[2]))
    expected = np.array(expected)
    assert len(s) == len(expected)
    np.testing.assert_allclose(s.uv, expected[:, :2], atol=1e-9)
    np.testing.assert_allclose(s.z, expected[:, 2], atol=1e-12)
    assert s.dropped_invalid == 5
    assert s.dropped_out_of_bounds == 40 * 30 - 5 - len(expected)


# assign_depths --------------------------------------------------------------------

def test_sample_at_pixel_center_gives_exact_depth():
    cloud = assign_depths([[5, 7]], WarpedSamples(np.array([[5.0, 7.0], [5.6, 7.2]]),
                                                  np.array([2.345, 2.4])), CAM, radius=1.0)
    assert cloud.depths.tolist() == [2.345]


def test_background_sample_has_no_influence():
    uv = np.array([[5.3, 7.0], [4.6, 7.4], [5.0, 6.2]])
    z = np.array([2.00, 2.01, 5.00])
    with_bg = assign_depths([[5, 7]], WarpedSamples(uv, z), CAM, radius=1.5, cluster_gap=0.5)
    without = assign_depths([[5, 7]], WarpedSamples(uv[:2], z[:2]), CAM, radius=1.5,
                            cluster_gap=0.5)
    assert 2.00 <= with_bg.depths[0] <= 2.01
    assert with_bg.depths[0] == without.depths[0]


def test_pixel_without_samples_is_dropped():
    cloud = assign_depths([[5, 7], [30, 20]], WarpedSamples(np.array([[5.2, 7.1]]), np.array([3.0])),
                          CAM, radius=1.5)
    assert cloud.pixels.tolist() == [[5, 7]]


def test_empty_inputs_give_empty_cloud():
    s = WarpedSamples(np.array([[1.0, 1.0]]), np.array([1.0]))
    assert len(assign_depths(np.zeros((0, 2)), s, CAM)) == 0
    assert len(assign_depths([[1, 1]], WarpedSamples(np.zeros((0, 2)), np.zeros(0)), CAM)) == 0


def test_invalid_parameters():
    s = WarpedSamples(np.array([[1.0, 1.0]]), np.array([1.0]))
    with pytest.raises(ParameterError):
        assign_depths([[1, 1]], s, CAM, radius=0)
    with pytest.raises(ParameterError):
        assign_depths([[1, 1]], s, CAM, cluster_gap=-1)


@pytest.mark.parametrize("radius", [0.7, 1.0, 1.5, 2.3])
def test_matches_brute_force_reference(radius):
    rng = np.random.default_rng(int(radius * 10))
    region, samples = random_case(rng)
    cloud = assign_depths(region, samples, CAM, radius=radius, cluster_gap=0.3)
    ref = brute_assign(region, samples.uv, samples.z, radius, 0.3)
    got = {tuple(p): d for p, d in zip(cloud.pixels.tolist(), cloud.depths)}
    assert got.keys() == ref.keys()
    for k, v in ref.items():
        assert got[k] == pytest.approx(v, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_depth_within_foreground_cluster_and_reprojects(seed):
    rng = np.random.default_rng(seed)
    region, samples = random_case(rng)
    cloud = assign_depths(region, samples, CAM, radius=1.5, cluster_gap=0.3)
    for (x, y), depth in zip(cloud.pixels, cloud.depths):
        d = np.hypot(samples.uv[:, 0] - x, samples.uv[:, 1] - y)
        zs = np.sort(samples.z[d <= 1.5])
        end = 1
        while end < len(zs) and zs[end] - zs[end - 1] <= 0.3:
            end += 1
        assert zs[0] <= depth <= zs[end - 1]
    assert np.all(cloud.depths > 0)
    uv, _ = CAM.project_points(cloud.points)
    assert np.max(np.abs(uv - cloud.pixels), initial=0) <= 0.5
    np.testing.assert_array_equal(cloud.points[:, 2], cloud.depths)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_sample_and_region_order_do_not_matter(seed):
    rng = np.random.default_rng(seed)
    region, samples = random_case(rng)
    a = assign_depths(region, samples, CAM)
    p = rng.permutation(len(samples))
    b = assign_depths(region[rng.permutation(len(region))], WarpedSamples(samples.uv[p], samples.z[p]),
                      CAM)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    np.testing.assert_array_equal(a.depths, b.depths)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.3, 3.0), st.floats(0.3, 3.0))
def test_shrinking_radius_never_adds_pixels(seed, r1, r2):
    small, big = sorted((r1, r2))
    region, samples = random_case(np.random.default_rng(seed))
    a = {tuple(p) for p in assign_depths(region, samples, CAM, radius=small).pixels.tolist()}
    b = {tuple(p) for p in assign_depths(region, samples, CAM, radius=big).pixels.tolist()}
    assert a <= b


# should_create_keyframe ------------------------------------------------------------

def test_identical_poses_do_not_trigger():
    p = PoseSE3([1, 2, 3], [0.1, 0.2, 0.3])
    assert not should_create_keyframe(p, p)


def test_translation_beyond_threshold_triggers():
    ref = PoseSE3([0.5, 0, 0], [0, 0.3, 0])
    cur = ref @ PoseSE3([0.1, 0, 0], [0, 0, 0])
    assert should_create_keyframe(cur, ref, trans_thresh=0.05)


def test_rotation_exactly_at_threshold_does_not_trigger():
    rot = math.radians(3.0)
    ref = PoseSE3([0.2, -0.1, 0.4], [0.3, -0.2, 0.1])
    axis = np.array([1.0, 2.0, 2.0]) / 3.0
    cur = ref @ PoseSE3([0, 0, 0], axis * rot)
    assert not should_create_keyframe(cur, ref, rot_thresh=rot)
    cur = ref @ PoseSE3([0, 0, 0], axis * rot * 1.001)
    assert should_create_keyframe(cur, ref, rot_thresh=rot)


def test_depth_frame_validation():
    with pytest.raises(ParameterError):
        DepthFrame(np.zeros((3, 3)), 0, CAM)
    with pytest.raises(ParameterError):
        DepthFrame(-np.ones((30, 40)), 0, CAM)
    frame = DepthFrame(np.array([[0.05, 1.0, 25.0] + [0.0] * 37] + [[0.0] * 40] * 29), 0, CAM)
    assert frame.valid_mask().sum() == 1
