"""Registration: voxel downsampling, rigid estimation, point-to-point ICP."""

import math

import numpy as np
import pytest

from pillardet.geometry import (PointCloud, RigidTransform, apply_transform,
                                compose, invert)
from pillardet.registration import (DegenerateGeometryError, IcpParams,
                                    NoOverlapError, estimate_rigid,
                                    icp_point_to_point, voxel_downsample)


def structured_cloud(n, seed=0):
    """A few dense blobs: enough structure for unambiguous alignment."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-20, 20, size=(6, 3))
    pts = np.concatenate([c + rng.normal(scale=1.5, size=(n // 6 + 1, 3))
                          for c in centers])[:n]
    return PointCloud(pts, np.full(n, 0.5))


def rotation_angle(r):
    return math.acos(min(1.0, max(-1.0, (np.trace(r) - 1.0) / 2.0)))


# ---------------------------------------------------------------------------
# voxel downsample

def test_voxel_downsample_centroids():
    pts = np.array([[0.1, 0.1, 0.1], [0.3, 0.3, 0.3],   # same cell at 1 m
                    [1.5, 0.0, 0.0]])
    pc = PointCloud(pts, np.array([0.2, 0.4, 0.6]))
    out = voxel_downsample(pc, 1.0)
    assert len(out) == 2
    got = {tuple(np.round(p, 6)) for p in out.xyz}
    assert (0.2, 0.2, 0.2) in got and (1.5, 0.0, 0.0) in got


def test_voxel_downsample_idempotent():
    pc = structured_cloud(500, seed=1)
    once = voxel_downsample(pc, 2.0)
    twice = voxel_downsample(once, 2.0)
    assert np.array_equal(once.xyz, twice.xyz)
    assert np.array_equal(once.intensity, twice.intensity)


def test_voxel_downsample_empty_and_invalid():
    assert len(voxel_downsample(PointCloud.empty(), 1.0)) == 0
    with pytest.raises(ValueError):
        voxel_downsample(structured_cloud(10), 0.0)


# ---------------------------------------------------------------------------
# rigid estimation

def test_estimate_rigid_recovers_exact_transform():
    rng = np.random.default_rng(2)
    src = rng.normal(size=(100, 3))
    truth = RigidTransform.from_yaw(0.9, (1.0, -2.0, 0.3))
    tgt = src @ truth.rotation.T + truth.translation
    est = estimate_rigid(src, tgt)
    assert np.allclose(est.rotation, truth.rotation, atol=1e-9)
    assert np.allclose(est.translation, truth.translation, atol=1e-9)


def test_estimate_rigid_output_is_valid_rotation():
    rng = np.random.default_rng(3)
    for _ in range(20):
        src = rng.normal(size=(10, 3))
        tgt = rng.normal(size=(10, 3))
        est = estimate_rigid(src, tgt)  # construction re-validates
        assert np.allclose(est.rotation.T @ est.rotation, np.eye(3),
                           atol=1e-9)
        assert np.linalg.det(est.rotation) == pytest.approx(1.0, abs=1e-9)


def test_estimate_rigid_reflection_is_never_produced():
    # points mirrored through a plane: best proper rotation, not reflection
    rng = np.random.default_rng(4)
    src = rng.normal(size=(50, 3))
    tgt = src * np.array([1.0, 1.0, -1.0])
    est = estimate_rigid(src, tgt)
    assert np.linalg.det(est.rotation) == pytest.approx(1.0, abs=1e-9)


def test_estimate_rigid_degenerate_inputs():
    with pytest.raises(DegenerateGeometryError):
        estimate_rigid(np.zeros((2, 3)), np.zeros((2, 3)))
    line = np.outer(np.arange(10.0), [1.0, 0.0, 0.0])
    with pytest.raises(DegenerateGeometryError):
        estimate_rigid(line, line + 1.0)


# ---------------------------------------------------------------------------
# ICP

def test_icp_identical_clouds_converges_immediately():
    pc = structured_cloud(300, seed=5)
    result = icp_point_to_point(pc, pc)
    assert result.rmse < 1e-9
    assert result.iterations <= 2
    assert np.allclose(result.transform.rotation, np.eye(3), atol=1e-9)


def test_icp_recovers_small_transform():
    src = structured_cloud(2000, seed=6)
    truth = RigidTransform.from_yaw(math.radians(6.0), (0.3, -0.2, 0.1))
    tgt = apply_transform(truth, src)
    result = icp_point_to_point(src, tgt)
    err = compose(invert(truth), result.transform)
    assert rotation_angle(err.rotation) < math.radians(0.1)
    assert np.linalg.norm(err.translation) < 0.01


def test_icp_rmse_history_non_increasing():
    rng = np.random.default_rng(7)
    src = structured_cloud(1500, seed=8)
    truth = RigidTransform.from_yaw(math.radians(5.0), (0.2, 0.4, 0.0))
    noisy = apply_transform(truth, src)
    noisy = PointCloud(noisy.xyz + rng.normal(scale=0.01, size=noisy.xyz.shape),
                       noisy.intensity)
    result = icp_point_to_point(src, noisy)
    hist = result.rmse_history
    assert len(hist) >= 1 and result.rmse == hist[-1]
    for a, b in zip(hist, hist[1:]):
        assert b <= a + 1e-9
    assert result.iterations <= IcpParams().max_iterations


def test_icp_good_init_beats_identity_on_large_offset():
    src = structured_cloud(1500, seed=9)
    truth = RigidTransform.from_yaw(math.radians(60.0), (4.0, -3.0, 0.0))
    tgt = apply_transform(truth, src)
    near = compose(RigidTransform.from_yaw(math.radians(2.0), (0.1, 0.1, 0.0)),
                   truth)
    res_good = icp_point_to_point(src, tgt, IcpParams(initial=near))
    res_identity = icp_point_to_point(src, tgt)
    err_good = rotation_angle(
        compose(invert(truth), res_good.transform).rotation)
    err_identity = rotation_angle(
        compose(invert(truth), res_identity.transform).rotation)
    assert err_good < err_identity


def test_icp_no_overlap_carries_last_transform():
    src = structured_cloud(100, seed=10)
    far = PointCloud(src.xyz + 1000.0, src.intensity)
    with pytest.raises(NoOverlapError) as exc_info:
        icp_point_to_point(src, far, IcpParams(correspondence_max_dist=1.0))
    assert np.allclose(exc_info.value.last_transform.rotation, np.eye(3))


def test_icp_rejects_empty_and_bad_params():
    pc = structured_cloud(10)
    with pytest.raises(ValueError):
        icp_point_to_point(PointCloud.empty(), pc)
    with pytest.raises(ValueError):
        IcpParams(max_iterations=0)
    with pytest.raises(ValueError):
        IcpParams(correspondence_max_dist=0.0)
