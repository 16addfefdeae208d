"""Shape-aware per-object augmentation and global frame augmentation."""

import math

import numpy as np
import pytest

from pillardet.augmentation import (AugmentParams, apply_global,
                                    global_augment, pyramid_partition,
                                    shape_aware_augment)
from pillardet.geometry import (Box3D, LabeledBox, LabeledFrame, PointCloud,
                                points_in_box)

NOOP = AugmentParams(p_dropout=0.0, p_swap=0.0, p_sparsify=0.0,
                     rotation_range=0.0, flip_probability=0.0,
                     scale_range=(1.0, 1.0))


def frame_with_boxes(n_boxes=3, pts_per_box=40, seed=0):
    rng = np.random.default_rng(seed)
    boxes = []
    clouds = []
    for i in range(n_boxes):
        box = Box3D(12.0 * i, 0.0, 1.0, 4.0, 2.0, 2.0,
                    rng.uniform(-math.pi, math.pi))
        boxes.append(LabeledBox(box, 0, f"v{i}"))
        local = rng.uniform(-0.45, 0.45, size=(pts_per_box, 3)) * \
            np.array([box.l, box.w, box.h])
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        world = np.column_stack([c * local[:, 0] - s * local[:, 1] + box.cx,
                                 s * local[:, 0] + c * local[:, 1] + box.cy,
                                 local[:, 2] + box.cz])
        clouds.append(world)
    background = rng.uniform(-40, 40, size=(100, 3))
    background[:, 2] = 0.0
    xyz = np.vstack(clouds + [background])
    cloud = PointCloud(xyz, rng.uniform(0, 1, size=len(xyz)))
    return LabeledFrame(cloud, tuple(boxes), "f0")


# ---------------------------------------------------------------------------
# params / partition

def test_augment_params_validation():
    with pytest.raises(ValueError):
        AugmentParams(p_dropout=1.5)
    with pytest.raises(ValueError):
        AugmentParams(sparsify_keep_ratio=0.0)
    with pytest.raises(ValueError):
        AugmentParams(scale_range=(0.5, 2.5))


def test_pyramid_partition_covers_box_points_disjointly():
    frame = frame_with_boxes(n_boxes=1, pts_per_box=200, seed=1)
    box = frame.boxes[0].box
    parts = pyramid_partition(box, frame.cloud)
    assert len(parts) == 6
    union = np.concatenate(parts)
    assert len(union) == len(np.unique(union))
    expect = points_in_box(frame.cloud, box)
    assert set(union.tolist()) == set(expect.tolist())


def test_pyramid_partition_face_assignment():
    box = Box3D(0, 0, 0, 2.0, 2.0, 2.0, 0.0)
    pts = np.array([[0.9, 0.0, 0.0],     # +x face
                    [-0.9, 0.0, 0.0],    # -x face
                    [0.0, 0.9, 0.0],     # +y face
                    [0.0, -0.9, 0.0],    # -y face
                    [0.0, 0.0, 0.9],     # +z face
                    [0.0, 0.0, -0.9]])   # -z face
    cloud = PointCloud(pts, np.full(6, 0.5))
    parts = pyramid_partition(box, cloud)
    for f in range(6):
        assert parts[f].tolist() == [f]


def test_pyramid_partition_tie_goes_to_lowest_face():
    box = Box3D(0, 0, 0, 2.0, 2.0, 2.0, 0.0)
    cloud = PointCloud(np.array([[0.5, 0.5, 0.5], [0.0, 0.0, 0.0]]),
                       np.full(2, 0.5))
    parts = pyramid_partition(box, cloud)
    assert parts[0].tolist() == [0, 1]   # both tie on every face


# ---------------------------------------------------------------------------
# shape-aware augmentation

def test_shape_aware_zero_probabilities_is_exact_noop():
    frame = frame_with_boxes(seed=2)
    out = shape_aware_augment(frame, NOOP, rng_seed=5)
    assert out is frame


def test_shape_aware_labels_never_change():
    frame = frame_with_boxes(seed=3)
    params = AugmentParams(p_dropout=0.5, p_swap=0.5, p_sparsify=0.5)
    for seed in range(10):
        out = shape_aware_augment(frame, params, rng_seed=seed)
        assert out.boxes == frame.boxes
        assert out.frame_id == frame.frame_id


def test_shape_aware_deterministic_per_seed():
    frame = frame_with_boxes(seed=4)
    params = AugmentParams(p_dropout=0.3, p_swap=0.3, p_sparsify=0.3)
    for seed in range(20):
        a = shape_aware_augment(frame, params, rng_seed=seed)
        b = shape_aware_augment(frame, params, rng_seed=seed)
        assert np.array_equal(a.cloud.xyz, b.cloud.xyz)
        assert np.array_equal(a.cloud.intensity, b.cloud.intensity)


def test_swap_only_conserves_point_count():
    frame = frame_with_boxes(n_boxes=4, seed=5)
    params = AugmentParams(p_dropout=0.0, p_swap=1.0, p_sparsify=0.0)
    for seed in range(10):
        out = shape_aware_augment(frame, params, rng_seed=seed)
        assert len(out.cloud) == len(frame.cloud)


def test_swap_keeps_points_inside_destination_boxes():
    frame = frame_with_boxes(n_boxes=3, seed=6)
    params = AugmentParams(p_dropout=0.0, p_swap=1.0, p_sparsify=0.0)
    out = shape_aware_augment(frame, params, rng_seed=1)
    in_box_total = sum(len(points_in_box(out.cloud, lb.box))
                      for lb in out.boxes)
    in_box_before = sum(len(points_in_box(frame.cloud, lb.box))
                        for lb in frame.boxes)
    assert in_box_total == in_box_before


def test_dropout_only_removes_points():
    frame = frame_with_boxes(seed=7)
    params = AugmentParams(p_dropout=1.0, p_swap=0.0, p_sparsify=0.0)
    out = shape_aware_augment(frame, params, rng_seed=0)
    # every box pyramid dropped: no in-box points remain
    for lb in out.boxes:
        assert len(points_in_box(out.cloud, lb.box)) == 0
    # background untouched
    assert len(out.cloud) == len(frame.cloud) - sum(
        len(points_in_box(frame.cloud, lb.box)) for lb in frame.boxes)


def test_sparsify_only_keeps_requested_fraction():
    frame = frame_with_boxes(n_boxes=1, pts_per_box=64, seed=8)
    params = AugmentParams(p_dropout=0.0, p_swap=0.0, p_sparsify=1.0,
                           sparsify_keep_ratio=0.5)
    out = shape_aware_augment(frame, params, rng_seed=0)
    before = pyramid_partition(frame.boxes[0].box, frame.cloud)
    after = len(points_in_box(out.cloud, out.boxes[0].box))
    expect = sum(max(1, round(len(p) * 0.5)) if len(p) > 1 else len(p)
                 for p in before)
    assert after == expect


def test_background_points_never_touched():
    frame = frame_with_boxes(seed=9)
    in_any = np.zeros(len(frame.cloud), dtype=bool)
    for lb in frame.boxes:
        in_any[points_in_box(frame.cloud, lb.box)] = True
    background = frame.cloud.xyz[~in_any]
    params = AugmentParams(p_dropout=0.5, p_swap=0.5, p_sparsify=0.5)
    out = shape_aware_augment(frame, params, rng_seed=3)
    as_rows = {tuple(p) for p in out.cloud.xyz}
    for p in background:
        assert tuple(p) in as_rows


# ---------------------------------------------------------------------------
# global augmentation

def test_global_augment_zero_config_is_noop():
    frame = frame_with_boxes(seed=10)
    out = global_augment(frame, NOOP, rng_seed=0)
    assert np.allclose(out.cloud.xyz, frame.cloud.xyz, atol=1e-12)
    for a, b in zip(out.boxes, frame.boxes):
        assert a.box.yaw == pytest.approx(b.box.yaw, abs=1e-12)


def test_apply_global_similarity_scales_pairwise_distances():
    frame = frame_with_boxes(seed=11)
    scale = 1.04
    out = apply_global(frame, angle=0.6, flip=True, scale=scale)
    n = min(len(frame.cloud), 80)
    d_in = np.linalg.norm(frame.cloud.xyz[:n, None] -
                          frame.cloud.xyz[None, :n], axis=-1)
    d_out = np.linalg.norm(out.cloud.xyz[:n, None] -
                           out.cloud.xyz[None, :n], axis=-1)
    assert np.abs(d_out - scale * d_in).max() < 1e-9


def test_apply_global_moves_boxes_with_points():
    frame = frame_with_boxes(seed=12)
    out = apply_global(frame, angle=0.8, flip=True, scale=0.97)
    for before, after in zip(frame.boxes, out.boxes):
        n_before = len(points_in_box(frame.cloud, before.box))
        n_after = len(points_in_box(out.cloud, after.box))
        assert n_before == n_after


def test_apply_global_flip_negates_y_and_yaw():
    box = Box3D(3.0, 4.0, 1.0, 4.0, 2.0, 1.5, 0.7)
    frame = LabeledFrame(PointCloud(np.array([[1.0, 2.0, 0.5]]),
                                    np.array([0.5])),
                         (LabeledBox(box, 0, "a"),))
    out = apply_global(frame, angle=0.0, flip=True, scale=1.0)
    assert out.cloud.xyz[0, 1] == pytest.approx(-2.0)
    assert out.boxes[0].box.cy == pytest.approx(-4.0)
    assert out.boxes[0].box.yaw == pytest.approx(-0.7)


def test_global_augment_deterministic():
    frame = frame_with_boxes(seed=13)
    params = AugmentParams()
    a = global_augment(frame, params, rng_seed=9)
    b = global_augment(frame, params, rng_seed=9)
    assert np.array_equal(a.cloud.xyz, b.cloud.xyz)
    assert a.boxes == b.boxes
