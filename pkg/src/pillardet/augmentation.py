"""Shape-aware per-object augmentation and global frame augmentation.

Shape-aware augmentation partitions each ground-truth box into six
pyramids (apex at the box center, base on one face) and independently
applies dropout, swap-with-a-peer, or sparsify to each pyramid. Labels
are never moved or resized; only point memberships change.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import (Box3D, LabeledBox, LabeledFrame, PointCloud,
                       box_frame_coords, box_to_world_coords, normalize_angle,
                       points_in_box_xyz)
from .preprocessing import farthest_point_sample


@dataclass(frozen=True)
class AugmentParams:
    p_dropout: float = 0.25
    p_swap: float = 0.1
    p_sparsify: float = 0.1
    sparsify_keep_ratio: float = 0.5
    rotation_range: float = math.pi / 4.0
    flip_probability: float = 0.5
    scale_range: tuple = (0.95, 1.05)

    def __post_init__(self):
        for p in (self.p_dropout, self.p_swap, self.p_sparsify,
                  self.flip_probability):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must be within [0, 1]")
        if not 0.0 < self.sparsify_keep_ratio <= 1.0:
            raise ValueError("sparsify_keep_ratio must be in (0, 1]")
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi < 2.0):
            raise ValueError("scale_range must lie inside (0, 2)")


# face order: +x, -x, +y, -y, +z, -z (box frame)
_FACE_AXES = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0],
                       [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float)


def pyramid_partition(box: Box3D, cloud: PointCloud):
    """Split the in-box points into 6 disjoint index sets, one per face.

    A point belongs to the pyramid of the face with the largest
    normalized signed distance in the box frame; exact ties go to the
    lowest face index. The union over the sets equals points_in_box.
    """
    inside = points_in_box_xyz(cloud.xyz, box)
    if inside.size == 0:
        return [np.empty(0, dtype=int) for _ in range(6)]
    local = box_frame_coords(cloud.xyz[inside], box)
    half = np.array([box.l, box.w, box.h]) / 2.0
    normalized = local / half
    # scores per face: distance toward each face, in face order
    scores = normalized @ _FACE_AXES.T
    face = np.argmax(scores, axis=1)
    return [inside[face == f] for f in range(6)]


def _swap_points(xyz_a: np.ndarray, box_a: Box3D, box_b: Box3D) -> np.ndarray:
    """Carry points from box_a's frame into box_b, rescaling by the
    dimension ratio so they stay inside the destination box."""
    local = box_frame_coords(xyz_a, box_a)
    scale = np.array([box_b.l / box_a.l, box_b.w / box_a.w, box_b.h / box_a.h])
    return box_to_world_coords(local * scale, box_b)


def shape_aware_augment(frame: LabeledFrame, params: AugmentParams,
                        rng_seed: int = 0) -> LabeledFrame:
    """Per box, per pyramid: dropout, swap, or sparsify, each drawn
    independently. Deterministic for a given seed; an all-zero
    probability config returns the frame unchanged, bit for bit.
    """
    rng = np.random.default_rng(rng_seed)
    xyz = frame.cloud.xyz
    inten = frame.cloud.intensity
    boxes = list(frame.boxes)

    # first-box-wins assignment keeps overlapping boxes disjoint
    claimed = np.zeros(len(xyz), dtype=bool)
    pyramids = {}  # (box_idx, face) -> index array
    for bi, lb in enumerate(boxes):
        parts = pyramid_partition(lb.box, frame.cloud)
        for f, idx in enumerate(parts):
            idx = idx[~claimed[idx]]
            claimed[idx] = True
            pyramids[(bi, f)] = idx

    removed = np.zeros(len(xyz), dtype=bool)
    new_xyz, new_inten = [], []

    for bi, lb in enumerate(boxes):
        for f in range(6):
            idx = pyramids[(bi, f)]
            draws = rng.random(3)
            if draws[0] < params.p_dropout:
                removed[idx] = True
                pyramids[(bi, f)] = np.empty(0, dtype=int)
                continue
            if draws[1] < params.p_swap:
                partners = [bj for bj, other in enumerate(boxes)
                            if bj != bi and other.class_id == lb.class_id
                            and len(pyramids[(bj, f)]) > 0]
                if partners:
                    bj = partners[int(rng.integers(len(partners)))]
                    jdx = pyramids[(bi, f)]
                    kdx = pyramids[(bj, f)]
                    # exchange both pyramids through the boxes' local frames
                    to_b = _swap_points(xyz[jdx], lb.box, boxes[bj].box)
                    to_a = _swap_points(xyz[kdx], boxes[bj].box, lb.box)
                    removed[jdx] = True
                    removed[kdx] = True
                    new_xyz.extend([to_a, to_b])
                    new_inten.extend([inten[kdx], inten[jdx]])
                    pyramids[(bi, f)] = np.empty(0, dtype=int)
                    pyramids[(bj, f)] = np.empty(0, dtype=int)
                    idx = pyramids[(bi, f)]
            if draws[2] < params.p_sparsify and len(idx) > 1:
                keep = max(1, int(round(len(idx) * params.sparsify_keep_ratio)))
                if keep < len(idx):
                    sel = farthest_point_sample(xyz[idx], keep, 0)
                    drop = np.setdiff1d(idx, idx[sel])
                    removed[drop] = True
                    pyramids[(bi, f)] = idx[np.sort(sel)]

    if not removed.any() and not new_xyz:
        return frame
    keep_xyz = xyz[~removed]
    keep_inten = inten[~removed]
    if new_xyz:
        keep_xyz = np.vstack([keep_xyz] + new_xyz)
        keep_inten = np.concatenate([keep_inten] + new_inten)
    cloud = PointCloud(keep_xyz, keep_inten, frame.cloud.timestamp)
    return LabeledFrame(cloud, frame.boxes, frame.frame_id)


def global_augment(frame: LabeledFrame, params: AugmentParams,
                   rng_seed: int = 0) -> LabeledFrame:
    """One global yaw rotation, optional y-flip, and uniform scale applied
    to points and boxes alike. Deterministic for a given seed."""
    rng = np.random.default_rng(rng_seed)
    angle = float(rng.uniform(-params.rotation_range, params.rotation_range)) \
        if params.rotation_range > 0 else 0.0
    flip = bool(rng.random() < params.flip_probability)
    lo, hi = params.scale_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    return apply_global(frame, angle, flip, scale)


def apply_global(frame: LabeledFrame, angle: float, flip: bool,
                 scale: float) -> LabeledFrame:
    """Deterministic core of global_augment, usable directly in tests."""
    c, s = math.cos(angle), math.sin(angle)
    xyz = frame.cloud.xyz.copy()
    x = c * xyz[:, 0] - s * xyz[:, 1]
    y = s * xyz[:, 0] + c * xyz[:, 1]
    xyz[:, 0], xyz[:, 1] = x, y
    if flip:
        xyz[:, 1] = -xyz[:, 1]
    xyz *= scale
    boxes = []
    for lb in frame.boxes:
        b = lb.box
        bx = c * b.cx - s * b.cy
        by = s * b.cx + c * b.cy
        yaw = b.yaw + angle
        if flip:
            by = -by
            yaw = -yaw
        boxes.append(LabeledBox(
            Box3D(bx * scale, by * scale, b.cz * scale,
                  b.l * scale, b.w * scale, b.h * scale,
                  normalize_angle(yaw)),
            lb.class_id, lb.instance_id))
    cloud = PointCloud(xyz, frame.cloud.intensity.copy(), frame.cloud.timestamp)
    return LabeledFrame(cloud, tuple(boxes), frame.frame_id)
