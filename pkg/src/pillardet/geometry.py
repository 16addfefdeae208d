"""Oriented-box geometry, rigid transforms, and rotated IoU.

Conventions used throughout the package:

* yaw is measured counterclockwise about +z, starting from the +x axis,
  and is normalized to (-pi, pi] at construction time;
* boxes are parameterized at their geometric center (not bottom center);
* the box x-axis (length l) points along the heading, the box y-axis
  (width w) to its left.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Polygon areas below this are treated as empty when clipping.
AREA_EPS = 1e-12


class DegenerateBoxError(ValueError):
    """Raised when a box with zero footprint or height is used in IoU."""


def normalize_angle(a):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    wrapped = np.mod(-a + np.pi, 2.0 * np.pi)
    out = -(wrapped - np.pi)
    out = np.where(out == -np.pi, np.pi, out)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class PointCloud:
    """Points with per-point intensity and a frame timestamp (Unix ns)."""

    xyz: np.ndarray          # (N, 3) float64
    intensity: np.ndarray    # (N,) float in [0, 1]
    timestamp: int = 0

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if xyz.shape[0] != inten.shape[0]:
            raise ValueError("xyz and intensity lengths differ")
        if xyz.size and not np.isfinite(xyz).all():
            raise ValueError("point coordinates must be finite")
        if inten.size and (not np.isfinite(inten).all()
                           or inten.min() < 0.0 or inten.max() > 1.0):
            raise ValueError("intensity must be finite and within [0, 1]")
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "intensity", inten)

    def __len__(self):
        return self.xyz.shape[0]

    @staticmethod
    def empty(timestamp: int = 0) -> "PointCloud":
        return PointCloud(np.empty((0, 3)), np.empty((0,)), timestamp)


@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation mapping one LiDAR frame into another."""

    rotation: np.ndarray     # (3, 3) orthonormal, det +1
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_yaw(yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        c, s = math.cos(yaw), math.sin(yaw)
        r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return RigidTransform(r, np.asarray(translation, dtype=float))


@dataclass(frozen=True)
class Box3D:
    """7-parameter oriented box: center, dimensions, yaw."""

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float

    def __post_init__(self):
        for name in ("l", "w", "h"):
            if getattr(self, name) <= 0:
                raise ValueError(f"box dimension {name} must be positive")
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    def bev_corners(self) -> np.ndarray:
        """(4, 2) BEV corners in counterclockwise order."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.l / 2.0, self.w / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])

    def corners(self) -> np.ndarray:
        """(8, 3) corners: BEV ring at bottom then the same ring at top."""
        bev = self.bev_corners()
        lo = self.cz - self.h / 2.0
        hi = self.cz + self.h / 2.0
        bottom = np.column_stack([bev, np.full(4, lo)])
        top = np.column_stack([bev, np.full(4, hi)])
        return np.vstack([bottom, top])


@dataclass(frozen=True)
class LabeledBox:
    box: Box3D
    class_id: int
    instance_id: str = ""


@dataclass(frozen=True)
class LabeledFrame:
    cloud: PointCloud
    boxes: tuple = field(default_factory=tuple)   # tuple of LabeledBox
    frame_id: str = ""

    def __post_init__(self):
        boxes = tuple(self.boxes)
        ids = [b.instance_id for b in boxes if b.instance_id]
        if len(ids) != len(set(ids)):
            raise ValueError("instance ids must be unique within a frame")
        object.__setattr__(self, "boxes", boxes)


# ---------------------------------------------------------------------------
# transforms

def apply_transform(t: RigidTransform, cloud: PointCloud) -> PointCloud:
    """Map every point through p' = R p + t; intensity/timestamp kept."""
    xyz = cloud.xyz @ t.rotation.T + t.translation
    return PointCloud(xyz, cloud.intensity.copy(), cloud.timestamp)


def transform_points(t: RigidTransform, xyz: np.ndarray) -> np.ndarray:
    return np.asarray(xyz, dtype=float) @ t.rotation.T + t.translation


def compose(t1: RigidTransform, t2: RigidTransform) -> RigidTransform:
    """Transform applying t2 first, then t1."""
    return RigidTransform(t1.rotation @ t2.rotation,
                          t1.rotation @ t2.translation + t1.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


# ---------------------------------------------------------------------------
# rotated IoU

def _polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a counterclockwise polygon, (M, 2)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex subject against a convex clip
    polygon; both counterclockwise."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a = clip[i]
        b = clip[(i + 1) % n]
        edge = b - a
        input_list = output
        output = []
        prev = input_list[-1]
        prev_inside = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0]) >= 0.0
        for cur in input_list:
            cur_inside = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0]) >= 0.0
            if cur_inside:
                if not prev_inside:
                    output.append(_segment_intersection(prev, cur, a, b))
                output.append(cur)
            elif prev_inside:
                output.append(_segment_intersection(prev, cur, a, b))
            prev, prev_inside = cur, cur_inside
    return np.array(output) if output else np.empty((0, 2))


def _segment_intersection(p, q, a, b):
    d1 = q - p
    d2 = b - a
    denom = d1[0] * d2[1] - d1[1] * d2[0]
    if denom == 0.0:
        return q
    s = ((a[0] - p[0]) * d2[1] - (a[1] - p[1]) * d2[0]) / denom
    return p + s * d1


def _check_nondegenerate(box: Box3D):
    if box.l * box.w <= AREA_EPS or box.h <= 0.0:
        raise DegenerateBoxError("zero-area box in IoU")


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    inter = _clip_polygon(a.bev_corners(), b.bev_corners())
    area = _polygon_area(inter)
    return area if area > AREA_EPS else 0.0


def bev_iou(a: Box3D, b: Box3D) -> float:
    """IoU of the yaw-rotated BEV rectangles of two boxes."""
    _check_nondegenerate(a)
    _check_nondegenerate(b)
    inter = bev_intersection_area(a, b)
    union = a.l * a.w + b.l * b.w - inter
    if union <= AREA_EPS:
        raise DegenerateBoxError("zero-area union")
    return min(inter / union, 1.0)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU: BEV intersection area times vertical overlap length."""
    _check_nondegenerate(a)
    _check_nondegenerate(b)
    inter_area = bev_intersection_area(a, b)
    z_lo = max(a.cz - a.h / 2.0, b.cz - b.h / 2.0)
    z_hi = min(a.cz + a.h / 2.0, b.cz + b.h / 2.0)
    overlap = max(0.0, z_hi - z_lo)
    inter = inter_area * overlap
    union = a.l * a.w * a.h + b.l * b.w * b.h - inter
    if union <= AREA_EPS:
        raise DegenerateBoxError("zero-volume union")
    return min(inter / union, 1.0)


def points_in_box(cloud: PointCloud, box: Box3D) -> np.ndarray:
    """Ascending indices of the points inside the box (boundary included)."""
    return points_in_box_xyz(cloud.xyz, box)


def points_in_box_xyz(xyz: np.ndarray, box: Box3D) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
    if xyz.shape[0] == 0:
        return np.empty(0, dtype=int)
    local = box_frame_coords(xyz, box)
    half = np.array([box.l / 2.0, box.w / 2.0, box.h / 2.0])
    inside = np.all(np.abs(local) <= half, axis=1)
    return np.nonzero(inside)[0]


def box_frame_coords(xyz: np.ndarray, box: Box3D) -> np.ndarray:
    """World points expressed in the box's local (heading-aligned) frame."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    d = np.asarray(xyz, dtype=float) - box.center
    # inverse yaw rotation about z
    local = np.empty_like(d)
    local[:, 0] = c * d[:, 0] + s * d[:, 1]
    local[:, 1] = -s * d[:, 0] + c * d[:, 1]
    local[:, 2] = d[:, 2]
    return local


def box_to_world_coords(local: np.ndarray, box: Box3D) -> np.ndarray:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = np.asarray(local, dtype=float)
    out = np.empty_like(local)
    out[:, 0] = c * local[:, 0] - s * local[:, 1]
    out[:, 1] = s * local[:, 0] + c * local[:, 1]
    out[:, 2] = local[:, 2]
    return out + box.center
