"""Procedural synthetic roadside-LiDAR dataset generator.

A spinning-LiDAR model (uniform azimuth steps x vertical channels) is ray
cast against a flat ground plane and a set of non-overlapping vehicle
boxes. Hit ranges are perturbed with Gaussian noise along the ray, the
way a real range sensor errs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (Box3D, LabeledBox, LabeledFrame, PointCloud,
                       RigidTransform, bev_iou)
from .io import write_manifest, write_openlabel, write_pcd


class PlacementError(RuntimeError):
    """Could not place the requested boxes without overlap."""


@dataclass(frozen=True)
class SensorConfig:
    channels: int = 64
    azimuth_steps: int = 2048
    vertical_fov: tuple = (math.radians(-22.5), math.radians(22.5))
    max_range: float = 120.0
    range_noise_sigma: float = 0.1
    mount: RigidTransform = field(
        default_factory=lambda: RigidTransform(np.eye(3), np.array([0.0, 0.0, 7.0])))

    def __post_init__(self):
        if self.range_noise_sigma < 0:
            raise ValueError("range noise sigma must be >= 0")
        if self.channels < 1 or self.azimuth_steps < 1:
            raise ValueError("channels and azimuth_steps must be >= 1")

    @property
    def rays_per_frame(self) -> int:
        return self.channels * self.azimuth_steps


@dataclass(frozen=True)
class ClassSpec:
    name: str = "vehicle"
    count: int = 8
    mean_size: tuple = (4.5, 1.9, 1.7)    # (l, w, h) meters
    size_sigma: tuple = (0.3, 0.1, 0.1)


@dataclass(frozen=True)
class SceneConfig:
    classes: tuple = (ClassSpec(),)
    placement_range: tuple = (-30.0, 30.0)   # square region in x and y
    ground_z: float = 0.0
    rng_seed: int = 0
    max_placement_retries: int = 200

    def __post_init__(self):
        for c in self.classes:
            if c.count < 0 or min(c.mean_size) <= 0:
                raise ValueError("class counts must be >= 0 and sizes positive")


GROUND_INTENSITY = 0.1
VEHICLE_INTENSITY = 0.5


def _sample_boxes(scene: SceneConfig, rng) -> list:
    boxes = []
    lo, hi = scene.placement_range
    for class_id, spec in enumerate(scene.classes):
        for k in range(spec.count):
            for _ in range(scene.max_placement_retries):
                l, w, h = (max(0.5, float(rng.normal(m, s)))
                           for m, s in zip(spec.mean_size, spec.size_sigma))
                cx = float(rng.uniform(lo, hi))
                cy = float(rng.uniform(lo, hi))
                yaw = float(rng.uniform(-math.pi, math.pi))
                cand = Box3D(cx, cy, scene.ground_z + h / 2.0, l, w, h, yaw)
                if all(bev_iou(cand, b.box) == 0.0 for b in boxes):
                    boxes.append(LabeledBox(cand, class_id,
                                            f"{spec.name}_{k}"))
                    break
            else:
                raise PlacementError(
                    f"could not place box {k} of class {spec.name}")
    return boxes


def _ray_directions(sensor: SensorConfig) -> np.ndarray:
    """(R, 3) unit directions in the sensor frame, channel-major."""
    lo, hi = sensor.vertical_fov
    if sensor.channels > 1:
        elev = np.linspace(lo, hi, sensor.channels)
    else:
        elev = np.array([(lo + hi) / 2.0])
    azim = np.arange(sensor.azimuth_steps) * (2.0 * math.pi / sensor.azimuth_steps)
    ce, se = np.cos(elev), np.sin(elev)
    ca, sa = np.cos(azim), np.sin(azim)
    dirs = np.empty((sensor.channels, sensor.azimuth_steps, 3))
    dirs[:, :, 0] = ce[:, None] * ca[None, :]
    dirs[:, :, 1] = ce[:, None] * sa[None, :]
    dirs[:, :, 2] = se[:, None]
    return dirs.reshape(-1, 3)


def _ray_box_hits(origin, dirs, box: Box3D):
    """Slab test of all rays against one oriented box.

    Returns the hit parameter t per ray (inf for misses)."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    o = rot @ (origin - box.center)
    d = dirs @ rot.T
    half = np.array([box.l, box.w, box.h]) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # rays parallel to a slab: inside the slab -> (-inf, inf), else a miss
    parallel = d == 0.0
    inside_slab = (np.abs(o) <= half)[None, :]
    tmin = np.where(parallel, -np.inf, tmin)
    tmax = np.where(parallel, np.inf, tmax)
    blocked = (parallel & ~inside_slab).any(axis=1)
    enter = tmin.max(axis=1)
    exit_ = tmax.min(axis=1)
    hit = (enter <= exit_) & (enter > 1e-9) & ~blocked
    return np.where(hit, enter, np.inf)


def simulate_frame(scene: SceneConfig, sensor: SensorConfig,
                   frame_seed: int | None = None,
                   frame_id: str = "frame_0") -> LabeledFrame:
    """Ray cast one frame. Deterministic for a given (scene, seed)."""
    seed = scene.rng_seed if frame_seed is None else frame_seed
    rng = np.random.default_rng(seed)
    boxes = _sample_boxes(scene, rng)
    origin = sensor.mount.translation.astype(float)
    dirs = _ray_directions(sensor) @ sensor.mount.rotation.T

    t_best = np.full(len(dirs), np.inf)
    hit_kind = np.full(len(dirs), -1, dtype=int)  # -1 miss, -2 ground, >=0 box

    dz = dirs[:, 2]
    with np.errstate(divide="ignore"):
        t_ground = (scene.ground_z - origin[2]) / dz
    ok = (dz != 0.0) & (t_ground > 1e-9)
    t_best[ok] = t_ground[ok]
    hit_kind[ok] = -2

    for bi, lb in enumerate(boxes):
        t = _ray_box_hits(origin, dirs, lb.box)
        closer = t < t_best
        t_best[closer] = t[closer]
        hit_kind[closer] = bi

    hit = (hit_kind != -1) & (t_best <= sensor.max_range)
    t = t_best[hit]
    if sensor.range_noise_sigma > 0:
        # truncate at 3 sigma so every return stays within a 3-sigma
        # dilation of the surface it came from
        sig = sensor.range_noise_sigma
        noise = np.clip(rng.normal(0.0, sig, size=len(dirs)), -3.0 * sig,
                        3.0 * sig)
        t = t + noise[hit]
        t = np.maximum(t, 1e-6)
    pts = origin + dirs[hit] * t[:, None]
    inten = np.where(hit_kind[hit] >= 0, VEHICLE_INTENSITY, GROUND_INTENSITY)
    cloud = PointCloud(pts, inten, timestamp=seed)
    return LabeledFrame(cloud, tuple(boxes), frame_id)


def generate_dataset(n_frames: int, scene: SceneConfig, sensor: SensorConfig,
                     out_dir, class_names=None) -> Path:
    """Write n frames as PCD + OpenLABEL pairs plus a manifest file.

    Per-frame seeds are derived from the scene's base seed, so the same
    configuration always reproduces the same bytes.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if class_names is None:
        class_names = [c.name for c in scene.classes]
    pairs = []
    for i in range(n_frames):
        frame = simulate_frame(scene, sensor, frame_seed=scene.rng_seed + i,
                               frame_id=f"frame_{i:06d}")
        pcd_name = f"{frame.frame_id}.pcd"
        lbl_name = f"{frame.frame_id}.json"
        write_pcd(frame.cloud, out_dir / pcd_name)
        write_openlabel(frame, out_dir / lbl_name, class_names)
        pairs.append((pcd_name, lbl_name))
    manifest = out_dir / "manifest.txt"
    write_manifest(pairs, manifest)
    return manifest
