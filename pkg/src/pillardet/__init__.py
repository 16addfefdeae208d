"""Roadside LiDAR 3D detection toolkit.

Library layout:

* geometry       - boxes, rigid transforms, rotated IoU
* io             - PCD / OpenLABEL / weights / manifest formats
* registration   - voxel downsample, rigid estimation, point-to-point ICP
* preprocessing  - RANSAC ground removal, FPS, pillarization, scatter
* ops, network   - forward-only dense network reference
* postprocess    - confidence rectification, standard and DI NMS
* augmentation   - shape-aware per-object and global augmentation
* losses         - loss values, analytic gradients, matching, EMA
* evaluation     - 40-recall-position average precision
* synth          - procedural synthetic LiDAR dataset generator
* config, cli    - TOML pipeline config and the batch CLI
"""

from .geometry import (Box3D, LabeledBox, LabeledFrame, PointCloud,
                       RigidTransform, apply_transform, bev_iou, compose,
                       invert, iou_3d, points_in_box)
from .postprocess import Detection, NmsParams

__all__ = [
    "Box3D", "LabeledBox", "LabeledFrame", "PointCloud", "RigidTransform",
    "Detection", "NmsParams", "apply_transform", "bev_iou", "compose",
    "invert", "iou_3d", "points_in_box",
]

__version__ = "0.1.0"
