"""Confidence rectification and NMS (standard and distance-variant
IoU-weighted with box refinement)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box3D, bev_iou, normalize_angle


@dataclass
class Detection:
    box: Box3D
    class_id: int
    score: float
    predicted_iou: float = 0.0
    rectified_score: float | None = None
    distance: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must be within [0, 1]")
        if not 0.0 <= self.predicted_iou <= 1.0:
            raise ValueError("predicted_iou must be within [0, 1]")
        if self.distance is None:
            self.distance = float(np.linalg.norm(self.box.center))

    @property
    def ranking_score(self) -> float:
        return self.rectified_score if self.rectified_score is not None else self.score


@dataclass(frozen=True)
class NmsParams:
    mode: str = "di-nms"              # "standard" | "di-nms"
    iou_threshold: float = 0.3
    score_threshold: float = 0.3
    beta: float = 0.5                 # confidence-function exponent
    sigma_near: float = 0.01
    sigma_far: float = 1.0
    d_max: float = 60.0

    def __post_init__(self):
        if self.mode not in ("standard", "di-nms"):
            raise ValueError(f"unknown NMS mode {self.mode!r}")
        for v in (self.iou_threshold, self.score_threshold, self.beta):
            if not 0.0 <= v <= 1.0:
                raise ValueError("thresholds and beta must be within [0, 1]")
        if self.sigma_near <= 0 or self.sigma_far <= 0:
            raise ValueError("sigmas must be positive")
        if self.sigma_near > self.sigma_far:
            raise ValueError("sigma_near must not exceed sigma_far")


# per-dataset presets for NMS / confidence thresholds
NMS_PRESETS = {
    "kitti": NmsParams(iou_threshold=0.3, score_threshold=0.3),
    "a9": NmsParams(iou_threshold=0.1, score_threshold=0.1),
}


def rectify_confidence(score: float, predicted_iou: float, beta: float) -> float:
    """Geometric blend score^(1-beta) * iou^beta; beta=0 keeps the score."""
    if not (0.0 <= score <= 1.0 and 0.0 <= predicted_iou <= 1.0
            and 0.0 <= beta <= 1.0):
        raise ValueError("rectify_confidence inputs must be within [0, 1]")
    return float(score ** (1.0 - beta) * predicted_iou ** beta)


def rectify_detections(dets, beta: float):
    for d in dets:
        d.rectified_score = rectify_confidence(d.score, d.predicted_iou, beta)
    return dets


def _greedy_order(dets, score_threshold):
    """Indices above the score threshold, by descending ranking score;
    ties broken by lower original index."""
    idx = [i for i, d in enumerate(dets) if d.ranking_score >= score_threshold]
    return sorted(idx, key=lambda i: (-dets[i].ranking_score, i))


def _suppression(dets, iou_threshold, score_threshold):
    """Greedy suppression shared by both NMS variants. Returns the list of
    kept indices and, per kept index, the indices of its cluster (all
    still-unsuppressed detections with IoU >= threshold, itself included)."""
    order = _greedy_order(dets, score_threshold)
    suppressed = set()
    kept, clusters = [], []
    for i in order:
        if i in suppressed:
            continue
        cluster = [i]
        for j in order:
            if j == i or j in suppressed:
                continue
            if dets[i].class_id != dets[j].class_id:
                continue
            if bev_iou(dets[i].box, dets[j].box) >= iou_threshold:
                cluster.append(j)
                suppressed.add(j)
        kept.append(i)
        clusters.append(cluster)
    return kept, clusters


def standard_nms(dets, iou_threshold: float, score_threshold: float):
    """Greedy class-wise NMS; returns the kept detections in rank order."""
    kept, _ = _suppression(dets, iou_threshold, score_threshold)
    return [dets[i] for i in kept]


def di_nms(dets, params: NmsParams):
    """Greedy NMS with distance-variant IoU-weighted box refinement.

    Suppression is identical to standard_nms. Each kept box is replaced
    by a weighted average of its cluster: w_j = exp(-(1 - IoU_j)^2 /
    sigma(d)) with sigma interpolating from sigma_near to sigma_far over
    the kept box's sensor distance. Yaw is averaged in sin/cos space.
    """
    kept, clusters = _suppression(dets, params.iou_threshold,
                                  params.score_threshold)
    out = []
    for i, cluster in zip(kept, clusters):
        base = dets[i]
        if len(cluster) == 1:
            out.append(base)
            continue
        d = base.distance
        sigma = params.sigma_near + (params.sigma_far - params.sigma_near) * \
            min(d / params.d_max, 1.0)
        ious = np.array([bev_iou(base.box, dets[j].box) for j in cluster])
        w = np.exp(-((1.0 - ious) ** 2) / sigma)
        w = w / w.sum()
        boxes = [dets[j].box for j in cluster]
        cx = sum(wi * b.cx for wi, b in zip(w, boxes))
        cy = sum(wi * b.cy for wi, b in zip(w, boxes))
        cz = sum(wi * b.cz for wi, b in zip(w, boxes))
        l = sum(wi * b.l for wi, b in zip(w, boxes))
        wd = sum(wi * b.w for wi, b in zip(w, boxes))
        h = sum(wi * b.h for wi, b in zip(w, boxes))
        sin_sum = sum(wi * math.sin(b.yaw) for wi, b in zip(w, boxes))
        cos_sum = sum(wi * math.cos(b.yaw) for wi, b in zip(w, boxes))
        yaw = math.atan2(sin_sum, cos_sum)
        refined = Box3D(cx, cy, cz, l, wd, h, yaw)
        out.append(Detection(refined, base.class_id, base.score,
                             base.predicted_iou, base.rectified_score,
                             base.distance))
    return out


def run_nms(dets, params: NmsParams):
    rectify_detections(dets, params.beta)
    if params.mode == "standard":
        return standard_nms(dets, params.iou_threshold, params.score_threshold)
    return di_nms(dets, params)
