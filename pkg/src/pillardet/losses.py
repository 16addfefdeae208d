"""Training-loss values, analytic gradients where defined, student-teacher
matching, and the EMA teacher update.

No optimizer or training loop lives here; the functions return loss
values (and gradients w.r.t. their smooth arguments) for auditing and
testing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box3D, DegenerateBoxError, iou_3d, normalize_angle


@dataclass(frozen=True)
class LossWeights:
    omega1: float = 2.0   # box regression
    omega2: float = 0.2   # direction
    lam: float = 1.0      # IoU prediction
    mu_t: float = 1.0     # consistency

    def __post_init__(self):
        for v in (self.omega1, self.omega2, self.lam, self.mu_t):
            if not (math.isfinite(v) and v >= 0):
                raise ValueError("loss weights must be finite and >= 0")


@dataclass(frozen=True)
class LossBreakdown:
    cls: float
    od_iou: float
    dir: float
    iou_pred: float
    consistency: float
    total: float


def focal_loss(p: float, y: int, alpha: float = 0.25, gamma: float = 2.0):
    """Focal loss -alpha_t (1 - p_t)^gamma log(p_t) for binary targets.

    Returns (value, d value / d logit) where p = sigmoid(logit).
    """
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie strictly inside (0, 1)")
    if y == 1:
        pt, at = p, alpha
        sign = 1.0
    else:
        pt, at = 1.0 - p, 1.0 - alpha
        sign = -1.0
    value = -at * (1.0 - pt) ** gamma * math.log(pt)
    # d pt / d logit = sign * p * (1 - p)
    dvalue_dpt = -at * (-(gamma) * (1.0 - pt) ** (gamma - 1.0) * math.log(pt)
                        + (1.0 - pt) ** gamma / pt)
    grad = dvalue_dpt * sign * p * (1.0 - p)
    return value, grad


def smooth_l1(pred: float, target: float, delta: float = 1.0):
    """Huber-style smooth L1: e^2 / (2 delta) inside |e| < delta, linear
    outside; value and first derivative are continuous at +-delta.

    Returns (value, d value / d pred).
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    e = pred - target
    if abs(e) < delta:
        return e * e / (2.0 * delta), e / delta
    return abs(e) - delta / 2.0, math.copysign(1.0, e)


def smooth_l1_array(pred, target, delta: float = 1.0) -> float:
    """Sum of element-wise smooth L1 values over two arrays."""
    pred = np.asarray(pred, dtype=float).ravel()
    target = np.asarray(target, dtype=float).ravel()
    return float(sum(smooth_l1(p, t, delta)[0] for p, t in zip(pred, target)))


def angle_loss(theta_p: float, theta_g: float, delta: float = 1.0):
    """Sine-error loss with a two-class direction target.

    Returns (value, direction target, d value / d theta_p). The sine term
    is blind to a pi flip; the direction target (1 when theta_g >= 0)
    lets the direction head disambiguate.
    """
    d = theta_p - theta_g
    value, g = smooth_l1(math.sin(d), 0.0, delta)
    direction = 1 if theta_g >= 0.0 else 0
    return value, direction, g * math.cos(d)


def od_iou_loss(box_p: Box3D, box_g: Box3D, lam_c: float = 1.0,
                lam_theta: float = 1.0) -> float:
    """Orientation-aware distance-IoU regression value.

    1 - IoU3D + lam_c * center distance^2 / enclosing diagonal^2 +
    lam_theta * (1 - |cos(yaw difference)|). Zero iff the boxes coincide.
    """
    iou = iou_3d(box_p, box_g)  # raises DegenerateBoxError on bad boxes
    corners = np.vstack([box_p.corners(), box_g.corners()])
    # enclosing box measured in the ground-truth box's heading frame so the
    # value is invariant when both boxes move rigidly together
    c, s = math.cos(box_g.yaw), math.sin(box_g.yaw)
    rel = corners - box_g.center
    aligned = np.column_stack([c * rel[:, 0] + s * rel[:, 1],
                               -s * rel[:, 0] + c * rel[:, 1],
                               rel[:, 2]])
    diag_sq = float(np.sum((aligned.max(axis=0) - aligned.min(axis=0)) ** 2))
    center_sq = float(np.sum((box_p.center - box_g.center) ** 2))
    angle_term = 1.0 - abs(math.cos(box_p.yaw - box_g.yaw))
    return (1.0 - iou) + lam_c * center_sq / diag_sq + lam_theta * angle_term


def match_and_consistency(student, teacher, tau_c: float = 0.7,
                          delta: float = 1.0):
    """Greedy one-to-one IoU matching plus the consistency value.

    `student` and `teacher` are detection sequences (postprocess.Detection).
    Pairs are formed by descending 3D IoU and kept when IoU > tau_c. The
    consistency value is the mean over pairs of the smooth L1 over the 7
    box parameters (yaw difference wrapped) plus the smooth L1 between
    the class scores. Returns (pairs, value) with pairs as (student index,
    teacher index) tuples.
    """
    candidates = []
    for i, s in enumerate(student):
        for j, t in enumerate(teacher):
            try:
                iou = iou_3d(s.box, t.box)
            except DegenerateBoxError:
                continue
            if iou > tau_c:
                candidates.append((iou, i, j))
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    used_s, used_t = set(), set()
    pairs = []
    for iou, i, j in candidates:
        if i in used_s or j in used_t:
            continue
        used_s.add(i)
        used_t.add(j)
        pairs.append((i, j))
    if not pairs:
        return [], 0.0
    total = 0.0
    for i, j in pairs:
        bs, bt = student[i].box, teacher[j].box
        params_s = [bs.cx, bs.cy, bs.cz, bs.l, bs.w, bs.h]
        params_t = [bt.cx, bt.cy, bt.cz, bt.l, bt.w, bt.h]
        v = smooth_l1_array(params_s, params_t, delta)
        v += smooth_l1(normalize_angle(bs.yaw - bt.yaw), 0.0, delta)[0]
        v += smooth_l1(student[i].score, teacher[j].score, delta)[0]
        total += v
    return pairs, total / len(pairs)


def student_total_loss(cls: float, od_iou: float, direction: float,
                       iou_pred: float, consistency: float,
                       weights: LossWeights) -> LossBreakdown:
    """Weighted sum of the five student-loss components."""
    for v in (cls, od_iou, direction, iou_pred, consistency):
        if not math.isfinite(v):
            raise ValueError("loss components must be finite")
    total = (cls + weights.omega1 * od_iou + weights.omega2 * direction +
             weights.lam * iou_pred + weights.mu_t * consistency)
    return LossBreakdown(cls, od_iou, direction, iou_pred, consistency, total)


def ema_update(teacher: dict, student: dict, decay: float) -> dict:
    """Per parameter: t' = decay * t + (1 - decay) * s."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must be within [0, 1]")
    if set(teacher) != set(student):
        raise ValueError("teacher and student parameter sets differ")
    out = {}
    for name, t in teacher.items():
        s = student[name]
        if np.shape(t) != np.shape(s):
            raise ValueError(f"shape mismatch for {name}")
        out[name] = (decay * np.asarray(t, dtype=np.float64) +
                     (1.0 - decay) * np.asarray(s, dtype=np.float64)) \
            .astype(np.asarray(t).dtype)
    return out
