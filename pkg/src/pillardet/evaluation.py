"""KITTI-style average precision with 40 recall positions, 3D and BEV,
with distance-based difficulty bins for roadside frames."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import DegenerateBoxError, bev_iou, iou_3d


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple = (0.7,)       # applied to every class
    metrics: tuple = ("3d", "bev")
    recall_positions: int = 40
    # distance bins in meters: (lo, hi) half-open, ordered
    difficulty_bins: tuple = ((0.0, 30.0), (30.0, 50.0), (50.0, math.inf))
    class_names: tuple = ("vehicle",)
    class_merge: dict = field(default_factory=dict)  # name -> canonical name

    def __post_init__(self):
        for t in self.iou_thresholds:
            if not 0.0 < t <= 1.0:
                raise ValueError("IoU thresholds must lie in (0, 1]")
        prev_hi = -math.inf
        for lo, hi in self.difficulty_bins:
            if lo < prev_hi or hi <= lo:
                raise ValueError("difficulty bins must be ordered and disjoint")
            prev_hi = hi


@dataclass(frozen=True)
class EvalEntry:
    ap: float
    tp: int
    fp: int
    fn: int
    num_gt: int


@dataclass(frozen=True)
class EvalReport:
    # keyed by (class_id, difficulty index, metric, threshold)
    entries: dict

    def ap(self, class_id, difficulty, metric, threshold) -> float:
        return self.entries[(class_id, difficulty, metric, threshold)].ap

    def mean_ap(self, difficulty, metric, threshold) -> float:
        aps = [e.ap for (c, d, m, t), e in self.entries.items()
               if d == difficulty and m == metric and t == threshold]
        return float(np.mean(aps)) if aps else 0.0

    def to_csv(self) -> str:
        lines = ["class,difficulty,metric,threshold,ap,tp,fp,fn,num_gt"]
        for (c, d, m, t), e in sorted(self.entries.items()):
            lines.append(f"{c},{d},{m},{t},{e.ap:.6f},{e.tp},{e.fp},{e.fn},{e.num_gt}")
        return "\n".join(lines) + "\n"

    def pretty(self, class_names=None) -> str:
        rows = []
        for (c, d, m, t), e in sorted(self.entries.items()):
            name = class_names[c] if class_names else str(c)
            rows.append(f"{name:>10}  bin{d}  {m:>3}@{t:.2f}  "
                        f"AP {100 * e.ap:6.2f}  TP {e.tp:5d}  FP {e.fp:5d}  "
                        f"FN {e.fn:5d}")
        return "\n".join(rows)


def _iou(metric, a, b):
    try:
        return iou_3d(a, b) if metric == "3d" else bev_iou(a, b)
    except DegenerateBoxError:
        return 0.0


def match_frame(dets, gts, iou_threshold: float, metric: str = "3d"):
    """Greedy matching of detections (sorted by descending ranking score)
    against ground truths of the same class.

    Returns (det flags, gt matched flags) where each det flag is True for
    a TP and False for an FP.
    """
    order = sorted(range(len(dets)),
                   key=lambda i: (-dets[i].ranking_score, i))
    matched = [False] * len(gts)
    tp = [False] * len(dets)
    for i in order:
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(gts):
            if matched[j] or g.class_id != dets[i].class_id:
                continue
            iou = _iou(metric, dets[i].box, g.box)
            if iou >= iou_threshold and iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0:
            matched[best_j] = True
            tp[i] = True
    return tp, matched


def average_precision_40(flags, num_gt: int, positions: int = 40) -> float:
    """AP over `positions` recall samples with interpolated precision.

    `flags` is a sequence of (score, is_tp) sorted by descending score.
    """
    if num_gt == 0:
        return 0.0
    tps = np.cumsum([1 if f else 0 for _, f in flags])
    fps = np.cumsum([0 if f else 1 for _, f in flags])
    if len(tps) == 0 or tps[-1] == 0:
        return 0.0
    recalls = tps / num_gt
    precisions = tps / (tps + fps)
    samples = (np.arange(positions) + 1) / positions
    ap = 0.0
    for r in samples:
        mask = recalls >= r - 1e-12
        ap += float(precisions[mask].max()) if mask.any() else 0.0
    return ap / positions


def _distance(box) -> float:
    return math.hypot(box.cx, box.cy)


def _bin_index(cfg: EvalConfig, d: float) -> int:
    for i, (lo, hi) in enumerate(cfg.difficulty_bins):
        if lo <= d < hi:
            return i
    return -1


def evaluate_dataset(frames, cfg: EvalConfig) -> EvalReport:
    """Pool matches across frames per (class, difficulty, metric,
    threshold) and compute AP.

    `frames` is a sequence of (detections, ground truths). For each
    difficulty bin, ground truths outside the bin are don't-care:
    detections matching them count neither as TP nor FP.
    """
    classes = range(len(cfg.class_names))
    entries = {}
    n_bins = len(cfg.difficulty_bins)
    for metric in cfg.metrics:
        for thr in cfg.iou_thresholds:
            # scored flag pools: (class, bin) -> list of (score, tp)
            pools = {(c, b): [] for c in classes for b in range(n_bins)}
            gt_counts = {(c, b): 0 for c in classes for b in range(n_bins)}
            for dets, gts in frames:
                gt_bins = [_bin_index(cfg, _distance(g.box)) for g in gts]
                for g, b in zip(gts, gt_bins):
                    if b >= 0:
                        gt_counts[(g.class_id, b)] += 1
                # same greedy policy as match_frame, but keeping the
                # matched gt index so the TP can be binned
                order = sorted(range(len(dets)),
                               key=lambda i: (-dets[i].ranking_score, i))
                matched = [False] * len(gts)
                det_bin = {}
                for i in order:
                    best_iou, best_j = 0.0, -1
                    for j, g in enumerate(gts):
                        if matched[j] or g.class_id != dets[i].class_id:
                            continue
                        iou = _iou(metric, dets[i].box, g.box)
                        if iou >= thr and iou > best_iou:
                            best_iou, best_j = iou, j
                    if best_j >= 0:
                        matched[best_j] = True
                        det_bin[i] = gt_bins[best_j]
                for i, d in enumerate(dets):
                    if i in det_bin:
                        b = det_bin[i]
                        if b >= 0:
                            pools[(d.class_id, b)].append((d.ranking_score, True))
                        # out-of-bin match: don't-care everywhere
                    else:
                        for b in range(n_bins):
                            pools[(d.class_id, b)].append((d.ranking_score, False))
            for c in classes:
                for b in range(n_bins):
                    flags = sorted(pools[(c, b)], key=lambda x: -x[0])
                    num_gt = gt_counts[(c, b)]
                    ap = average_precision_40(flags, num_gt, cfg.recall_positions)
                    tp_n = sum(1 for _, f in flags if f)
                    fp_n = sum(1 for _, f in flags if not f)
                    entries[(c, b, metric, thr)] = EvalEntry(
                        ap, tp_n, fp_n, num_gt - tp_n, num_gt)
    return EvalReport(entries)
