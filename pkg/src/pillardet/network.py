"""Forward-only reference network: stacked triple attention, pillar
feature net, attentive hierarchical backbone, and the multi-task head.

Everything runs in float32 on the CPU. Batch norm is inference-mode only:
weights carry a per-channel scale and shift directly. Zero-padded point
slots are masked out of every pooling step so that pad contents can never
influence a pillar's feature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box3D, normalize_angle
from .ops import (batchnorm_affine, conv2d, deconv2d, linear, relu, sigmoid,
                  softmax)
from .preprocessing import PillarGridConfig, PillarSet, scatter

NEG_INF = np.float32(-np.inf)


@dataclass(frozen=True)
class AnchorSpec:
    """One anchor size per class plus its vertical placement."""
    length: float = 4.5
    width: float = 1.9
    height: float = 1.7
    z_center: float = 0.0


@dataclass(frozen=True)
class ArchitectureConfig:
    in_dim: int = 9                    # decorated point feature width
    n_points: int = 32                 # max points per pillar
    ta_dims: tuple = (64, 128)
    pfn_out: int = 64
    backbone_channels: tuple = (64, 128, 256)
    fused_channels: int = 128
    num_classes: int = 1
    anchor_yaws: tuple = (0.0, math.pi / 2.0)
    anchors: tuple = (AnchorSpec(),)   # one AnchorSpec per class

    def __post_init__(self):
        if len(self.anchors) != self.num_classes:
            raise ValueError("need one anchor spec per class")
        for v in (self.in_dim, self.n_points, self.pfn_out,
                  self.fused_channels, self.num_classes):
            if v < 1:
                raise ValueError("architecture counts must be >= 1")

    @property
    def anchors_per_cell(self) -> int:
        return self.num_classes * len(self.anchor_yaws)


@dataclass(frozen=True)
class RawPredictions:
    cls: np.ndarray   # (A*K, H', W')
    box: np.ndarray   # (A*7, H', W')
    dir: np.ndarray   # (A*2, H', W')
    iou: np.ndarray   # (A*1, H', W')

    def __post_init__(self):
        s = self.cls.shape[1:]
        if not (self.box.shape[1:] == s == self.dir.shape[1:] == self.iou.shape[1:]):
            raise ValueError("head spatial dims disagree")


# ---------------------------------------------------------------------------
# parameter catalogue and initialization

def _ta_param_shapes(prefix: str, c: int):
    hp = max(c // 2, 1)
    hv = max((c + 3) // 2, 1)
    return [
        (f"{prefix}.point.fc1.weight", (hp, 1)),
        (f"{prefix}.point.fc1.bias", (hp,)),
        (f"{prefix}.point.fc2.weight", (1, hp)),
        (f"{prefix}.point.fc2.bias", (1,)),
        (f"{prefix}.channel.fc1.weight", (max(c // 2, 1), c)),
        (f"{prefix}.channel.fc1.bias", (max(c // 2, 1),)),
        (f"{prefix}.channel.fc2.weight", (c, max(c // 2, 1))),
        (f"{prefix}.channel.fc2.bias", (c,)),
        (f"{prefix}.voxel.fc1.weight", (hv, c + 3)),
        (f"{prefix}.voxel.fc1.bias", (hv,)),
        (f"{prefix}.voxel.fc2.weight", (1, hv)),
        (f"{prefix}.voxel.fc2.bias", (1,)),
    ]


def _conv_block_shapes(prefix: str, c_in: int, c_out: int):
    shapes = []
    for i in range(3):
        cin = c_in if i == 0 else c_out
        shapes += [
            (f"{prefix}.conv{i}.weight", (c_out, cin, 3, 3)),
            (f"{prefix}.conv{i}.bias", (c_out,)),
            (f"{prefix}.conv{i}.bn.scale", (c_out,)),
            (f"{prefix}.conv{i}.bn.shift", (c_out,)),
        ]
    return shapes


def parameter_shapes(cfg: ArchitectureConfig):
    """Ordered (name, shape) list for every parameter of the network."""
    shapes = []
    c = cfg.in_dim
    for s, out_dim in enumerate(cfg.ta_dims):
        shapes += _ta_param_shapes(f"encoder.ta{s}", c)
        shapes += [
            (f"encoder.ta{s}.out.weight", (out_dim, 2 * c)),
            (f"encoder.ta{s}.out.bias", (out_dim,)),
        ]
        c = out_dim
    shapes += [
        ("encoder.pfn1.weight", (cfg.pfn_out, c)),
        ("encoder.pfn1.bias", (cfg.pfn_out,)),
        ("encoder.pfn1.bn.scale", (cfg.pfn_out,)),
        ("encoder.pfn1.bn.shift", (cfg.pfn_out,)),
        ("encoder.pfn2.weight", (cfg.pfn_out, 2 * cfg.pfn_out)),
        ("encoder.pfn2.bias", (cfg.pfn_out,)),
        ("encoder.pfn2.bn.scale", (cfg.pfn_out,)),
        ("encoder.pfn2.bn.shift", (cfg.pfn_out,)),
    ]
    g = cfg.backbone_channels
    prev = cfg.pfn_out
    for i, ch in enumerate(g):
        shapes += _conv_block_shapes(f"backbone.block{i}", prev, ch)
        prev = ch
    # hierarchical stride-2 deconvs feeding the next branch up
    shapes += [
        ("backbone.up32.weight", (g[2], g[1], 2, 2)),
        ("backbone.up32.bias", (g[1],)),
        ("backbone.up32.bn.scale", (g[1],)),
        ("backbone.up32.bn.shift", (g[1],)),
        ("backbone.up21.weight", (g[1], g[0], 2, 2)),
        ("backbone.up21.bias", (g[0],)),
        ("backbone.up21.bn.scale", (g[0],)),
        ("backbone.up21.bn.shift", (g[0],)),
    ]
    f = cfg.fused_channels
    # final deconvs bring the three branches to H/2 x W/2
    finals = [(g[0], 3, 1, 1), (g[1], 2, 2, 0), (g[2], 4, 4, 0)]
    for i, (cin, k, _, _) in enumerate(finals):
        shapes += [
            (f"backbone.final{i}.weight", (cin, f, k, k)),
            (f"backbone.final{i}.bias", (f,)),
            (f"backbone.final{i}.bn.scale", (f,)),
            (f"backbone.final{i}.bn.shift", (f,)),
        ]
    for i in range(3):
        shapes += [
            (f"backbone.att.score{i}.weight", (f, f, 1, 1)),
            (f"backbone.att.score{i}.bias", (f,)),
        ]
    a = cfg.anchors_per_cell
    k = cfg.num_classes
    for name, ch in (("cls", a * k), ("box", a * 7), ("dir", a * 2), ("iou", a)):
        shapes += [
            (f"head.{name}.weight", (ch, f, 1, 1)),
            (f"head.{name}.bias", (ch,)),
        ]
    return shapes


def init_weights(cfg: ArchitectureConfig, seed: int = 0) -> dict:
    """Uniform(-b, b) with b = 1/sqrt(fan_in); zero biases; identity BN."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in parameter_shapes(cfg):
        if name.endswith(".bn.scale"):
            arr = np.ones(shape, dtype=np.float32)
        elif name.endswith((".bias", ".bn.shift")):
            arr = np.zeros(shape, dtype=np.float32)
        else:
            if len(shape) == 4:
                # conv (C_out, C_in, KH, KW) or deconv (C_in, C_out, KH, KW):
                # deconv fan-in is per output pixel, still C * K * K / stride^2;
                # the plain product is close enough for a reference init
                fan_in = shape[1] * shape[2] * shape[3] if not _is_deconv(name) \
                    else shape[0] * shape[2] * shape[3]
            else:
                fan_in = shape[-1]
            b = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-b, b, size=shape).astype(np.float32)
        weights[name] = arr
    return weights


def _is_deconv(name: str) -> bool:
    return ".up" in name or ".final" in name


def expected_shapes(cfg: ArchitectureConfig) -> dict:
    return {name: shape for name, shape in parameter_shapes(cfg)}


# ---------------------------------------------------------------------------
# forward passes

def _masked_max(x: np.ndarray, mask: np.ndarray, axis: int) -> np.ndarray:
    """Max over `axis` with masked entries excluded. mask broadcasts to x."""
    filled = np.where(mask, x, NEG_INF)
    return filled.max(axis=axis)


def triple_attention_forward(v: np.ndarray, weights: dict, prefix: str,
                             mask: np.ndarray | None = None,
                             centers: np.ndarray | None = None) -> np.ndarray:
    """One triple attention stage on a (P, N, C) tensor.

    Point-wise branch: per-point channel max -> scalar MLP -> S (P, N, 1).
    Channel-wise branch: masked max over points -> MLP -> T (P, 1, C).
    M = sigmoid(S * T) gates v into F1. Voxel branch: F1 concatenated with
    the pillar's mean point position, per-point FC, masked max over the
    point dimension, FC to one value, sigmoid -> Q (P, 1, 1). Output
    F2 = Q * F1 has the same shape as the input.
    """
    v = np.asarray(v, dtype=np.float32)
    p, n, c = v.shape
    if mask is None:
        mask = np.ones((p, n), dtype=bool)
    if centers is None:
        centers = np.zeros((p, 3), dtype=np.float32)
    w = weights

    pooled_pts = v.max(axis=2, keepdims=True)                     # (P, N, 1)
    s = relu(linear(pooled_pts, w[f"{prefix}.point.fc1.weight"],
                    w[f"{prefix}.point.fc1.bias"]))
    s = linear(s, w[f"{prefix}.point.fc2.weight"],
               w[f"{prefix}.point.fc2.bias"])                     # (P, N, 1)

    pooled_ch = _masked_max(v, mask[:, :, None], axis=1)          # (P, C)
    t = relu(linear(pooled_ch, w[f"{prefix}.channel.fc1.weight"],
                    w[f"{prefix}.channel.fc1.bias"]))
    t = linear(t, w[f"{prefix}.channel.fc2.weight"],
               w[f"{prefix}.channel.fc2.bias"])[:, None, :]       # (P, 1, C)

    m = sigmoid((s * t).astype(np.float32))
    f1 = (m * v).astype(np.float32)

    enlarged = np.concatenate(
        [f1, np.broadcast_to(centers[:, None, :].astype(np.float32),
                             (p, n, 3))], axis=2)
    q = relu(linear(enlarged, w[f"{prefix}.voxel.fc1.weight"],
                    w[f"{prefix}.voxel.fc1.bias"]))
    q = _masked_max(q, mask[:, :, None], axis=1)                  # (P, Hv)
    q = linear(q, w[f"{prefix}.voxel.fc2.weight"],
               w[f"{prefix}.voxel.fc2.bias"])                     # (P, 1)
    q = sigmoid(q.astype(np.float32))[:, :, None]                 # (P, 1, 1)
    return (q * f1).astype(np.float32)


def pillar_encoder_forward(pillars: PillarSet, weights: dict,
                           cfg: ArchitectureConfig) -> np.ndarray:
    """PillarSet -> (P, pfn_out) pillar features."""
    v = np.asarray(pillars.features, dtype=np.float32)
    p, n, _ = v.shape
    if p == 0:
        return np.zeros((0, cfg.pfn_out), dtype=np.float32)
    mask = np.arange(n)[None, :] < pillars.point_counts[:, None]
    # mean point position over real rows; columns 0:3 of the raw features.
    # accumulate in float64 so the float32 result is stable under
    # reorderings of the points within a pillar
    centers = (v[:, :, :3].astype(np.float64) * mask[:, :, None]).sum(axis=1) \
        / pillars.point_counts[:, None]
    centers = centers.astype(np.float32)

    x = v
    for s in range(len(cfg.ta_dims)):
        f2 = triple_attention_forward(x, weights, f"encoder.ta{s}", mask, centers)
        x = np.concatenate([x, f2], axis=2)
        x = linear(x, weights[f"encoder.ta{s}.out.weight"],
                   weights[f"encoder.ta{s}.out.bias"]).astype(np.float32)

    h = relu(batchnorm_affine(
        linear(x, weights["encoder.pfn1.weight"], weights["encoder.pfn1.bias"]),
        weights["encoder.pfn1.bn.scale"], weights["encoder.pfn1.bn.shift"]))
    pooled = _masked_max(h, mask[:, :, None], axis=1)             # (P, C)
    h = np.concatenate([h, np.broadcast_to(pooled[:, None, :], h.shape)], axis=2)
    h = relu(batchnorm_affine(
        linear(h, weights["encoder.pfn2.weight"], weights["encoder.pfn2.bias"]),
        weights["encoder.pfn2.bn.scale"], weights["encoder.pfn2.bn.shift"]))
    return _masked_max(h, mask[:, :, None], axis=1).astype(np.float32)


def _conv_bn_relu(x, weights, prefix, stride):
    y = conv2d(x, weights[f"{prefix}.weight"], weights[f"{prefix}.bias"],
               stride=stride, padding=1)
    y = batchnorm_affine(y, weights[f"{prefix}.bn.scale"],
                         weights[f"{prefix}.bn.shift"], channel_axis=0)
    return relu(y).astype(np.float32)


def _deconv_bn_relu(x, weights, prefix, stride, kernel_pad):
    y = deconv2d(x, weights[f"{prefix}.weight"], weights[f"{prefix}.bias"],
                 stride=stride, padding=kernel_pad)
    y = batchnorm_affine(y, weights[f"{prefix}.bn.scale"],
                         weights[f"{prefix}.bn.shift"], channel_axis=0)
    return relu(y).astype(np.float32)


def attentive_addition(maps, weights: dict, prefix: str = "backbone.att") -> np.ndarray:
    """Fuse equally-shaped maps with a per-location, per-channel softmax."""
    maps = [np.asarray(m, dtype=np.float32) for m in maps]
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ValueError("attentive addition requires equal shapes")
    scores = np.stack([
        conv2d(m, weights[f"{prefix}.score{i}.weight"],
               weights[f"{prefix}.score{i}.bias"], stride=1, padding=0)
        for i, m in enumerate(maps)
    ])
    dist = softmax(scores, axis=0)
    out = np.zeros(shape, dtype=np.float32)
    for i, m in enumerate(maps):
        out += (dist[i] * m).astype(np.float32)
    return out


def backbone_forward(image: np.ndarray, weights: dict,
                     cfg: ArchitectureConfig) -> np.ndarray:
    """(C, H, W) pseudo image -> (fused, H/2, W/2) feature map."""
    image = np.asarray(image, dtype=np.float32)
    _, h, w = image.shape
    if h % 8 or w % 8:
        raise ValueError("H and W must be divisible by 8")
    branches = []
    x = image
    for i in range(3):
        x = _conv_bn_relu(x, weights, f"backbone.block{i}.conv0", stride=2)
        x = _conv_bn_relu(x, weights, f"backbone.block{i}.conv1", stride=1)
        x = _conv_bn_relu(x, weights, f"backbone.block{i}.conv2", stride=1)
        branches.append(x)
    b1, b2, b3 = branches
    b2 = b2 + _deconv_bn_relu(b3, weights, "backbone.up32", stride=2, kernel_pad=0)
    b1 = b1 + _deconv_bn_relu(b2, weights, "backbone.up21", stride=2, kernel_pad=0)
    f1 = _deconv_bn_relu(b1, weights, "backbone.final0", stride=1, kernel_pad=1)
    f2 = _deconv_bn_relu(b2, weights, "backbone.final1", stride=2, kernel_pad=0)
    f3 = _deconv_bn_relu(b3, weights, "backbone.final2", stride=4, kernel_pad=0)
    return attentive_addition([f1, f2, f3], weights)


def head_forward(features: np.ndarray, weights: dict,
                 cfg: ArchitectureConfig) -> RawPredictions:
    """Four independent 1x1 conv heads on the fused feature map."""
    outs = {}
    for name in ("cls", "box", "dir", "iou"):
        outs[name] = conv2d(features, weights[f"head.{name}.weight"],
                            weights[f"head.{name}.bias"], stride=1, padding=0)
    return RawPredictions(outs["cls"], outs["box"], outs["dir"], outs["iou"])


# ---------------------------------------------------------------------------
# anchors and box residual coding

def anchor_grid(cfg: ArchitectureConfig, grid: PillarGridConfig):
    """Anchor boxes tiled over the half-resolution output grid.

    Returns (centers_x (W',), centers_y (H',), anchor list) where each
    anchor list entry is (class_id, yaw, AnchorSpec).
    """
    h2, w2 = grid.grid_shape[0] // 2, grid.grid_shape[1] // 2
    cx = grid.x_range[0] + (np.arange(w2) + 0.5) * 2.0 * grid.pillar_size_x
    cy = grid.y_range[0] + (np.arange(h2) + 0.5) * 2.0 * grid.pillar_size_y
    anchors = [(k, yaw, cfg.anchors[k])
               for k in range(cfg.num_classes) for yaw in cfg.anchor_yaws]
    return cx, cy, anchors


def encode_box(box: Box3D, anchor: Box3D) -> np.ndarray:
    """Standard residual encoding of a box against an anchor."""
    diag = math.hypot(anchor.l, anchor.w)
    return np.array([
        (box.cx - anchor.cx) / diag,
        (box.cy - anchor.cy) / diag,
        (box.cz - anchor.cz) / anchor.h,
        math.log(box.l / anchor.l),
        math.log(box.w / anchor.w),
        math.log(box.h / anchor.h),
        box.yaw - anchor.yaw,
    ])


def decode_box(delta: np.ndarray, anchor: Box3D) -> Box3D:
    diag = math.hypot(anchor.l, anchor.w)
    return Box3D(
        anchor.cx + float(delta[0]) * diag,
        anchor.cy + float(delta[1]) * diag,
        anchor.cz + float(delta[2]) * anchor.h,
        anchor.l * math.exp(float(delta[3])),
        anchor.w * math.exp(float(delta[4])),
        anchor.h * math.exp(float(delta[5])),
        anchor.yaw + float(delta[6]),
    )


def decode_detections(raw: RawPredictions, cfg: ArchitectureConfig,
                      grid: PillarGridConfig, score_threshold: float = 0.0):
    """RawPredictions -> list of Detection (postprocess.Detection).

    Per anchor the box deltas are decoded against the anchor, the
    direction head may flip the yaw by pi, class scores are sigmoid
    probabilities, and the predicted IoU is clipped to [0, 1] and left
    for the confidence rectification downstream.
    """
    from .postprocess import Detection  # local import to avoid a cycle

    cxs, cys, anchors = anchor_grid(cfg, grid)
    a = len(anchors)
    k = cfg.num_classes
    h2, w2 = len(cys), len(cxs)
    cls = raw.cls.reshape(a, k, h2, w2)
    box = raw.box.reshape(a, 7, h2, w2)
    dirs = raw.dir.reshape(a, 2, h2, w2)
    ious = raw.iou.reshape(a, h2, w2)

    scores = sigmoid(cls.astype(np.float32))
    best_cls = np.argmax(scores, axis=1)
    best_score = np.max(scores, axis=1)
    keep = best_score >= score_threshold
    detections = []
    for ai, yi, xi in zip(*np.nonzero(keep)):
        class_id, yaw_a, spec = anchors[ai]
        anchor = Box3D(float(cxs[xi]), float(cys[yi]), spec.z_center,
                       spec.length, spec.width, spec.height, yaw_a)
        decoded = decode_box(box[ai, :, yi, xi], anchor)
        want_positive = dirs[ai, 1, yi, xi] >= dirs[ai, 0, yi, xi]
        if (decoded.yaw >= 0.0) != bool(want_positive):
            decoded = Box3D(decoded.cx, decoded.cy, decoded.cz,
                            decoded.l, decoded.w, decoded.h,
                            normalize_angle(decoded.yaw + math.pi))
        detections.append(Detection(
            box=decoded,
            class_id=int(best_cls[ai, yi, xi]),
            score=float(best_score[ai, yi, xi]),
            predicted_iou=float(np.clip(ious[ai, yi, xi], 0.0, 1.0)),
        ))
    return detections


def network_forward(pillars: PillarSet, weights: dict, cfg: ArchitectureConfig,
                    score_threshold: float = 0.05):
    """Full forward pass: encoder -> scatter -> backbone -> head -> decode."""
    feats = pillar_encoder_forward(pillars, weights, cfg)
    image = scatter(feats, pillars.coords, pillars.config)
    fmap = backbone_forward(image, weights, cfg)
    raw = head_forward(fmap, weights, cfg)
    return decode_detections(raw, cfg, pillars.config, score_threshold)
