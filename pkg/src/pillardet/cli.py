"""Batch command-line front end wiring the pipeline end to end.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant
violation.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import sys
import time
from pathlib import Path

import numpy as np

from . import io as pio
from .augmentation import global_augment, shape_aware_augment
from .config import ConfigError, PipelineConfig
from .geometry import Box3D, LabeledFrame, PointCloud
from .losses import (LossWeights, angle_loss, focal_loss, od_iou_loss,
                     smooth_l1, student_total_loss)
from .network import expected_shapes, init_weights, network_forward
from .postprocess import Detection, run_nms
from .preprocessing import (NoPlaneError, pillarize, ransac_ground_plane,
                            remove_ground, scatter)
from .registration import IcpParams, icp_point_to_point, voxel_downsample
from .evaluation import evaluate_dataset
from .synth import PlacementError, generate_dataset, simulate_frame

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="pillardet", description=__doc__)
    parser.add_argument("--config", help="pipeline config TOML "
                        "(or set PILLARDET_CONFIG)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--dump-config", action="store_true",
                        help="print the effective config and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--out", required=True)

    p = sub.add_parser("register", help="align source cloud onto target")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--voxel-size", type=float, default=2.0)
    p.add_argument("--max-dist", type=float, default=2.0)
    p.add_argument("--rmse-csv", help="dump per-iteration RMSE as CSV")

    p = sub.add_parser("ground-remove", help="RANSAC plane fit + filter")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eps", type=float, default=0.2)
    p.add_argument("--iterations", type=int, default=48)

    p = sub.add_parser("pillarize", help="pillar features to NPZ")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("augment", help="augment a labeled frame")
    p.add_argument("--pcd", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--global-too", action="store_true",
                   help="apply global augmentation after shape-aware")

    p = sub.add_parser("infer", help="full pipeline on a dataset directory")
    p.add_argument("--data", required=True, help="dir with manifest.txt")
    p.add_argument("--weights", help="weights manifest; random init if absent")
    p.add_argument("--out", required=True)
    p.add_argument("--score-threshold", type=float, default=None,
                   help="override the config NMS score threshold")

    p = sub.add_parser("eval", help="AP evaluation of predictions vs labels")
    p.add_argument("--pred", required=True, help="detections CSV")
    p.add_argument("--gt", required=True, help="dir with OpenLABEL jsons")
    p.add_argument("--out", help="write the report CSV here")

    p = sub.add_parser("loss-audit", help="loss breakdown for preds vs labels")
    p.add_argument("--pred", required=True, help="detections CSV")
    p.add_argument("--gt", required=True, help="dir with OpenLABEL jsons")

    p = sub.add_parser("bench", help="per-stage timing on one synth frame")
    p.add_argument("--out", help="write timing CSV here")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return EXIT_USAGE
    try:
        cfg = PipelineConfig.load(args.config)
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_DATA
    if args.dump_config:
        print(cfg.dump(), end="")
        return EXIT_OK
    if args.command is None:
        print(parser.format_usage(), file=sys.stderr, end="")
        return EXIT_USAGE
    handler = {
        "synth": cmd_synth,
        "register": cmd_register,
        "ground-remove": cmd_ground_remove,
        "pillarize": cmd_pillarize,
        "augment": cmd_augment,
        "infer": cmd_infer,
        "eval": cmd_eval,
        "loss-audit": cmd_loss_audit,
        "bench": cmd_bench,
    }[args.command]
    try:
        return handler(args, cfg)
    except (pio.PcdError, pio.LabelError, pio.WeightsError, NoPlaneError,
            PlacementError, FileNotFoundError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except AssertionError as e:
        print(f"internal invariant violated: {e}", file=sys.stderr)
        return EXIT_INTERNAL


def cmd_synth(args, cfg: PipelineConfig) -> int:
    scene = cfg.scene_config(seed=args.seed)
    manifest = generate_dataset(args.frames, scene, cfg.sensor_config(),
                                args.out)
    print(f"wrote {args.frames} frames, manifest {manifest}")
    return EXIT_OK


def cmd_register(args, cfg: PipelineConfig) -> int:
    source = pio.read_pcd(args.source)
    target = pio.read_pcd(args.target)
    src = voxel_downsample(source, args.voxel_size)
    tgt = voxel_downsample(target, args.voxel_size)
    result = icp_point_to_point(src, tgt, IcpParams(
        correspondence_max_dist=args.max_dist))
    np.savetxt(sys.stdout, result.transform.rotation, fmt="%+.9f")
    print("t:", " ".join(f"{v:+.9f}" for v in result.transform.translation))
    print(f"rmse {result.rmse:.6f} after {result.iterations} iterations "
          f"({result.correspondence_count} pairs)")
    if args.rmse_csv:
        Path(args.rmse_csv).write_text(
            "iteration,rmse\n" + "".join(f"{i},{r}\n" for i, r in
                                         enumerate(result.rmse_history, 1)))
    return EXIT_OK


def cmd_ground_remove(args, cfg: PipelineConfig) -> int:
    cloud = pio.read_pcd(args.input)
    plane, _ = ransac_ground_plane(cloud, iterations=args.iterations,
                                   inlier_eps=args.eps, rng_seed=args.seed)
    kept = remove_ground(cloud, plane, args.eps)
    pio.write_pcd(kept, args.out)
    print(f"kept {len(kept)} of {len(cloud)} points "
          f"(normal {np.round(plane.normal, 4)})")
    return EXIT_OK


def cmd_pillarize(args, cfg: PipelineConfig) -> int:
    cloud = pio.read_pcd(args.input)
    pillars = pillarize(cloud, cfg.grid_config())
    np.savez(args.out, features=pillars.features, coords=pillars.coords,
             point_counts=pillars.point_counts)
    print(f"{pillars.num_pillars} pillars -> {args.out}")
    return EXIT_OK


def cmd_augment(args, cfg: PipelineConfig) -> int:
    class_names = list(cfg.eval_config().class_names)
    frame = pio.read_openlabel_frame(args.pcd, args.labels, class_names)
    params = cfg.augment_params()
    out = shape_aware_augment(frame, params, rng_seed=args.seed)
    if args.global_too:
        out = global_augment(out, params, rng_seed=args.seed + 1)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    pio.write_pcd(out.cloud, out_dir / f"{frame.frame_id}_aug.pcd")
    pio.write_openlabel(out, out_dir / f"{frame.frame_id}_aug.json",
                        class_names)
    print(f"augmented frame -> {out_dir}")
    return EXIT_OK


def _infer_one(frame_id, cloud, weights, cfg: PipelineConfig, seed):
    plane, _ = ransac_ground_plane(cloud, rng_seed=seed)
    cleaned = remove_ground(cloud, plane)
    pillars = pillarize(cleaned, cfg.grid_config())
    nms = cfg.nms_params()
    dets = network_forward(pillars, weights, cfg.architecture_config(),
                           score_threshold=0.0)
    return frame_id, run_nms(dets, nms)


def cmd_infer(args, cfg: PipelineConfig) -> int:
    data_dir = Path(args.data)
    pairs = pio.read_manifest(data_dir / "manifest.txt")
    arch = cfg.architecture_config()
    if args.weights:
        weights, _ = pio.load_weights(args.weights, expected_shapes(arch))
    else:
        weights = init_weights(arch, seed=args.seed)
    if args.score_threshold is not None:
        cfg.data["nms"]["score_threshold"] = args.score_threshold
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(Path(p).stem, pio.read_pcd(data_dir / p))
             for p, _ in pairs]
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_infer_star,
                                  [(fid, c, weights, cfg.data, args.seed)
                                   for fid, c in tasks]))
    else:
        results = [_infer_one(fid, c, weights, cfg, args.seed)
                   for fid, c in tasks]
    results.sort(key=lambda r: r[0])
    rows = []
    class_names = list(cfg.eval_config().class_names)
    for frame_id, dets in results:
        pio.write_openlabel(
            LabeledFrame(PointCloud.empty(),
                         tuple(_det_to_labeled(d, i) for i, d in enumerate(dets)),
                         frame_id),
            out_dir / f"{frame_id}_det.json", class_names)
        for d in dets:
            b = d.box
            rows.append([frame_id, d.class_id, f"{d.ranking_score:.6f}",
                         f"{d.predicted_iou:.6f}", f"{b.cx:.4f}", f"{b.cy:.4f}",
                         f"{b.cz:.4f}", f"{b.l:.4f}", f"{b.w:.4f}",
                         f"{b.h:.4f}", f"{b.yaw:.6f}"])
    with open(out_dir / "detections.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "class", "score", "predicted_iou",
                         "cx", "cy", "cz", "l", "w", "h", "yaw"])
        writer.writerows(rows)
    print(f"{len(rows)} detections over {len(results)} frames -> {out_dir}")
    return EXIT_OK


def _infer_star(packed):
    fid, cloud, weights, cfg_data, seed = packed
    return _infer_one(fid, cloud, weights, PipelineConfig(cfg_data), seed)


def _det_to_labeled(d: Detection, i: int):
    from .geometry import LabeledBox
    return LabeledBox(d.box, d.class_id, f"det_{i}")


def read_detections_csv(path):
    """detections.csv -> {frame_id: [Detection, ...]}."""
    frames = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            box = Box3D(float(row["cx"]), float(row["cy"]), float(row["cz"]),
                        float(row["l"]), float(row["w"]), float(row["h"]),
                        float(row["yaw"]))
            det = Detection(box, int(row["class"]),
                            score=min(1.0, float(row["score"])),
                            predicted_iou=float(row.get("predicted_iou", 0.0)))
            det.rectified_score = float(row["score"])
            frames.setdefault(row["frame"], []).append(det)
    return frames


def _load_eval_pairs(pred_csv, gt_dir, class_names):
    det_frames = read_detections_csv(pred_csv)
    gt_dir = Path(gt_dir)
    pairs = []
    for label_path in sorted(gt_dir.glob("*.json")):
        if label_path.stem.endswith("_det"):
            continue
        boxes, _ = pio.read_openlabel(label_path, class_names)
        frame_id = label_path.stem
        pairs.append((det_frames.get(frame_id, []), boxes))
    return pairs


def cmd_eval(args, cfg: PipelineConfig) -> int:
    eval_cfg = cfg.eval_config()
    pairs = _load_eval_pairs(args.pred, args.gt, list(eval_cfg.class_names))
    if not pairs:
        print("data error: no ground-truth frames found", file=sys.stderr)
        return EXIT_DATA
    report = evaluate_dataset(pairs, eval_cfg)
    print(report.pretty(list(eval_cfg.class_names)))
    for metric in eval_cfg.metrics:
        for thr in eval_cfg.iou_thresholds:
            for b in range(len(eval_cfg.difficulty_bins)):
                print(f"mAP {metric}@{thr} bin{b}: "
                      f"{100 * report.mean_ap(b, metric, thr):.2f}")
    if args.out:
        Path(args.out).write_text(report.to_csv())
    return EXIT_OK


def cmd_loss_audit(args, cfg: PipelineConfig) -> int:
    eval_cfg = cfg.eval_config()
    pairs = _load_eval_pairs(args.pred, args.gt, list(eval_cfg.class_names))
    lw = cfg.loss_weights()
    cls_v, box_v, dir_v, iou_v, n = 0.0, 0.0, 0.0, 0.0, 0
    from .geometry import iou_3d
    for dets, gts in pairs:
        for d in dets:
            best = None
            for g in gts:
                if g.class_id != d.class_id:
                    continue
                try:
                    iou = iou_3d(d.box, g.box)
                except ValueError:
                    continue
                if best is None or iou > best[0]:
                    best = (iou, g)
            if best is None or best[0] <= 0.0:
                continue
            iou, g = best
            p = min(max(d.ranking_score, 1e-6), 1.0 - 1e-6)
            cls_v += focal_loss(p, 1)[0]
            box_v += od_iou_loss(d.box, g.box)
            dir_v += angle_loss(d.box.yaw, g.box.yaw)[0]
            iou_v += smooth_l1(d.predicted_iou, iou)[0]
            n += 1
    if n == 0:
        print("no matched predictions; all loss components undefined")
        return EXIT_OK
    breakdown = student_total_loss(cls_v / n, box_v / n, dir_v / n,
                                   iou_v / n, 0.0, lw)
    for name in ("cls", "od_iou", "dir", "iou_pred", "consistency", "total"):
        print(f"{name:12s} {getattr(breakdown, name):.6f}")
    return EXIT_OK


def cmd_bench(args, cfg: PipelineConfig) -> int:
    sensor = cfg.sensor_config()
    scene = cfg.scene_config(seed=args.seed)
    frame = simulate_frame(scene, sensor)
    cloud = frame.cloud
    arch = cfg.architecture_config()
    weights = init_weights(arch, seed=args.seed)
    timings = []
    t0 = time.perf_counter()

    def stage(name, fn):
        start = time.perf_counter()
        out = fn()
        timings.append((name, time.perf_counter() - start))
        return out

    def ground_stage():
        plane, _ = ransac_ground_plane(cloud, rng_seed=args.seed)
        return remove_ground(cloud, plane)

    cleaned = stage("ground", ground_stage)
    pillars = stage("pillarize", lambda: pillarize(cleaned, cfg.grid_config()))
    from .network import (backbone_forward, decode_detections, head_forward,
                          pillar_encoder_forward)
    feats = stage("encoder", lambda: pillar_encoder_forward(pillars, weights,
                                                            arch))
    image = stage("scatter", lambda: scatter(feats, pillars.coords,
                                             pillars.config))
    fmap = stage("backbone", lambda: backbone_forward(image, weights, arch))
    raw = stage("head", lambda: head_forward(fmap, weights, arch))

    def nms_stage():
        dets = decode_detections(raw, arch, pillars.config,
                                 score_threshold=cfg.nms_params().score_threshold)
        return run_nms(dets, cfg.nms_params())

    stage("nms", nms_stage)
    wall = time.perf_counter() - t0

    buf = _io.StringIO()
    buf.write("stage,seconds\n")
    for name, dt in timings:
        buf.write(f"{name},{dt:.6f}\n")
    buf.write(f"total,{wall:.6f}\n")
    text = buf.getvalue()
    print(text, end="")
    preprocess = sum(dt for name, dt in timings
                     if name in ("ground", "pillarize", "scatter"))
    print(f"# preprocessing (ground+pillarize+scatter): {1e3 * preprocess:.2f} ms "
          f"on {len(cloud)} points")
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
