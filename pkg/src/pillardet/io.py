"""File formats: PCD point clouds, OpenLABEL-subset labels, weight blobs,
and newline-delimited dataset manifests."""

from __future__ import annotations

import json
import math
import zlib
from pathlib import Path

import numpy as np

from .geometry import Box3D, LabeledBox, LabeledFrame, PointCloud


class PcdError(ValueError):
    pass


class MalformedHeaderError(PcdError):
    pass


class UnsupportedLayoutError(PcdError):
    pass


class TruncatedDataError(PcdError):
    pass


class LabelError(ValueError):
    pass


class WeightsError(ValueError):
    pass


class WeightsShapeMismatch(WeightsError):
    pass


class WeightsChecksumError(WeightsError):
    pass


# ---------------------------------------------------------------------------
# PCD v0.7 (ASCII and binary little-endian), fields x y z intensity

_PCD_FIELDS = ["x", "y", "z", "intensity"]


def write_pcd(cloud: PointCloud, path, binary: bool = True) -> None:
    path = Path(path)
    n = len(cloud)
    header = (
        "# .PCD v0.7 - Point Cloud Data file format\n"
        "VERSION 0.7\n"
        "FIELDS x y z intensity\n"
        "SIZE 4 4 4 4\n"
        "TYPE F F F F\n"
        "COUNT 1 1 1 1\n"
        f"WIDTH {n}\n"
        "HEIGHT 1\n"
        "VIEWPOINT 0 0 0 1 0 0 0\n"
        f"POINTS {n}\n"
        f"DATA {'binary' if binary else 'ascii'}\n"
    )
    data = np.column_stack([cloud.xyz, cloud.intensity]).astype("<f4")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            f.write(data.tobytes())
        else:
            for row in data:
                f.write((" ".join(repr(float(v)) for v in row) + "\n").encode("ascii"))


def read_pcd(path) -> PointCloud:
    raw = Path(path).read_bytes()
    header, body = _split_pcd_header(raw)
    fields = header.get("FIELDS", "").split()
    if fields != _PCD_FIELDS:
        raise UnsupportedLayoutError(f"unsupported field layout: {fields}")
    if header.get("TYPE", "").split() != ["F", "F", "F", "F"] or \
       header.get("SIZE", "").split() != ["4", "4", "4", "4"]:
        raise UnsupportedLayoutError("only 4-byte float fields are supported")
    try:
        n = int(header["POINTS"])
    except (KeyError, ValueError) as e:
        raise MalformedHeaderError("missing or invalid POINTS") from e
    mode = header.get("DATA", "").strip()
    if mode == "binary":
        need = n * 16
        if len(body) < need:
            raise TruncatedDataError(f"expected {need} bytes, got {len(body)}")
        data = np.frombuffer(body[:need], dtype="<f4").reshape(n, 4)
    elif mode == "ascii":
        rows = [ln.split() for ln in body.decode("ascii").splitlines() if ln.strip()]
        if len(rows) < n:
            raise TruncatedDataError(f"expected {n} records, got {len(rows)}")
        try:
            data = np.array(rows[:n], dtype=np.float64).reshape(max(n, 0), 4) \
                if n else np.empty((0, 4))
        except ValueError as e:
            raise MalformedHeaderError("non-numeric record") from e
        data = data.astype(np.float32)
    else:
        raise MalformedHeaderError(f"unknown DATA mode {mode!r}")
    inten = np.clip(data[:, 3].astype(np.float64), 0.0, 1.0) if n else np.empty(0)
    if n and (data[:, 3].min() < -1e-6 or data[:, 3].max() > 1.0 + 1e-6):
        raise PcdError("intensity outside [0, 1]")
    return PointCloud(data[:, :3].astype(np.float64), inten)


def _split_pcd_header(raw: bytes):
    header = {}
    pos = 0
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise MalformedHeaderError("no DATA line found")
        line = raw[pos:nl].decode("ascii", errors="replace").strip()
        pos = nl + 1
        if line.startswith("#") or not line:
            continue
        key, _, value = line.partition(" ")
        header[key] = value
        if key == "DATA":
            return header, raw[pos:]


# ---------------------------------------------------------------------------
# OpenLABEL subset: cuboids + type, objects keyed by instance id

def write_openlabel(frame: LabeledFrame, path, class_names=None) -> None:
    objects = {}
    for lb in frame.boxes:
        b = lb.box
        name = str(lb.class_id) if class_names is None else class_names[lb.class_id]
        objects[lb.instance_id or str(len(objects))] = {
            "type": name,
            "cuboid": {
                "val": [b.cx, b.cy, b.cz, 0.0, 0.0, b.yaw, b.l, b.w, b.h],
                "rotation": "euler",
            },
        }
    doc = {"openlabel": {"metadata": {"schema_version": "1.0"},
                         "frame_id": frame.frame_id,
                         "objects": objects}}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def read_openlabel(path, class_names=None):
    """Return (list of LabeledBox, list of warning strings).

    Accepts euler (rx, ry, yaw) or quaternion (qx, qy, qz, qw) rotation in
    the cuboid; emits per-object warnings and raises LabelError only when
    every object is unusable or the document itself is malformed.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise LabelError(f"invalid JSON: {e}") from e
    try:
        root = doc["openlabel"]
        objects = root.get("objects", {})
    except (KeyError, TypeError) as e:
        raise LabelError("missing openlabel root") from e
    boxes, warnings = [], []
    name_to_id = None
    if class_names is not None:
        name_to_id = {n: i for i, n in enumerate(class_names)}
    for oid, obj in objects.items():
        cub = obj.get("cuboid")
        if cub is None:
            warnings.append(f"object {oid}: missing cuboid")
            continue
        val = cub.get("val", [])
        if len(val) == 9:
            cx, cy, cz, _, _, yaw, l, w, h = val
        elif len(val) == 10:  # quaternion form: cx cy cz qx qy qz qw l w h
            cx, cy, cz, qx, qy, qz, qw, l, w, h = val
            yaw = math.atan2(2.0 * (qw * qz + qx * qy),
                             1.0 - 2.0 * (qy * qy + qz * qz))
        else:
            warnings.append(f"object {oid}: cuboid val has {len(val)} entries")
            continue
        if l <= 0 or w <= 0 or h <= 0:
            warnings.append(f"object {oid}: invalid box dimensions")
            continue
        type_name = obj.get("type", "")
        if name_to_id is not None:
            if type_name not in name_to_id:
                warnings.append(f"object {oid}: unknown class {type_name!r}")
                continue
            class_id = name_to_id[type_name]
        else:
            try:
                class_id = int(type_name)
            except ValueError:
                warnings.append(f"object {oid}: unknown class {type_name!r}")
                continue
        boxes.append(LabeledBox(Box3D(cx, cy, cz, l, w, h, yaw), class_id, oid))
    if objects and not boxes and warnings:
        raise LabelError("no usable objects: " + "; ".join(warnings))
    return boxes, warnings


def read_openlabel_frame(pcd_path, label_path, class_names=None) -> LabeledFrame:
    cloud = read_pcd(pcd_path)
    boxes, _ = read_openlabel(label_path, class_names)
    return LabeledFrame(cloud, tuple(boxes), frame_id=Path(pcd_path).stem)


# ---------------------------------------------------------------------------
# model weights: JSON manifest + flat little-endian float32 blob

def save_weights(weights: dict, path, seed: int = 0) -> None:
    """`weights` maps parameter-path -> float32 ndarray. Writes `path`
    (manifest JSON) and `path`.bin alongside it."""
    path = Path(path)
    names = sorted(weights)
    blob = b"".join(np.ascontiguousarray(weights[n], dtype="<f4").tobytes()
                    for n in names)
    manifest = {
        "seed": int(seed),
        "dtype": "float32",
        "params": [{"name": n, "shape": list(np.asarray(weights[n]).shape)}
                   for n in names],
        "crc32": zlib.crc32(blob),
    }
    path.write_text(json.dumps(manifest, indent=1))
    path.with_suffix(path.suffix + ".bin").write_bytes(blob)


def load_weights(path, expected_shapes: dict | None = None):
    """Return (weights dict, seed). Verifies the checksum and, if given,
    the per-parameter shapes from the architecture config."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise WeightsError(f"invalid manifest: {e}") from e
    blob_path = path.with_suffix(path.suffix + ".bin")
    if not blob_path.exists():
        raise FileNotFoundError(f"weights blob missing: {blob_path}")
    blob = blob_path.read_bytes()
    if zlib.crc32(blob) != manifest.get("crc32"):
        raise WeightsChecksumError("blob checksum mismatch")
    weights = {}
    offset = 0
    for p in manifest["params"]:
        shape = tuple(p["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count,
                            offset=offset).reshape(shape)
        offset += count * 4
        weights[p["name"]] = arr.copy()
    if offset != len(blob):
        raise WeightsError("blob size does not match manifest")
    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            if name not in weights:
                raise WeightsShapeMismatch(f"missing parameter {name}")
            if tuple(weights[name].shape) != tuple(shape):
                raise WeightsShapeMismatch(
                    f"{name}: file {weights[name].shape} vs config {tuple(shape)}")
    return weights, int(manifest.get("seed", 0))


# ---------------------------------------------------------------------------
# dataset manifest: newline-delimited relative paths "pcd<TAB>label"

def write_manifest(pairs, path) -> None:
    lines = [f"{p}\t{l}" for p, l in pairs]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_manifest(path):
    pairs = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        pcd, _, label = line.partition("\t")
        pairs.append((pcd, label))
    return pairs


# ---------------------------------------------------------------------------
# KITTI label converter (read-only); camera -> LiDAR via supplied 4x4 matrix

def read_kitti_labels(path, cam_to_lidar: np.ndarray, class_names) -> list:
    """Parse a KITTI label txt into LabeledBox entries in the LiDAR frame.

    KITTI stores (h, w, l), the bottom-center location in camera
    coordinates, and rotation_y about the camera y-axis. `cam_to_lidar`
    is the homogeneous 4x4 calibration matrix.
    """
    cam_to_lidar = np.asarray(cam_to_lidar, dtype=float).reshape(4, 4)
    name_to_id = {n: i for i, n in enumerate(class_names)}
    boxes = []
    for i, line in enumerate(Path(path).read_text().splitlines()):
        parts = line.split()
        if len(parts) < 15:
            continue
        name = parts[0]
        if name not in name_to_id:
            continue
        h, w, l = (float(v) for v in parts[8:11])
        x, y, z = (float(v) for v in parts[11:14])
        ry = float(parts[14])
        center_cam = np.array([x, y - h / 2.0, z, 1.0])
        cx, cy, cz = (cam_to_lidar @ center_cam)[:3]
        yaw = -ry - math.pi / 2.0
        boxes.append(LabeledBox(Box3D(cx, cy, cz, l, w, h, yaw),
                                name_to_id[name], f"kitti_{i}"))
    return boxes
