"""Pipeline configuration: one TOML file with sections for every stage.

Unknown sections or keys are rejected at load time, before any file is
written. Every default is printable via `pillardet <cmd> --dump-config`.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .augmentation import AugmentParams
from .evaluation import EvalConfig
from .geometry import RigidTransform
from .losses import LossWeights
from .network import AnchorSpec, ArchitectureConfig
from .postprocess import NmsParams
from .preprocessing import GRID_PRESETS, PillarGridConfig
from .synth import ClassSpec, SceneConfig, SensorConfig

ENV_CONFIG = "PILLARDET_CONFIG"


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "grid": {
        "preset": "coarse",          # one of preprocessing.GRID_PRESETS, or ""
        "x_range": [-40.96, 40.96],
        "y_range": [-40.96, 40.96],
        "z_range": [-1.0, 9.0],
        "pillar_size": 0.64,
        "max_points_per_pillar": 32,
    },
    "architecture": {
        # TA/PFN hidden widths use a bottleneck ratio of 2 (not given by
        # any reference; tune here if importing foreign weights)
        "ta_dims": [64, 128],
        "pfn_out": 64,
        "backbone_channels": [64, 128, 256],
        "fused_channels": 128,
        "num_classes": 1,
        "anchor_size": [4.5, 1.9, 1.7],
        "anchor_z": 0.85,
    },
    "nms": {
        "mode": "di-nms",
        "iou_threshold": 0.3,
        "score_threshold": 0.3,
        "beta": 0.5,
        "sigma_near": 0.01,
        "sigma_far": 1.0,
        "d_max": 60.0,
    },
    "augmentation": {
        "p_dropout": 0.25,
        "p_swap": 0.1,
        "p_sparsify": 0.1,
        "sparsify_keep_ratio": 0.5,
        "rotation_range": math.pi / 4.0,
        "flip_probability": 0.5,
        "scale_range": [0.95, 1.05],
    },
    "losses": {
        "omega1": 2.0,
        "omega2": 0.2,
        "lambda": 1.0,
        "mu_t": 1.0,
        "tau_c": 0.7,
    },
    "eval": {
        "iou_thresholds": [0.7],
        "metrics": ["3d", "bev"],
        "recall_positions": 40,
        "difficulty_bins": [[0.0, 30.0], [30.0, 50.0], [50.0, 1.0e9]],
        "class_names": ["vehicle"],
    },
    "synth": {
        "channels": 64,
        "azimuth_steps": 2048,
        "vertical_fov_deg": [-22.5, 22.5],
        "max_range": 120.0,
        "range_noise_sigma": 0.1,
        "sensor_height": 7.0,
        "vehicle_count": 8,
        "vehicle_mean_size": [4.5, 1.9, 1.7],
        "vehicle_size_sigma": [0.3, 0.1, 0.1],
        "placement_range": [-30.0, 30.0],
        "ground_z": 0.0,
    },
    "io": {
        "kitti_cam_to_lidar": [],      # 16 floats, row-major 4x4, if used
    },
}


class PipelineConfig:
    def __init__(self, data: dict | None = None):
        self.data = {s: dict(v) for s, v in DEFAULTS.items()}
        if data:
            for section, values in data.items():
                if section not in self.data:
                    raise ConfigError(f"unknown config section [{section}]")
                if not isinstance(values, dict):
                    raise ConfigError(f"section [{section}] must be a table")
                for key, value in values.items():
                    if key not in self.data[section]:
                        raise ConfigError(
                            f"unknown key {key!r} in section [{section}]")
                    default = self.data[section][key]
                    if isinstance(default, bool) != isinstance(value, bool) or \
                            not _compatible(default, value):
                        raise ConfigError(
                            f"bad type for {section}.{key}: expected "
                            f"{type(default).__name__}")
                    self.data[section][key] = value
        # fail fast: build every typed view once
        self.grid_config()
        self.architecture_config()
        self.nms_params()
        self.augment_params()
        self.loss_weights()
        self.eval_config()
        self.sensor_config()
        self.scene_config(seed=0)

    @classmethod
    def load(cls, path=None) -> "PipelineConfig":
        if path is None:
            path = os.environ.get(ENV_CONFIG)
        if path is None:
            return cls()
        with open(path, "rb") as f:
            try:
                data = tomllib.load(f)
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(f"invalid TOML: {e}") from e
        return cls(data)

    def grid_config(self) -> PillarGridConfig:
        g = self.data["grid"]
        if g["preset"]:
            if g["preset"] not in GRID_PRESETS:
                raise ConfigError(f"unknown grid preset {g['preset']!r}")
            return GRID_PRESETS[g["preset"]]
        return PillarGridConfig(
            x_range=tuple(g["x_range"]), y_range=tuple(g["y_range"]),
            z_range=tuple(g["z_range"]), pillar_size_x=g["pillar_size"],
            pillar_size_y=g["pillar_size"],
            max_points_per_pillar=g["max_points_per_pillar"])

    def architecture_config(self) -> ArchitectureConfig:
        a = self.data["architecture"]
        l, w, h = a["anchor_size"]
        anchors = tuple(AnchorSpec(l, w, h, a["anchor_z"])
                        for _ in range(a["num_classes"]))
        return ArchitectureConfig(
            n_points=self.data["grid"]["max_points_per_pillar"],
            ta_dims=tuple(a["ta_dims"]), pfn_out=a["pfn_out"],
            backbone_channels=tuple(a["backbone_channels"]),
            fused_channels=a["fused_channels"],
            num_classes=a["num_classes"], anchors=anchors)

    def nms_params(self) -> NmsParams:
        n = self.data["nms"]
        return NmsParams(mode=n["mode"], iou_threshold=n["iou_threshold"],
                         score_threshold=n["score_threshold"], beta=n["beta"],
                         sigma_near=n["sigma_near"], sigma_far=n["sigma_far"],
                         d_max=n["d_max"])

    def augment_params(self) -> AugmentParams:
        a = self.data["augmentation"]
        return AugmentParams(
            p_dropout=a["p_dropout"], p_swap=a["p_swap"],
            p_sparsify=a["p_sparsify"],
            sparsify_keep_ratio=a["sparsify_keep_ratio"],
            rotation_range=a["rotation_range"],
            flip_probability=a["flip_probability"],
            scale_range=tuple(a["scale_range"]))

    def loss_weights(self) -> LossWeights:
        lw = self.data["losses"]
        return LossWeights(omega1=lw["omega1"], omega2=lw["omega2"],
                           lam=lw["lambda"], mu_t=lw["mu_t"])

    def eval_config(self) -> EvalConfig:
        e = self.data["eval"]
        return EvalConfig(
            iou_thresholds=tuple(e["iou_thresholds"]),
            metrics=tuple(e["metrics"]),
            recall_positions=e["recall_positions"],
            difficulty_bins=tuple((lo, hi) for lo, hi in e["difficulty_bins"]),
            class_names=tuple(e["class_names"]))

    def sensor_config(self) -> SensorConfig:
        s = self.data["synth"]
        lo, hi = s["vertical_fov_deg"]
        mount = RigidTransform(np.eye(3),
                               np.array([0.0, 0.0, s["sensor_height"]]))
        return SensorConfig(channels=s["channels"],
                            azimuth_steps=s["azimuth_steps"],
                            vertical_fov=(math.radians(lo), math.radians(hi)),
                            max_range=s["max_range"],
                            range_noise_sigma=s["range_noise_sigma"],
                            mount=mount)

    def scene_config(self, seed: int) -> SceneConfig:
        s = self.data["synth"]
        spec = ClassSpec(name=self.data["eval"]["class_names"][0],
                         count=s["vehicle_count"],
                         mean_size=tuple(s["vehicle_mean_size"]),
                         size_sigma=tuple(s["vehicle_size_sigma"]))
        return SceneConfig(classes=(spec,),
                           placement_range=tuple(s["placement_range"]),
                           ground_z=s["ground_z"], rng_seed=seed)

    def dump(self) -> str:
        lines = []
        for section, values in self.data.items():
            lines.append(f"[{section}]")
            for key, value in values.items():
                lines.append(f"{key} = {_toml_value(value)}")
            lines.append("")
        return "\n".join(lines)


def _compatible(default, value) -> bool:
    if isinstance(default, float) and isinstance(value, (int, float)):
        return True
    if isinstance(default, list):
        return isinstance(value, list)
    return isinstance(value, type(default))


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize {type(v).__name__}")
