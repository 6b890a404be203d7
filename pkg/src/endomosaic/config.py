"""Flat key-value pipeline configuration.

The config file format is line-oriented ``section.key = value`` with ``#``
comments; unknown keys are rejected so typos fail loudly. Every key below
carries its origin: "method" marks values inherent to the approach being
implemented (fixed conventions of the protocol), "default" marks
implementation-chosen tunables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calib import DistortionModel
from .detect import DetectorSpec, TrainConfig
from .fusion import FusionConfig
from .register import RefineConfig
from .unfold import DoubleCube, look_at


class ConfigError(Exception):
    """Malformed config line or unknown key."""


@dataclass(frozen=True)
class Key:
    name: str
    typ: str          # int | float | str | floats
    default: object
    origin: str       # "method" or "default"
    help: str


KEYS = [
    Key("seed", "int", 0, "default", "global RNG seed for all stages"),

    Key("calib.fx", "float", 100.0, "default", "focal length x, px"),
    Key("calib.fy", "float", 100.0, "default", "focal length y, px"),
    Key("calib.cx", "float", 80.0, "default", "principal point x, px"),
    Key("calib.cy", "float", 60.0, "default", "principal point y, px"),
    Key("calib.k1", "float", 0.1, "default", "radial distortion, r^2 term"),
    Key("calib.k2", "float", 0.01, "default", "radial distortion, r^4 term"),

    Key("register.max_keypoints", "int", 200, "method",
        "initial detected feature count (fixed by the tracked protocol)"),
    Key("register.ratio", "float", 0.8, "default", "match ratio-test cutoff"),
    Key("register.tile", "int", 64, "default", "root verification block edge, px"),
    Key("register.min_tile", "int", 16, "default", "smallest block edge, px"),
    Key("register.median_tol", "float", 1.5, "default",
        "block acceptance: median transfer error, px"),
    Key("register.kl_tau", "float", 0.25, "default",
        "block acceptance: histogram divergence, nats"),
    Key("register.match_tol", "float", 3.0, "default",
        "per-match transfer-error cutoff inside accepted blocks, px"),
    Key("register.ransac_iters", "int", 500, "default", "RANSAC iterations"),
    Key("register.ransac_thresh", "float", 2.0, "default",
        "RANSAC inlier transfer error, px"),

    Key("chain.loop_tol", "float", 0.05, "default",
        "closed-loop residual target (Frobenius distance from identity)"),

    Key("fusion.beta", "float", 1e-3, "default",
        "quadratic penalty weight on the 4-DOF refinement vectors"),
    Key("fusion.weight_mode", "str", "uniform", "default",
        "seam weights: uniform or feather"),
    Key("fusion.feather_margin", "float", 8.0, "default",
        "feather distance normalization, px"),
    Key("fusion.tol", "float", 1e-4, "default", "relative loss decrease to stop"),
    Key("fusion.max_rounds", "int", 50, "default", "alternating rounds cap"),
    Key("fusion.max_canvas", "float", 900.0, "default",
        "frames whose warped corners pass this coordinate cap are not composited"),

    Key("unfold.edge_a", "float", 1.0, "default", "cube a edge, world units"),
    Key("unfold.edge_b", "float", 1.0, "default", "cube b edge, world units"),
    Key("unfold.offset", "float", 0.8, "default",
        "center-to-center stacking offset, world units"),
    Key("unfold.face_px", "int", 256, "default", "atlas tile edge, px"),

    Key("detect.scales", "floats", (12.0, 16.0, 20.0), "default",
        "anchor scales, px"),
    Key("detect.aspects", "floats", (1.0,), "default", "anchor aspect ratios"),
    Key("detect.pos_iou", "float", 0.5, "method",
        "IOU above which an anchor/detection counts as positive"),
    Key("detect.neg_iou", "float", 0.4, "default",
        "IOU below which an anchor is negative (band in between is ignored)"),
    Key("detect.neg_ratio", "float", 3.0, "default",
        "high-confidence negatives kept per positive; inf disables mining"),
    Key("detect.conf_thresh", "float", 0.5, "default", "detection cutoff"),
    Key("detect.nms_iou", "float", 0.45, "default", "NMS overlap cutoff"),
    Key("detect.lr", "float", 0.2, "default", "SGD learning rate"),
    Key("detect.momentum", "float", 0.9, "default", "SGD momentum"),
    Key("detect.steps", "int", 400, "default", "training steps"),
    Key("detect.batch_size", "int", 4, "default", "minibatch size"),

    Key("synth.frame_w", "int", 160, "default", "rendered frame width, px"),
    Key("synth.frame_h", "int", 120, "default", "rendered frame height, px"),
    Key("synth.n_frames", "int", 16, "default", "poses per scene (closed orbit)"),
    Key("synth.n_scenes", "int", 2, "default", "scenes in a generated dataset"),
    Key("synth.split", "float", 0.5, "default", "train fraction of scenes"),
    Key("synth.noise_sigma", "float", 0.0, "default",
        "sensor noise std as a fraction of 255"),
    Key("synth.spot_count", "int", 0, "default", "saturated reflections per frame"),
    Key("synth.texture_octaves", "int", 4, "default", "mottling octaves"),
    Key("synth.aug_sigmas", "floats", (0.0, 1.0, 2.0), "default",
        "smoothing scales for dataset augmentation"),
    Key("synth.pano_face_px", "int", 48, "default", "dataset panorama tile edge"),
    Key("synth.texture_lo", "float", 60.0, "default", "mottling floor intensity"),
    Key("synth.texture_hi", "float", 125.0, "default", "mottling peak intensity"),
]

_BY_NAME = {k.name: k for k in KEYS}


def _parse_value(key: Key, raw: str):
    try:
        if key.typ == "int":
            return int(raw)
        if key.typ == "float":
            return float(raw)
        if key.typ == "floats":
            return tuple(float(t) for t in raw.replace(",", " ").split())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key.name}: {raw!r}") from exc


@dataclass
class PipelineConfig:
    values: dict

    def __getitem__(self, name: str):
        return self.values[name]

    # -- typed views over the flat map --

    def distortion(self) -> DistortionModel:
        v = self.values
        return DistortionModel(v["calib.fx"], v["calib.fy"], v["calib.cx"],
                               v["calib.cy"], v["calib.k1"], v["calib.k2"])

    def refine(self) -> RefineConfig:
        v = self.values
        return RefineConfig(tile=v["register.tile"], min_tile=v["register.min_tile"],
                          median_tol=v["register.median_tol"],
                          kl_tau=v["register.kl_tau"],
                          match_tol=v["register.match_tol"],
                          ransac_iters=v["register.ransac_iters"],
                          ransac_thresh=v["register.ransac_thresh"],
                          seed=v["seed"])

    def fusion(self) -> FusionConfig:
        v = self.values
        return FusionConfig(max_rounds=v["fusion.max_rounds"], tol=v["fusion.tol"])

    def geometry(self) -> DoubleCube:
        v = self.values
        return DoubleCube(v["unfold.edge_a"], v["unfold.edge_b"],
                          v["unfold.offset"])

    def detector_spec(self) -> DetectorSpec:
        v = self.values
        return DetectorSpec(scales=tuple(v["detect.scales"]),
                            aspects=tuple(v["detect.aspects"]),
                            init_seed=v["seed"])

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(lr=v["detect.lr"], momentum=v["detect.momentum"],
                           steps=v["detect.steps"],
                           batch_size=v["detect.batch_size"], seed=v["seed"],
                           neg_ratio=v["detect.neg_ratio"],
                           pos_iou=v["detect.pos_iou"],
                           neg_iou=v["detect.neg_iou"])

    def scene_spec(self):
        from .synth import SceneSpec

        v = self.values
        n = v["synth.n_frames"]
        poses = orbit_poses(n)
        return SceneSpec(geometry=self.geometry(), camera=self.distortion(),
                         frame_size=(v["synth.frame_w"], v["synth.frame_h"]),
                         poses=poses,
                         texture_seed=v["seed"],
                         texture_octaves=v["synth.texture_octaves"],
                         texture_range=(v["synth.texture_lo"],
                                        v["synth.texture_hi"]),
                         noise_sigma=v["synth.noise_sigma"],
                         spot_count=v["synth.spot_count"],
                         seed=v["seed"])


def orbit_poses(n: int, center=(0.0, 0.0, 0.0)) -> list:
    """Closed yaw orbit: the camera spins in place looking at the side walls.

    A rotating camera keeps consecutive views related by exact homographies,
    which is what the chained registration assumes.
    """
    poses = []
    c = np.asarray(center, dtype=np.float64)
    for k in range(n):
        theta = 2.0 * np.pi * k / n
        target = c + np.array([np.cos(theta), np.sin(theta), 0.0])
        poses.append(look_at(c, target, up=(0.0, 0.0, 1.0)))
    return poses


def default_config() -> PipelineConfig:
    return PipelineConfig({k.name: k.default for k in KEYS})


def parse_config_text(text: str) -> PipelineConfig:
    cfg = default_config()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        name, value = (t.strip() for t in line.split("=", 1))
        if name not in _BY_NAME:
            raise ConfigError(f"unknown config key: {name}")
        cfg.values[name] = _parse_value(_BY_NAME[name], value)
    return cfg


def parse_config(path) -> PipelineConfig:
    with open(path) as f:
        return parse_config_text(f.read())


def describe_keys() -> str:
    """One line per key: name, default, origin, description."""
    lines = []
    for k in KEYS:
        lines.append(f"{k.name:<26}{k.default!s:<16}{k.origin:<9}{k.help}")
    return "\n".join(lines) + "\n"
