"""Run configuration: nested dataclasses loaded from and written to TOML.

Every field has a default; a TOML file only needs the keys it changes.
Unknown keys and out-of-range values raise :class:`ConfigError` naming the
dotted field.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .errors import ConfigError


@dataclass
class ModelConfig:
    num_anchors: int = 900
    embed_dims: int = 256
    num_groups: int = 8
    num_fixed_keypoints: int = 7
    num_learnable_keypoints: int = 6
    num_stages: int = 6
    num_heads: int = 1
    num_classes: int = 3
    depth_bins: int = 64
    depth_min: float = 1.0
    depth_max: float = 60.0
    depth_blocks: int = 2
    weight_norm: str = "softmax"
    spatial_norm: float = 50.0
    per_stage_cls: bool = True
    depth_reweight: bool = True
    ego_compensation: bool = True
    velocity_compensation: bool = True
    detach_anchors: bool = True
    anchor_dims: tuple = (4.0, 2.0, 1.6)
    reg_init_scale: float = 0.1

    def validate(self, p: str = "model") -> None:
        _positive(self, p, "num_anchors", "embed_dims", "num_groups", "num_stages",
                  "num_heads", "num_classes")
        if self.num_fixed_keypoints != 7:
            raise ConfigError(f"{p}.num_fixed_keypoints", "must be exactly 7")
        if self.num_learnable_keypoints < 0:
            raise ConfigError(f"{p}.num_learnable_keypoints", "must be >= 0")
        if not 1 <= self.num_stages <= 14:
            raise ConfigError(f"{p}.num_stages", "must lie in 1..14")
        if self.embed_dims % self.num_groups:
            raise ConfigError(f"{p}.num_groups", "must divide embed_dims")
        if self.embed_dims % self.num_heads:
            raise ConfigError(f"{p}.num_heads", "must divide embed_dims")
        if self.depth_bins < 2:
            raise ConfigError(f"{p}.depth_bins", "must be >= 2")
        if not 0 <= self.depth_min < self.depth_max:
            raise ConfigError(f"{p}.depth_max", "need 0 <= depth_min < depth_max")
        if self.weight_norm not in ("softmax", "sigmoid"):
            raise ConfigError(f"{p}.weight_norm", "must be 'softmax' or 'sigmoid'")
        if self.spatial_norm <= 0:
            raise ConfigError(f"{p}.spatial_norm", "must be positive")
        if len(self.anchor_dims) != 3 or min(self.anchor_dims) <= 0:
            raise ConfigError(f"{p}.anchor_dims", "need three positive extents")

    @property
    def num_keypoints(self) -> int:
        return self.num_fixed_keypoints + self.num_learnable_keypoints


@dataclass
class SceneConfig:
    num_frames: int = 4
    frame_interval: float = 0.5
    box_count: tuple = (4, 8)
    x_range: tuple = (-30.0, 30.0)
    y_range: tuple = (-30.0, 30.0)
    z_range: tuple = (0.5, 1.0)
    min_distance: float = 4.0
    class_dims: tuple = ((4.2, 1.9, 1.6), (2.0, 0.9, 1.6), (8.0, 2.6, 3.0))
    dims_jitter: float = 0.1
    speed_range: tuple = (0.0, 4.0)
    ego_speed_range: tuple = (0.0, 8.0)
    ego_yaw_rate_range: tuple = (-0.2, 0.2)
    signature_noise: float = 0.3

    def validate(self, p: str = "scene") -> None:
        _positive(self, p, "num_frames", "frame_interval")
        for name in ("box_count", "x_range", "y_range", "z_range", "speed_range",
                     "ego_speed_range", "ego_yaw_rate_range"):
            lo, hi = _pair_of(self, p, name)
            if lo > hi:
                raise ConfigError(f"{p}.{name}", f"low {lo} exceeds high {hi}")
        for name in ("x_range", "y_range"):
            lo, hi = getattr(self, name)
            if lo == hi:
                raise ConfigError(f"{p}.{name}", "zero-width range")
        if self.box_count[0] < 0:
            raise ConfigError(f"{p}.box_count", "must be >= 0")
        if self.speed_range[0] < 0 or self.ego_speed_range[0] < 0:
            raise ConfigError(f"{p}.speed_range", "speeds must be >= 0")
        if not self.class_dims or any(len(d) != 3 or min(d) <= 0 for d in self.class_dims):
            raise ConfigError(f"{p}.class_dims", "need positive (w, h, l) per class")
        if self.dims_jitter < 0 or self.dims_jitter >= 1:
            raise ConfigError(f"{p}.dims_jitter", "must lie in [0, 1)")


@dataclass
class CameraConfig:
    num_cameras: int = 6
    image_size: tuple = (128, 96)
    fov_deg: float = 90.0
    strides: tuple = (4, 8, 16, 32)
    mount_radius: float = 1.0
    mount_height: float = 1.5

    def validate(self, p: str = "camera") -> None:
        _positive(self, p, "num_cameras", "fov_deg")
        if not 0 < self.fov_deg < 180:
            raise ConfigError(f"{p}.fov_deg", "must lie in (0, 180)")
        if len(self.image_size) != 2 or min(self.image_size) < 2:
            raise ConfigError(f"{p}.image_size", "need (width, height) >= 2")
        s = list(self.strides)
        if not s or min(s) <= 0 or s != sorted(set(s)):
            raise ConfigError(f"{p}.strides", "must be positive and strictly increasing")
        w, h = self.image_size
        if (w - 1) // s[-1] + 1 < 2 or (h - 1) // s[-1] + 1 < 2:
            raise ConfigError(f"{p}.strides", "coarsest feature map would be smaller than 2x2")


@dataclass
class RenderConfig:
    direction_freqs: tuple = (1.0, 2.0)
    depth_wavelengths: tuple = (120.0, 60.0, 30.0, 15.0)
    sentinel_depth: float = 200.0
    signature_seed: int = 12345

    def validate(self, p: str = "render") -> None:
        if not self.direction_freqs or not self.depth_wavelengths:
            raise ConfigError(f"{p}.direction_freqs", "need at least one frequency")
        if self.sentinel_depth <= 0:
            raise ConfigError(f"{p}.sentinel_depth", "must be positive")

    def signature_channels(self, channels: int) -> int:
        return channels - 4 * len(self.direction_freqs) - 2 * len(self.depth_wavelengths)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 1
    lr: float = 2e-4
    min_lr_ratio: float = 0.0
    warmup_steps: int = 0
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 10.0
    detach_prob: float = 0.5
    log_every: int = 1

    def validate(self, p: str = "train") -> None:
        if self.steps < 0:
            raise ConfigError(f"{p}.steps", "must be >= 0")
        _positive(self, p, "batch_size", "eps", "log_every")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError(f"{p}.lr", "learning rate and weight decay must be >= 0")
        if not 0 <= self.min_lr_ratio <= 1:
            raise ConfigError(f"{p}.min_lr_ratio", "must lie in [0, 1]")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"{p}.betas", "need two values in [0, 1)")
        if not 0 <= self.detach_prob <= 1:
            raise ConfigError(f"{p}.detach_prob", "must lie in [0, 1]")
        if self.grad_clip < 0:
            raise ConfigError(f"{p}.grad_clip", "must be >= 0 (0 disables)")


@dataclass
class LossConfig:
    cls_weight: float = 2.0
    box_weight: float = 0.25
    depth_weight: float = 0.2
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    match_cls_weight: float = 1.0
    match_box_weight: float = 1.0

    def validate(self, p: str = "loss") -> None:
        for name in ("cls_weight", "box_weight", "depth_weight", "focal_gamma",
                     "match_cls_weight", "match_box_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{p}.{name}", "must be >= 0")
        if not 0 < self.focal_alpha < 1:
            raise ConfigError(f"{p}.focal_alpha", "must lie in (0, 1)")


@dataclass
class EvalConfig:
    thresholds: tuple = (0.5, 1.0, 2.0, 4.0)
    error_threshold: float = 2.0
    score_floor: float = 0.0
    num_scenes: int = 20
    seed_offset: int = 1_000_000

    def validate(self, p: str = "eval") -> None:
        if not self.thresholds or min(self.thresholds) <= 0:
            raise ConfigError(f"{p}.thresholds", "need positive distances")
        if self.error_threshold not in self.thresholds:
            raise ConfigError(f"{p}.error_threshold", "must be one of the thresholds")
        if not 0 <= self.score_floor < 1:
            raise ConfigError(f"{p}.score_floor", "must lie in [0, 1)")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    threads: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        if self.threads < 1:
            raise ConfigError("threads", "must be >= 1")
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                value.validate(f.name)
        sig = self.render.signature_channels(self.model.embed_dims)
        if sig < 1:
            raise ConfigError("model.embed_dims", "too few channels for the rendered encodings")
        if len(self.scene.class_dims) != self.model.num_classes:
            raise ConfigError("scene.class_dims", "need one entry per model.num_classes")
        return self

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    def replace(self, **sections) -> "RunConfig":
        """Shallow override, e.g. ``cfg.replace(model={"num_stages": 2}, seed=3)``."""
        out = dataclasses.replace(self)
        for key, value in sections.items():
            cur = getattr(out, key)
            if dataclasses.is_dataclass(cur) and isinstance(value, dict):
                setattr(out, key, dataclasses.replace(cur, **value))
            else:
                setattr(out, key, value)
        return out.validate()


def _to_plain(value):
    if isinstance(value, dict):
        return {k: _to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_plain(v) for v in value]
    return value


def _positive(obj, prefix: str, *names: str) -> None:
    for name in names:
        if getattr(obj, name) <= 0:
            raise ConfigError(f"{prefix}.{name}", "must be positive")


def _pair_of(obj, prefix: str, name: str):
    value = getattr(obj, name)
    if len(value) != 2:
        raise ConfigError(f"{prefix}.{name}", "need exactly two values")
    return value


def _coerce(default, value, key: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {value!r}")
        proto = default[0] if default else None
        if proto is None:
            return tuple(value)
        return tuple(_coerce(proto, v, f"{key}[{i}]") for i, v in enumerate(value))
    return value


def _section(cls, data: dict, prefix: str):
    obj = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{prefix}.{key}", "unknown key")
        setattr(obj, key, _coerce(getattr(obj, key), value, f"{prefix}.{key}"))
    return obj


def from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    for f in dataclasses.fields(RunConfig):
        if f.name not in data:
            continue
        current = getattr(cfg, f.name)
        if dataclasses.is_dataclass(current):
            if not isinstance(data[f.name], dict):
                raise ConfigError(f.name, "expected a table")
            setattr(cfg, f.name, _section(type(current), data[f.name], f.name))
        else:
            setattr(cfg, f.name, _coerce(current, data[f.name], f.name))
    unknown = set(data) - {f.name for f in dataclasses.fields(RunConfig)}
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(key, "unknown key")
    return cfg.validate()


def loads(text: str) -> RunConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"invalid TOML: {exc}") from exc
    return from_dict(data)


def load(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return loads(path.read_text())


def toy_config(**overrides) -> RunConfig:
    """Desk-scale setting: M=32, N=2, T=2, S=2, C=32, K_L=4, six stages."""
    cfg = RunConfig(
        seed=0,
        out_dir="runs/toy",
        model=ModelConfig(num_anchors=32, embed_dims=32, num_groups=4, num_learnable_keypoints=4,
                          num_stages=6, num_classes=3, depth_bins=32, depth_min=1.0,
                          depth_max=16.0, spatial_norm=10.0),
        scene=SceneConfig(num_frames=2, box_count=(4, 8), x_range=(-10.0, 10.0),
                          y_range=(-10.0, 10.0)),
        camera=CameraConfig(num_cameras=2, image_size=(256, 96), fov_deg=120.0, strides=(8, 16)),
        train=TrainConfig(steps=2000, lr=2e-3, warmup_steps=50, weight_decay=1e-4),
    )
    return cfg.replace(**overrides) if overrides else cfg.validate()
