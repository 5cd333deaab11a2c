"""Closed-form FLOP counts for the aggregation path and a small sweep harness.

The closed form mirrors the per-op costs charged by the tensor engine, so
``aggregation_flops`` equals what ``count_flops`` records for one call of
``decoder.aggregate`` (with every history frame at a nonzero time offset).
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .config import ConfigError, RunConfig
from .decoder import Decoder, aggregate, anchor_embed
from .geometry import SE3, FrameClock
from .sampling import BILINEAR_FLOPS_PER_CHANNEL, BILINEAR_FLOPS_PER_POINT, FeatureQueue

SWEEP_AXES = ("M", "K", "T", "N", "S", "C", "stages")

# per-point costs of the fixed pieces
_PROJECT_PER_POINT = 30       # extrinsic matmul (15) + translation (3) + pinhole and masking (12)
_SCALE_PER_POINT = 2          # pixel -> cell coordinates
_HISTORY_NO_VELOCITY = 18
_HISTORY_NO_EGO = 6
_FIXED_PER_ANCHOR = 87        # exp dims (3) + scale (21) + rotate (42) + translate (21)
_LEARNABLE_PER_ANCHOR = 3     # exp dims, recomputed for the learnable set
_LEARNABLE_PER_KEYPOINT = 27  # sigmoid (12) + shift (3) + rotate (6) + scale (3) + translate (3)


@dataclass(frozen=True)
class AggregationShape:
    anchors: int       # M
    channels: int      # C
    learnable: int     # K_L
    frames: int        # T
    views: int         # N
    scales: int        # S
    groups: int        # G
    ego_compensation: bool = True
    velocity_compensation: bool = True

    @property
    def keypoints(self) -> int:
        return 7 + self.learnable

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "AggregationShape":
        m = cfg.model
        return cls(m.num_anchors, m.embed_dims, m.num_learnable_keypoints, cfg.scene.num_frames,
                   cfg.camera.num_cameras, len(cfg.camera.strides), m.num_groups,
                   m.ego_compensation, m.velocity_compensation)


def aggregation_flops(s: AggregationShape) -> int:
    m, c, kl, nt, n, ns, g = s.anchors, s.channels, s.learnable, s.frames, s.views, s.scales, s.groups
    k = s.keypoints
    p = m * k
    total = _FIXED_PER_ANCHOR * m
    if kl:
        total += 2 * m * c * 3 * kl + _LEARNABLE_PER_ANCHOR * m + _LEARNABLE_PER_KEYPOINT * kl * m
    per_history = (s.velocity_compensation * _HISTORY_NO_EGO
                   + s.ego_compensation * _HISTORY_NO_VELOCITY)
    total += (nt - 1) * per_history * p
    # projection and sampling
    per_view = _PROJECT_PER_POINT * p + ns * (_SCALE_PER_POINT * p
                                              + p * (BILINEAR_FLOPS_PER_POINT + BILINEAR_FLOPS_PER_CHANNEL * c))
    total += nt * n * per_view
    # weights
    total += 2 * m * c * k * n * ns * g + 4 * m * k * n * ns * g
    # view/scale fusion: product then reduction over N*S
    total += m * k * nt * n * ns * c + (m * k * nt * n * ns * c - m * k * nt * c)
    # temporal fold
    total += (nt - 1) * 2 * p * 2 * c * c
    # keypoint sum
    total += m * k * c - m * c
    return int(total)


def random_queue(shape: AggregationShape, rng: np.random.Generator, image_size=(128, 96),
                 dtype=np.float32) -> FeatureQueue:
    """Random feature maps on a ring rig; history poses are small random motions."""
    from .config import CameraConfig
    from .training.scene import camera_rig

    strides = tuple(8 * 2 ** i for i in range(shape.scales))
    cam_cfg = CameraConfig(num_cameras=shape.views, image_size=image_size, fov_deg=120.0, strides=strides)
    rig = camera_rig(RunConfig(camera=cam_cfg))
    maps = []
    for _ in range(shape.frames):
        maps.append([[rng.normal(size=rig[0].feature_shape(si) + (shape.channels,)).astype(dtype)
                      for si in range(shape.scales)] for _ in range(shape.views)])
    poses = [SE3.from_yaw(rng.uniform(-0.1, 0.1), rng.uniform(-2, 2, size=3)) for _ in range(shape.frames - 1)]
    poses.append(SE3.identity())
    clock = FrameClock(tuple(0.5 * i for i in range(shape.frames)))
    return FeatureQueue(maps, [list(rig) for _ in range(shape.frames)], poses, clock)


def config_for(cfg: RunConfig, axis: str, value: int) -> RunConfig:
    """``cfg`` with one sweep axis set to ``value``."""
    if axis not in SWEEP_AXES:
        raise ConfigError("bench.axis", f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    m, sc, cam = cfg.model, cfg.scene, cfg.camera
    if axis == "M":
        m = replace(m, num_anchors=value)
    elif axis == "K":
        if value < 7:
            raise ConfigError("bench.values", "K counts the 7 fixed keypoints and must be >= 7")
        m = replace(m, num_learnable_keypoints=value - 7)
    elif axis == "T":
        sc = replace(sc, num_frames=value)
    elif axis == "N":
        cam = replace(cam, num_cameras=value)
    elif axis == "S":
        cam = replace(cam, strides=tuple(8 * 2 ** i for i in range(value)))
    elif axis == "C":
        m = replace(m, embed_dims=value)
    elif axis == "stages":
        m = replace(m, num_stages=value)
    return cfg.replace(model=m, scene=sc, camera=cam)


@dataclass
class BenchRow:
    axis: str
    value: int
    analytic_flops: int
    counted_flops: int
    decoder_flops: int
    seconds: float


def measure(cfg: RunConfig, seed: int = 0, repeats: int = 3) -> tuple[int, int, float]:
    """Counted aggregation FLOPs (stage 0), whole-decoder FLOPs, best aggregation wall time."""
    rng = np.random.default_rng(seed)
    shape = AggregationShape.from_config(cfg)
    queue = random_queue(shape, rng, cfg.camera.image_size)
    sc = cfg.scene
    decoder = Decoder(cfg.model, shape.views, shape.scales, (sc.x_range, sc.y_range, sc.z_range), rng)
    stage = decoder.stages[0]
    with T.no_grad():
        feats = decoder.features + anchor_embed(decoder.anchors, stage.embed, cfg.model.spatial_norm)
        with T.count_flops() as agg:
            aggregate(feats, decoder.anchors, queue, stage, cfg.model)
        with T.count_flops() as full:
            decoder(queue)
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            aggregate(feats, decoder.anchors, queue, stage, cfg.model)
            best = min(best, time.perf_counter() - t0)
    return sum(agg.values()), sum(full.values()), best


def sweep(cfg: RunConfig, axis: str, values, seed: int = 0, repeats: int = 3) -> list[BenchRow]:
    rows = []
    for value in values:
        c = config_for(cfg, axis, int(value))
        counted, decoder_flops, secs = measure(c, seed, repeats)
        rows.append(BenchRow(axis, int(value), aggregation_flops(AggregationShape.from_config(c)),
                             counted, decoder_flops, secs))
    return rows


def linear_fit_residual(x, y) -> float:
    """Max relative residual of the least-squares fit ``y = a + b x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    design = np.stack([np.ones_like(x), x], axis=1)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return float(np.max(np.abs(design @ coef - y) / np.abs(y)))


def rows_to_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "value", "analytic_flops", "counted_flops", "decoder_flops", "seconds"])
    for r in rows:
        w.writerow([r.axis, r.value, r.analytic_flops, r.counted_flops, r.decoder_flops, f"{r.seconds:.6f}"])
    return buf.getvalue()
