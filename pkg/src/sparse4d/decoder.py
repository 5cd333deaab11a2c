"""Iterative refinement decoder.

Each stage runs: self-attention among instances, deformable 4D aggregation
(keypoints, sampling, view/scale, temporal and keypoint fusion), the depth
reweight, then the regression and classification heads. Stages have
independent parameters; the reweighted feature of one stage is the instance
feature of the next.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .fusion import (MLP, DepthNet, depth_reweight, fuse_keypoints, fuse_temporal, fuse_view_scale,
                     predict_weights, sample_confidence)
from .geometry import ANCHOR_DIM, COS, SIN, X, Z, build_keypoints4d
from .sampling import FeatureQueue, sample_features
from .tensor import Linear, Module, Parameter, Tensor

FOCAL_PRIOR = 0.01


class StageParams(Module):
    def __init__(self, cfg: ModelConfig, num_views: int, num_scales: int, rng, dtype):
        c = cfg.embed_dims
        k = cfg.num_keypoints
        self.embed = Linear(ANCHOR_DIM, c, rng, dtype)
        self.query = Linear(c, c, rng, dtype)
        self.key = Linear(c, c, rng, dtype)
        self.value = Linear(c, c, rng, dtype, init_scale=0.5)
        self.phi = Linear(c, 3 * cfg.num_learnable_keypoints, rng, dtype) if cfg.num_learnable_keypoints else None
        self.psi = Linear(c, k * num_views * num_scales * cfg.num_groups, rng, dtype)
        self.psi_temp = Linear(2 * c, c, rng, dtype)
        self.depth = DepthNet(c, cfg.depth_bins, cfg.depth_blocks, rng, dtype)
        self.reg = MLP(c, c, ANCHOR_DIM, rng, dtype, final_scale=cfg.reg_init_scale)
        self.cls = MLP(c, c, cfg.num_classes, rng, dtype,
                       final_bias=-math.log((1 - FOCAL_PRIOR) / FOCAL_PRIOR))


@dataclass
class StageOutput:
    anchors: Tensor        # refined, [M, 11]
    features: Tensor       # reweighted instance features, [M, C]
    cls_logits: Tensor | None
    depth_probs: Tensor    # [M, D]
    confidence: Tensor     # [M]
    input_anchors: Tensor  # anchors the stage started from


def anchor_embed(anchors: Tensor, layer: Linear, spatial_norm: float) -> Tensor:
    """Linear embedding of the anchor vector with positions divided by ``spatial_norm``."""
    norm = np.ones(ANCHOR_DIM, dtype=anchors.dtype)
    norm[X:Z + 1] = 1.0 / spatial_norm
    return layer(anchors * np.broadcast_to(norm, anchors.shape))


def self_attention(features: Tensor, embedding: Tensor, stage: StageParams, heads: int = 1) -> Tensor:
    """Scaled dot-product attention over instances with a residual connection.

    Queries and keys see ``features + embedding``; values see ``features``.
    """
    m, c = features.shape
    dh = c // heads
    x = features + embedding

    def split(t):
        return T.transpose(T.reshape(t, (m, heads, dh)), (1, 0, 2))  # [h, M, dh]

    q = split(stage.query(x))
    k = T.transpose(split(stage.key(x)), (0, 2, 1))
    v = split(stage.value(features))
    attn = T.softmax(T.scale(T.matmul(q, k), 1.0 / math.sqrt(dh)), axis=2)
    out = T.reshape(T.transpose(T.matmul(attn, v), (1, 0, 2)), (m, c))
    return features + out


def apply_refinement(anchors: Tensor, offsets: Tensor) -> Tensor:
    """Add offsets in parameter space, then put (sin, cos) back on the unit circle.

    A (sin, cos) pair with both entries within 1e-8 of zero resets to yaw 0.
    A pair whose offsets are exactly zero is passed through untouched, so zero
    offsets are a bit-exact fixed point (renormalizing is not idempotent in
    floating point).
    """
    raw = anchors + offsets
    m = raw.shape[0]
    sc = raw[:, SIN:COS + 1]
    degenerate = (np.abs(sc.data) < 1e-8).all(axis=1)
    keep = (~degenerate).astype(raw.dtype)[:, None]
    norm = T.sqrt(T.sum(sc * sc, axis=1, keepdims=True))
    norm = norm * keep + (1 - keep)
    unit = sc / T.broadcast_to(norm, (m, 2))
    reset = np.zeros((m, 2), dtype=raw.dtype)
    reset[:, 1] = 1.0
    unit = unit * np.broadcast_to(keep, (m, 2)) + reset * (1 - keep)
    still = ((offsets.data[:, SIN:COS + 1] == 0).all(axis=1) & ~degenerate).astype(raw.dtype)[:, None]
    still = np.broadcast_to(still, (m, 2))
    unit = unit * (1 - still) + sc * still
    return T.concat([raw[:, :SIN], unit, raw[:, COS + 1:]], axis=1)


class Decoder(Module):
    """Learnable initial instances plus ``num_stages`` refinement stages."""

    def __init__(self, cfg: ModelConfig, num_views: int, num_scales: int, anchor_ranges,
                 rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.num_views = num_views
        self.num_scales = num_scales
        m = cfg.num_anchors
        anchors = np.zeros((m, ANCHOR_DIM))
        for axis, (lo, hi) in enumerate(anchor_ranges):
            anchors[:, axis] = rng.uniform(lo, hi, size=m)
        anchors[:, 3:6] = np.log(cfg.anchor_dims)
        anchors[:, COS] = 1.0
        self.anchors = Parameter(anchors, dtype=dtype)
        self.features = Parameter(rng.normal(0.0, 1.0, size=(m, cfg.embed_dims)), dtype=dtype)
        self.stages = [StageParams(cfg, num_views, num_scales, rng, dtype) for _ in range(cfg.num_stages)]

    def load_arrays(self, arrays: dict) -> None:
        for name, p in self.named_parameters():
            arr = arrays[name]
            if arr.shape != p.shape:
                raise ValueError(f"checkpoint entry {name} has shape {arr.shape}, expected {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def arrays(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def run_stage(self, index: int, features: Tensor, anchors: Tensor, queue: FeatureQueue,
                  detach=None) -> StageOutput:
        cfg = self.cfg
        stage = self.stages[index]
        with T.flop_tag("attention"):
            emb = anchor_embed(anchors, stage.embed, cfg.spatial_norm)
            features = self_attention(features, emb, stage, cfg.num_heads)
            features = features + emb
        with T.flop_tag("aggregation"):
            f1 = aggregate(features, anchors, queue, stage, cfg, detach)
        with T.flop_tag("depth"):
            probs = stage.depth(f1)
            conf = sample_confidence(probs, anchors, cfg.depth_min, cfg.depth_max)
            f2 = depth_reweight(f1, conf) if cfg.depth_reweight else f1
        with T.flop_tag("heads"):
            refined = apply_refinement(anchors, stage.reg(f2))
            last = index == cfg.num_stages - 1
            logits = stage.cls(f2) if (cfg.per_stage_cls or last) else None
        return StageOutput(refined, f2, logits, probs, conf, anchors)

    def forward(self, queue: FeatureQueue, detach=None, features: Tensor | None = None,
                anchors: Tensor | None = None) -> list[StageOutput]:
        """Run every stage. ``detach[t]`` severs gradients through history frame ``t``."""
        feats = self.features if features is None else features
        anchors = self.anchors if anchors is None else anchors
        outputs = []
        for i in range(self.cfg.num_stages):
            out = self.run_stage(i, feats, anchors, queue, detach)
            outputs.append(out)
            feats = out.features
            anchors = T.detach(out.anchors) if self.cfg.detach_anchors else out.anchors
        return outputs

    __call__ = forward


def aggregate(features: Tensor, anchors: Tensor, queue: FeatureQueue, stage: StageParams,
              cfg: ModelConfig, detach=None) -> Tensor:
    """Deformable 4D aggregation for all anchors, ``[M, C]``."""
    kp = build_keypoints4d(anchors, features, stage.phi, queue.clock, queue.poses,
                           ego_compensation=cfg.ego_compensation,
                           velocity_compensation=cfg.velocity_compensation)
    weights = predict_weights(features, stage.psi, kp.shape[1], queue.num_views, queue.num_scales,
                              cfg.num_groups, cfg.weight_norm)
    f, _, _ = sample_features(kp, queue)
    fp = fuse_view_scale(f, weights)
    fpp = fuse_temporal(fp, stage.psi_temp, detach)
    return fuse_keypoints(fpp)
