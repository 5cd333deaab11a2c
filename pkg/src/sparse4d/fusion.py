"""Hierarchical fusion of sampled features and the depth reweight.

Fusion order per anchor: view/scale (group weighted), then time (sequential
fold from the oldest frame), then keypoints (sum). The fused instance
feature is finally scaled by the depth confidence of the anchor's radial
distance under a predicted discrete depth distribution.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .geometry import X, Y
from .tensor import Linear, Module, Tensor

INTERP_FLOPS_PER_ROW = 6


def predict_weights(features: Tensor, psi: Linear, num_keypoints: int, num_views: int,
                    num_scales: int, num_groups: int, mode: str = "softmax") -> Tensor:
    """Group weights ``[M, K, N, S, G]`` from features ``[M, C]``.

    ``softmax`` normalizes over the flattened (view, scale) axis per
    (keypoint, group); ``sigmoid`` squashes each weight independently.
    """
    m, c = features.shape
    if c % num_groups:
        raise ConfigError("model.num_groups", f"channels {c} not divisible by {num_groups} groups")
    k, n, s, g = num_keypoints, num_views, num_scales, num_groups
    logits = T.reshape(psi(features), (m, k, n * s, g))
    if mode == "softmax":
        w = T.softmax(logits, axis=2)
    elif mode == "sigmoid":
        w = T.sigmoid(logits)
    else:
        raise ConfigError("model.weight_norm", f"unknown mode {mode!r}")
    return T.reshape(w, (m, k, n, s, g))


def fuse_view_scale(f: Tensor, weights: Tensor) -> Tensor:
    """``[M, K, T, N, S, C]`` x ``[M, K, N, S, G]`` -> ``[M, K, T, C]``.

    Group ``i`` covers channels ``[i*C/G, (i+1)*C/G)``; weights are shared
    across timestamps.
    """
    m, k, nt, n, s, c = f.shape
    if weights.shape[:4] != (m, k, n, s):
        raise DimensionError(f"weights {weights.shape} do not match features {f.shape}")
    g = weights.shape[4]
    if c % g:
        raise DimensionError(f"{c} channels not divisible into {g} groups")
    fg = T.reshape(f, (m, k, nt, n, s, g, c // g))
    wb = T.broadcast_to(T.reshape(weights, (m, k, 1, n, s, g, 1)), fg.shape)
    fused = T.sum(fg * wb, axis=(3, 4))
    return T.reshape(fused, (m, k, nt, c))


class MLP(Module):
    """Linear -> relu -> Linear."""

    def __init__(self, cin: int, hidden: int, cout: int, rng, dtype, final_scale: float = 1.0,
                 final_bias: float = 0.0):
        self.fc1 = Linear(cin, hidden, rng, dtype)
        self.fc2 = Linear(hidden, cout, rng, dtype, init_scale=final_scale, bias_init=final_bias)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


def fuse_temporal(fp: Tensor, psi_temp: Linear, detach: Sequence[bool] | None = None) -> Tensor:
    """Fold ``[M, K, T, C]`` from the oldest frame forward: ``h <- psi_temp([f_t, h])``.

    ``detach[t]`` severs gradient flow through history frame ``t``'s input.
    With one frame the input slice is returned untouched.
    """
    m, k, nt, c = fp.shape
    if tuple(psi_temp.weight.shape) != (2 * c, c):
        raise DimensionError(f"temporal layer must map {2 * c} -> {c}, has {psi_temp.weight.shape}")
    detach = detach or [False] * nt

    def frame(t):
        x = fp[:, :, t, :]
        return T.detach(x) if detach[t] and t < nt - 1 else x

    h = frame(0)
    for t in range(1, nt):
        h = psi_temp(T.concat([frame(t), h], axis=2))
    return h


def fuse_keypoints(fpp: Tensor) -> Tensor:
    """Sum ``[M, K, C]`` over keypoints."""
    return T.sum(fpp, axis=1)


class DepthNet(Module):
    """Residual MLP blocks followed by a D-way softmax head."""

    def __init__(self, channels: int, bins: int, blocks: int, rng: np.random.Generator, dtype=np.float32):
        self.blocks = [(Linear(channels, channels, rng, dtype), Linear(channels, channels, rng, dtype, 0.5))
                       for _ in range(blocks)]
        self.head = Linear(channels, bins, rng, dtype)

    def named_parameters(self, prefix: str = ""):
        for i, (a, b) in enumerate(self.blocks):
            yield from a.named_parameters(f"{prefix}blocks.{i}.0.")
            yield from b.named_parameters(f"{prefix}blocks.{i}.1.")
        yield from self.head.named_parameters(prefix + "head.")

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for a, b in self.blocks:
            h = h + b(T.relu(a(h)))
        return T.softmax(self.head(h), axis=1)


def bin_centers(d_min: float, d_max: float, bins: int) -> np.ndarray:
    if not d_min < d_max or bins < 2:
        raise ConfigError("model.depth", f"need d_min < d_max and >= 2 bins, got {d_min}, {d_max}, {bins}")
    return np.linspace(d_min, d_max, bins)


def interp_rows(values: Tensor, pos: Tensor) -> Tensor:
    """Linear interpolation of each row of ``values [M, D]`` at fractional index ``pos [M]``.

    Positions are clamped to ``[0, D-1]``; clamped positions get no gradient.
    """
    m, d = values.shape
    if pos.shape != (m,):
        raise DimensionError(f"positions {pos.shape} do not match {m} rows")
    raw = pos.data
    p = np.clip(raw, 0, d - 1)
    inside = (raw > 0) & (raw < d - 1)
    j = np.minimum(np.floor(p).astype(np.int64), d - 2)
    frac = (p - j).astype(values.dtype)
    rows = np.arange(m)
    lo, hi = values.data[rows, j], values.data[rows, j + 1]
    out = (1 - frac) * lo + frac * hi
    T._add_flops(m * INTERP_FLOPS_PER_ROW)

    def bw(g):
        gv = np.zeros_like(values.data)
        gv[rows, j] += g * (1 - frac)
        gv[rows, j + 1] += g * frac
        gp = np.where(inside, g * (hi - lo), 0).astype(values.dtype)
        return gv, gp

    return T._make(out, "interp", (values, pos), bw)


def radial_distance(anchors: Tensor) -> Tensor:
    x, y = anchors[:, X], anchors[:, Y]
    return T.sqrt(x * x + y * y)


def sample_confidence(probs: Tensor, anchors: Tensor, d_min: float, d_max: float) -> Tensor:
    """Depth confidence ``[M]`` at each anchor's ground-plane distance from the origin."""
    bins = probs.shape[1]
    step = (d_max - d_min) / (bins - 1)
    pos = T.scale(T.shift(radial_distance(anchors), -d_min), 1.0 / step)
    return interp_rows(probs, pos)


def depth_reweight(features: Tensor, confidence: Tensor) -> Tensor:
    m, c = features.shape
    return features * T.broadcast_to(T.reshape(confidence, (m, 1)), (m, c))


def depth_target(r: np.ndarray, d_min: float, d_max: float, bins: int) -> np.ndarray:
    """Two-bin linear-interpolation one-hot at distances ``r``, shape ``[len(r), D]``."""
    r = np.atleast_1d(np.asarray(r, dtype=np.float64))
    step = (d_max - d_min) / (bins - 1)
    p = np.clip((r - d_min) / step, 0, bins - 1)
    j = np.minimum(np.floor(p).astype(np.int64), bins - 2)
    frac = p - j
    out = np.zeros((r.size, bins))
    rows = np.arange(r.size)
    out[rows, j] = 1 - frac
    out[rows, j + 1] += frac
    return out
