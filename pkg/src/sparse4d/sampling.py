"""Bilinear sampling of multi-view, multi-scale, multi-frame feature maps.

Cell centres sit at integer coordinates; a neighbour outside the map reads
as zero. Points flagged invalid (behind the camera or outside the map)
produce zero features and receive no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .geometry import SE3, FrameClock, project_points, to_feature_coords
from .tensor import Tensor

BILINEAR_FLOPS_PER_POINT = 10
BILINEAR_FLOPS_PER_CHANNEL = 7


def bilinear_sample(fmap: Tensor, u: Tensor, v: Tensor, valid: np.ndarray | None = None) -> Tensor:
    """Sample ``fmap [H, W, C]`` at cell coordinates ``u`` (column), ``v`` (row).

    Differentiable with respect to the map values and both coordinates.
    """
    if fmap.ndim != 3:
        raise DimensionError(f"feature map must be [H, W, C], got {fmap.shape}")
    if u.shape != v.shape or u.ndim != 1:
        raise DimensionError(f"coordinates must be matching 1-d tensors, got {u.shape}, {v.shape}")
    h, w, c = fmap.shape
    p = u.shape[0]
    valid = np.ones(p, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    ud = np.where(valid, u.data, 0.0)
    vd = np.where(valid, v.data, 0.0)
    x0 = np.floor(ud).astype(np.int64)
    y0 = np.floor(vd).astype(np.int64)
    fx = (ud - x0).astype(fmap.dtype)[:, None]
    fy = (vd - y0).astype(fmap.dtype)[:, None]
    m = fmap.data

    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            inside = valid & (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            xc, yc = np.clip(xi, 0, w - 1), np.clip(yi, 0, h - 1)
            val = m[yc, xc] * inside[:, None]
            corners.append((xc, yc, inside, val))
    (_, _, _, a), (_, _, _, b), (_, _, _, cc), (_, _, _, d) = corners
    wa, wb = (1 - fx) * (1 - fy), fx * (1 - fy)
    wc, wd = (1 - fx) * fy, fx * fy
    out = wa * a + wb * b + wc * cc + wd * d
    T._add_flops(p * (BILINEAR_FLOPS_PER_POINT + BILINEAR_FLOPS_PER_CHANNEL * c))

    def bw(g):
        g = g * valid[:, None]
        gmap = None
        if fmap.requires_grad:
            gmap = np.zeros_like(m)
            for (xc, yc, inside, _), wgt in zip(corners, (wa, wb, wc, wd)):
                np.add.at(gmap, (yc, xc), g * wgt * inside[:, None])
        dfx = (1 - fy) * (b - a) + fy * (d - cc)
        dfy = (1 - fx) * (cc - a) + fx * (d - b)
        gu = (g * dfx).sum(axis=1)
        gv = (g * dfy).sum(axis=1)
        return gmap, gu, gv

    return T._make(out, "bilinear", (fmap, u, v), bw)


@dataclass
class FeatureQueue:
    """Feature maps ``maps[t][n][s]`` (each ``[H, W, C]``), oldest frame first.

    ``cameras[t][n]`` maps frame-``t`` ego coordinates into camera ``n``;
    ``poses[t]`` maps current-frame ego coordinates into frame ``t``.
    """

    maps: list
    cameras: list
    poses: list[SE3]
    clock: FrameClock

    def __post_init__(self):
        self.maps = [[[m if isinstance(m, Tensor) else Tensor(m) for m in per_n] for per_n in per_t]
                     for per_t in self.maps]
        nt = len(self.clock)
        if len(self.maps) != nt or len(self.cameras) != nt or len(self.poses) != nt:
            raise ContractError("queue lists must all have one entry per timestamp")
        nn = len(self.cameras[0])
        ns = len(self.cameras[0][0].strides)
        for t in range(nt):
            if len(self.maps[t]) != nn or len(self.cameras[t]) != nn:
                raise ContractError(f"frame {t}: expected {nn} views")
            for n in range(nn):
                if len(self.maps[t][n]) != ns:
                    raise ContractError(f"frame {t} view {n}: expected {ns} scales")
                for s in range(ns):
                    shape = self.maps[t][n][s].shape
                    if shape[:2] != self.cameras[t][n].feature_shape(s) or shape[2] != self.channels:
                        raise ContractError(f"map ({t},{n},{s}) has shape {shape}")

    @property
    def num_frames(self) -> int:
        return len(self.clock)

    @property
    def num_views(self) -> int:
        return len(self.cameras[0])

    @property
    def num_scales(self) -> int:
        return len(self.cameras[0][0].strides)

    @property
    def channels(self) -> int:
        return self.maps[0][0][0].shape[2]

    def truncated(self, frames: int) -> "FeatureQueue":
        """Keep only the most recent ``frames`` timestamps."""
        clock = FrameClock(self.clock.timestamps[-frames:], self.clock.interval)
        return FeatureQueue(self.maps[-frames:], self.cameras[-frames:], self.poses[-frames:], clock)


def sample_features(keypoints: Tensor, queue: FeatureQueue):
    """Sample every keypoint in every frame, view and scale.

    ``keypoints`` is ``[M, K, T, 3]`` in per-frame ego coordinates. Returns
    ``(f, mask, valid)``: ``f`` is ``[M, K, T, N, S, C]``, ``valid`` the
    per-scale validity ``[M, K, T, N, S]`` and ``mask`` = any over scales.
    """
    if keypoints.ndim != 4 or keypoints.shape[3] != 3:
        raise DimensionError(f"keypoints must be [M, K, T, 3], got {keypoints.shape}")
    m, k, nt, _ = keypoints.shape
    if nt != queue.num_frames:
        raise ContractError(f"keypoints span {nt} frames but queue has {queue.num_frames}")
    per_t, valid_t = [], []
    for t in range(nt):
        pts = T.reshape(keypoints[:, :, t, :], (m * k, 3))
        per_n, valid_n = [], []
        for n in range(queue.num_views):
            cam = queue.cameras[t][n]
            u, v, front = project_points(pts, cam)
            per_s, valid_s = [], []
            for s in range(queue.num_scales):
                us, vs, valid = to_feature_coords(u, v, front, cam, s)
                per_s.append(bilinear_sample(queue.maps[t][n][s], us, vs, valid))
                valid_s.append(valid)
            per_n.append(T.stack(per_s, axis=1))
            valid_n.append(np.stack(valid_s, axis=1))
        per_t.append(T.stack(per_n, axis=1))
        valid_t.append(np.stack(valid_n, axis=1))
    f = T.stack(per_t, axis=1)
    c = queue.channels
    f = T.reshape(f, (m, k, nt, queue.num_views, queue.num_scales, c))
    valid = np.stack(valid_t, axis=1).reshape(m, k, nt, queue.num_views, queue.num_scales)
    return f, valid.any(axis=-1), valid
