"""Anchor boxes, rigid transforms, pinhole cameras and 4D keypoint generation.

Anchor vectors are 11 wide: ``x, y, z, ln w, ln h, ln l, sin yaw, cos yaw,
vx, vy, vz``. Extents ``w, h, l`` lie along the box's local x, y and z axes;
yaw rotates about the vertical z axis. Batched functions take anchors as a
``[M, 11]`` tensor and return keypoints with a leading ``M`` axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

X, Y, Z, LNW, LNH, LNL, SIN, COS, VX, VY, VZ = range(11)
ANCHOR_DIM = 11
NUM_FIXED_KEYPOINTS = 7
DEPTH_EPS = 1e-3  # metres; camera-frame depth at or below this is "behind"

# center, then +-x, +-y, +-z face centres of a unit box
FIXED_UNIT_OFFSETS = np.array([
    [0.0, 0.0, 0.0],
    [0.5, 0.0, 0.0], [-0.5, 0.0, 0.0],
    [0.0, 0.5, 0.0], [0.0, -0.5, 0.0],
    [0.0, 0.0, 0.5], [0.0, 0.0, -0.5],
])


@dataclass
class AnchorBox:
    x: float
    y: float
    z: float
    ln_w: float
    ln_h: float
    ln_l: float
    sin_yaw: float = 0.0
    cos_yaw: float = 1.0
    vx: float = 0.0
    vy: float = 0.0
    vz: float = 0.0

    @classmethod
    def from_box(cls, center, dims, yaw: float = 0.0, velocity=(0.0, 0.0, 0.0)) -> "AnchorBox":
        w, h, l = dims
        if min(dims) <= 0:
            raise ContractError(f"box dims must be positive, got {dims}")
        return cls(*map(float, center), math.log(w), math.log(h), math.log(l),
                   math.sin(yaw), math.cos(yaw), *map(float, velocity))

    @classmethod
    def from_vector(cls, vec) -> "AnchorBox":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (ANCHOR_DIM,):
            raise DimensionError(f"anchor vector must have 11 entries, got {vec.shape}")
        return cls(*map(float, vec))

    def to_vector(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.ln_w, self.ln_h, self.ln_l,
                         self.sin_yaw, self.cos_yaw, self.vx, self.vy, self.vz])

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def dims(self) -> np.ndarray:
        return np.exp([self.ln_w, self.ln_h, self.ln_l])

    @property
    def yaw(self) -> float:
        return math.atan2(self.sin_yaw, self.cos_yaw)

    @property
    def velocity(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.vz])


def yaw_matrix(sin_yaw: float, cos_yaw: float) -> np.ndarray:
    return np.array([[cos_yaw, -sin_yaw, 0.0], [sin_yaw, cos_yaw, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class SE3:
    """Rigid transform ``p -> rotation @ p + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        r = self.rotation
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ContractError("SE3 rotation must be orthonormal with det 1")

    @classmethod
    def identity(cls) -> "SE3":
        return cls()

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "SE3":
        return cls(yaw_matrix(math.sin(yaw), math.cos(yaw)), translation)

    @classmethod
    def from_matrix(cls, mat) -> "SE3":
        mat = np.asarray(mat, dtype=np.float64)
        return cls(mat[:3, :3], mat[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "SE3":
        rt = self.rotation.T
        return SE3(rt, -rt @ self.translation)

    def compose(self, other: "SE3") -> "SE3":
        """``self ∘ other``: apply ``other`` first."""
        return SE3(self.rotation @ other.rotation,
                   self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation


@dataclass
class CameraModel:
    """Pinhole camera. ``extrinsic`` maps ego coordinates to camera coordinates
    (x right, y down, z forward)."""

    intrinsics: np.ndarray
    extrinsic: SE3
    image_size: tuple[int, int]  # (width, height) pixels
    strides: tuple[int, ...] = (4, 8, 16, 32)

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.image_size = tuple(int(v) for v in self.image_size)
        self.strides = tuple(int(s) for s in self.strides)
        k = self.intrinsics
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ContractError("focal lengths must be positive")
        if any(s <= 0 for s in self.strides) or list(self.strides) != sorted(set(self.strides)):
            raise ContractError(f"strides must be positive and increasing, got {self.strides}")

    def feature_shape(self, scale: int) -> tuple[int, int]:
        """(H, W) of the feature map at ``scale``; cell ``j`` sits on pixel ``j*stride``."""
        stride = self.strides[scale]
        w, h = self.image_size
        return (h - 1) // stride + 1, (w - 1) // stride + 1

    @property
    def center(self) -> np.ndarray:
        """Camera position in ego coordinates."""
        return self.extrinsic.inverse().translation


@dataclass
class FrameClock:
    """Absolute timestamps (seconds), oldest first; the last is the current frame."""

    timestamps: tuple[float, ...]
    interval: float = 0.5

    def __post_init__(self):
        self.timestamps = tuple(float(t) for t in self.timestamps)
        if not self.timestamps:
            raise ContractError("clock needs at least one timestamp")
        if any(b <= a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise ContractError("timestamps must be strictly increasing")
        if self.interval <= 0:
            raise ContractError("frame interval must be positive")

    def __len__(self) -> int:
        return len(self.timestamps)

    def elapsed(self, t_index: int) -> float:
        """Seconds between frame ``t_index`` and the current frame."""
        return self.timestamps[-1] - self.timestamps[t_index]


# ---------------------------------------------------------------------------
# differentiable keypoint construction

def _split_anchor(anchors: Tensor):
    if anchors.ndim != 2 or anchors.shape[1] != ANCHOR_DIM:
        raise DimensionError(f"anchors must be [M, 11], got {anchors.shape}")
    center = anchors[:, X:Z + 1]
    dims = T.exp(anchors[:, LNW:LNL + 1])
    return center, dims, anchors[:, SIN], anchors[:, COS]


def _expand_rows(x: Tensor, count: int) -> Tensor:
    """[M, 3] -> [M, count, 3]"""
    m = x.shape[0]
    return T.broadcast_to(T.reshape(x, (m, 1, x.shape[1])), (m, count, x.shape[1]))


def rotate_yaw(points: Tensor, sin_yaw: Tensor, cos_yaw: Tensor) -> Tensor:
    """Rotate ``[M, P, 3]`` points about z by each row's yaw."""
    m, p, _ = points.shape
    s = T.broadcast_to(T.reshape(sin_yaw, (m, 1)), (m, p))
    c = T.broadcast_to(T.reshape(cos_yaw, (m, 1)), (m, p))
    px, py, pz = points[:, :, 0], points[:, :, 1], points[:, :, 2]
    rx = c * px - s * py
    ry = s * px + c * py
    return T.stack([rx, ry, pz], axis=2)


def fixed_keypoints(anchors: Tensor) -> Tensor:
    """Box center and the six face centers, ``[M, 7, 3]``."""
    center, dims, s, c = _split_anchor(anchors)
    m = anchors.shape[0]
    k = NUM_FIXED_KEYPOINTS
    local = T.mul(np.broadcast_to(FIXED_UNIT_OFFSETS, (m, k, 3)), _expand_rows(dims, k))
    return rotate_yaw(local, s, c) + _expand_rows(center, k)


def keypoints_from_offsets(anchors: Tensor, raw: Tensor) -> Tensor:
    """Learnable keypoints from raw sub-network outputs ``[M, 3*K_L]``.

    The unit-cube offset is rotated by yaw first and then scaled axis-wise by
    (w, h, l), in that order.
    """
    center, dims, s, c = _split_anchor(anchors)
    m = anchors.shape[0]
    if raw.ndim != 2 or raw.shape[0] != m or raw.shape[1] % 3:
        raise DimensionError(f"offset logits must be [M, 3*K_L], got {raw.shape}")
    kl = raw.shape[1] // 3
    unit = T.shift(T.sigmoid(T.reshape(raw, (m, kl, 3))), -0.5)
    return rotate_yaw(unit, s, c) * _expand_rows(dims, kl) + _expand_rows(center, kl)


def learnable_keypoints(anchors: Tensor, features: Tensor, phi) -> Tensor:
    """``phi`` maps ``[M, C]`` features (anchor embedding already added) to ``[M, 3*K_L]``."""
    return keypoints_from_offsets(anchors, phi(features))


def temporal_propagate(points: Tensor, velocity: Tensor, elapsed: float) -> Tensor:
    """Shift ``[M, K, 3]`` points back in time under constant velocity ``[M, 3]``."""
    if elapsed == 0.0:
        return points
    return points - T.scale(_expand_rows(velocity, points.shape[1]), elapsed)


def ego_transform(points: Tensor, pose: SE3) -> Tensor:
    """Map ``[..., 3]`` points by ``pose``."""
    lead = points.shape[:-1]
    flat = T.reshape(points, (-1, 3))
    rot = T.Tensor(pose.rotation.T.astype(points.dtype))
    out = T.matmul(flat, rot) + np.asarray(pose.translation, dtype=points.dtype)
    return T.reshape(out, lead + (3,))


def build_keypoints4d(anchors: Tensor, features: Tensor | None, phi, clock: FrameClock,
                      poses: list[SE3], *, ego_compensation: bool = True,
                      velocity_compensation: bool = True) -> Tensor:
    """All keypoints in every frame's own ego coordinates, ``[M, K, T, 3]``.

    ``poses[t]`` maps current-frame ego coordinates to frame ``t``; the last
    pose must be the identity. ``phi=None`` drops the learnable keypoints.
    """
    if len(poses) != len(clock):
        raise ContractError(f"{len(poses)} ego poses for {len(clock)} timestamps")
    last = poses[-1]
    if np.abs(last.rotation - np.eye(3)).max() > 1e-9 or np.abs(last.translation).max() > 1e-9:
        raise ContractError("current-frame ego pose must be identity")
    pts = fixed_keypoints(anchors)
    if phi is not None:
        pts = T.concat([pts, learnable_keypoints(anchors, features, phi)], axis=1)
    velocity = anchors[:, VX:VZ + 1]
    frames = []
    for t in range(len(clock) - 1):
        p = pts
        if velocity_compensation:
            p = temporal_propagate(p, velocity, clock.elapsed(t))
        if ego_compensation:
            p = ego_transform(p, poses[t])
        frames.append(p)
    frames.append(pts)
    return T.stack(frames, axis=2)


# ---------------------------------------------------------------------------
# projection

def project_points(points: Tensor, camera: CameraModel):
    """Project ``[P, 3]`` ego points to pixels.

    Returns ``(u, v, in_front)`` with ``u, v`` tensors in pixels and
    ``in_front`` a boolean mask; behind-camera entries carry finite dummy
    coordinates and no gradient.
    """
    rot = T.Tensor(camera.extrinsic.rotation.T.astype(points.dtype))
    q = T.matmul(points, rot) + np.asarray(camera.extrinsic.translation, dtype=points.dtype)
    qx, qy, qz = q[:, 0], q[:, 1], q[:, 2]
    in_front = qz.data > DEPTH_EPS
    mask = in_front.astype(points.dtype)
    z = qz * mask + (1.0 - mask)
    k = camera.intrinsics
    xn = qx / z
    yn = qy / z
    u = T.shift(T.scale(xn, k[0, 0]) + T.scale(yn, k[0, 1]), k[0, 2])
    v = T.shift(T.scale(yn, k[1, 1]), k[1, 2])
    return u * mask, v * mask, in_front


def to_feature_coords(u: Tensor, v: Tensor, in_front: np.ndarray, camera: CameraModel, scale: int):
    """Pixel coordinates to cell coordinates of one scale plus per-scale validity."""
    stride = camera.strides[scale]
    h, w = camera.feature_shape(scale)
    us = T.scale(u, 1.0 / stride)
    vs = T.scale(v, 1.0 / stride)
    valid = in_front & (us.data >= 0) & (us.data <= w - 1) & (vs.data >= 0) & (vs.data <= h - 1)
    return us, vs, valid


def project_point(point, camera: CameraModel, scale: int = 0) -> tuple[float, float, bool]:
    """Single-point convenience wrapper returning feature-map coordinates."""
    p = T.Tensor(np.asarray(point, dtype=np.float64).reshape(1, 3))
    with T.no_grad():
        u, v, front = project_points(p, camera)
        us, vs, valid = to_feature_coords(u, v, front, camera, scale)
    return float(us.data[0]), float(vs.data[0]), bool(valid[0])
