"""Synthetic multi-camera scenes and their oracle feature maps.

A scene is a set of moving oriented boxes seen by a ring of pinhole cameras
over ``T`` frames. Coordinates are expressed in the current (last) frame's
ego frame; ``ego_poses[t]`` maps frame-``t`` ego coordinates into it, so the
last pose is the identity.

Rendered channels, per feature-map cell (the cell-centre ray):

* direction: ``sin/cos(f*azimuth)``, ``sin/cos(f*elevation)`` of the ray in
  the frame's ego coordinates, for each frequency ``f``;
* depth: ``sin/cos(2*pi*d/lambda)`` of the distance ``d`` to the nearest box
  surface along the ray (``sentinel_depth`` on a miss);
* signature: the hit box's signature vector, zeros on a miss.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..config import RunConfig
from ..errors import ConfigError
from ..geometry import SE3, CameraModel, FrameClock, yaw_matrix
from ..sampling import FeatureQueue

MAX_PLACEMENT_TRIES = 1000
MAX_LAYOUTS = 20


@dataclass
class GTBox:
    center: np.ndarray
    dims: np.ndarray      # (w, h, l) along local x, y, z
    yaw: float
    velocity: np.ndarray  # m/s, current ego frame
    class_id: int
    signature: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.center, np.log(self.dims),
                               [math.sin(self.yaw), math.cos(self.yaw)], self.velocity])

    def rotation(self) -> np.ndarray:
        return yaw_matrix(math.sin(self.yaw), math.cos(self.yaw))


@dataclass
class Scene:
    seed: int
    boxes: list[GTBox]
    cameras: list[CameraModel]
    ego_poses: list[SE3]
    clock: FrameClock

    def gt_vectors(self) -> np.ndarray:
        return np.array([b.to_vector() for b in self.boxes]).reshape(-1, 11)

    def gt_classes(self) -> np.ndarray:
        return np.array([b.class_id for b in self.boxes], dtype=np.int64)

    def current_to_frame(self, t: int) -> SE3:
        """Transform from current-frame ego coordinates to frame ``t``."""
        return self.ego_poses[t].inverse()

    def to_json(self) -> str:
        return json.dumps(scene_to_dict(self), sort_keys=True, indent=1)


def camera_rig(cfg: RunConfig) -> list[CameraModel]:
    """Outward-facing ring of identical pinhole cameras."""
    cam = cfg.camera
    w, h = cam.image_size
    f = (w / 2) / math.tan(math.radians(cam.fov_deg) / 2)
    k = np.array([[f, 0, (w - 1) / 2], [0, f, (h - 1) / 2], [0, 0, 1]])
    rig = []
    for n in range(cam.num_cameras):
        psi = 2 * math.pi * n / cam.num_cameras
        forward = np.array([math.cos(psi), math.sin(psi), 0.0])
        right = np.array([math.sin(psi), -math.cos(psi), 0.0])
        down = np.array([0.0, 0.0, -1.0])
        rot = np.stack([right, down, forward])
        pos = np.array([cam.mount_radius * math.cos(psi), cam.mount_radius * math.sin(psi), cam.mount_height])
        rig.append(CameraModel(k, SE3(rot, -rot @ pos), (w, h), tuple(cam.strides)))
    return rig


def _visible(point: np.ndarray, rig: list[CameraModel]) -> bool:
    for cam in rig:
        q = cam.extrinsic.apply(point)
        if q[2] <= 1.0:
            continue
        u, v, _ = cam.intrinsics @ (q / q[2])
        w, h = cam.image_size
        if 0 <= u <= w - 1 and 0 <= v <= h - 1:
            return True
    return False


def class_prototypes(cfg: RunConfig) -> np.ndarray:
    sig = cfg.render.signature_channels(cfg.model.embed_dims)
    rng = np.random.default_rng(cfg.render.signature_seed)
    protos = rng.normal(size=(cfg.model.num_classes, sig))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True) * math.sqrt(sig) * 0.5


def generate_scene(cfg: RunConfig, seed: int) -> Scene:
    sc = cfg.scene
    # separate streams so the boxes of a seed do not depend on the frame count
    ego_rng, rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    rig = camera_rig(cfg)

    intervals = ego_rng.choice([sc.frame_interval, 2 * sc.frame_interval], size=sc.num_frames - 1)
    stamps = np.concatenate([[0.0], np.cumsum(intervals)])
    clock = FrameClock(tuple(stamps), sc.frame_interval)

    speed = ego_rng.uniform(*sc.ego_speed_range)
    yaw_rate = ego_rng.uniform(*sc.ego_yaw_rate_range)
    poses = []
    for tau in stamps:
        dt = tau - stamps[-1]
        yaw = yaw_rate * dt
        half = yaw / 2
        poses.append(SE3.from_yaw(yaw, (speed * dt * math.cos(half), speed * dt * math.sin(half), 0.0)))

    protos = class_prototypes(cfg)
    count = int(rng.integers(sc.box_count[0], sc.box_count[1] + 1))
    boxes: list[GTBox] = []
    tries = layouts = 0
    while len(boxes) < count:
        tries += 1
        if tries > MAX_PLACEMENT_TRIES:
            # early boxes can leave no room for the rest; start the layout over
            layouts += 1
            if layouts >= MAX_LAYOUTS:
                raise ConfigError("scene.box_count", f"could not place {count} boxes in the configured range")
            boxes, tries = [], 0
        cls = int(rng.integers(len(sc.class_dims)))
        dims = np.asarray(sc.class_dims[cls]) * (1 + rng.uniform(-sc.dims_jitter, sc.dims_jitter, size=3))
        center = np.array([rng.uniform(*sc.x_range), rng.uniform(*sc.y_range), rng.uniform(*sc.z_range)])
        yaw = float(rng.uniform(-math.pi, math.pi))
        v = rng.uniform(*sc.speed_range)
        heading = rng.uniform(-math.pi, math.pi)
        velocity = np.array([v * math.cos(heading), v * math.sin(heading), 0.0])
        sig = protos[cls] + sc.signature_noise * rng.normal(size=protos.shape[1])
        if math.hypot(center[0], center[1]) < sc.min_distance + np.linalg.norm(dims[:2]) / 2:
            continue
        if not _visible(center, rig):
            continue
        radius = np.linalg.norm(dims[:2]) / 2
        if any(np.linalg.norm(center[:2] - b.center[:2]) < radius + np.linalg.norm(b.dims[:2]) / 2
               for b in boxes):
            continue
        boxes.append(GTBox(center, dims, yaw, velocity, cls, sig))
    return Scene(seed, boxes, rig, poses, clock)


# ---------------------------------------------------------------------------
# rendering

def boxes_at_frame(scene: Scene, t: int):
    """Box centres and rotations expressed in frame ``t``'s ego coordinates."""
    pose = scene.current_to_frame(t)
    elapsed = scene.clock.elapsed(t)
    centers, rots = [], []
    for b in scene.boxes:
        centers.append(pose.apply(b.center - elapsed * b.velocity))
        rots.append(pose.rotation @ b.rotation())
    return np.array(centers).reshape(-1, 3), np.array(rots).reshape(-1, 3, 3)


def ray_box_distance(origin: np.ndarray, dirs: np.ndarray, centers: np.ndarray, rots: np.ndarray,
                     dims: np.ndarray):
    """Distance along unit rays ``dirs [R, 3]`` to each oriented box, ``inf`` on a miss.

    Returns ``[R, B]``. Rays starting inside a box report a miss for it.
    """
    if len(centers) == 0:
        return np.full((len(dirs), 0), np.inf)
    # box-local ray: rotate into each box frame
    o_local = np.einsum("bji,bj->bi", rots, origin[None] - centers)          # [B, 3]
    d_local = np.einsum("bji,rj->rbi", rots, dirs)                           # [R, B, 3]
    half = dims[None] / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d_local
        t1 = (-half - o_local[None]) * inv
        t2 = (half - o_local[None]) * inv
    near, far = np.fmin(t1, t2), np.fmax(t1, t2)
    lo = np.where(np.isnan(near), -np.inf, near).max(axis=2)
    hi = np.where(np.isnan(far), np.inf, far).min(axis=2)
    hit = (hi >= lo) & (lo > 0)
    return np.where(hit, lo, np.inf)


def cell_rays(camera: CameraModel, scale: int):
    """Unit ray directions (ego frame) through every cell centre, ``[H, W, 3]``."""
    h, w = camera.feature_shape(scale)
    stride = camera.strides[scale]
    jj, ii = np.meshgrid(np.arange(w) * stride, np.arange(h) * stride)
    pix = np.stack([jj, ii, np.ones_like(jj)], axis=-1).astype(np.float64)
    cam_dirs = pix @ np.linalg.inv(camera.intrinsics).T
    ego_dirs = cam_dirs @ camera.extrinsic.rotation
    return ego_dirs / np.linalg.norm(ego_dirs, axis=-1, keepdims=True)


def encode(dirs: np.ndarray, depth: np.ndarray, signature: np.ndarray, cfg: RunConfig) -> np.ndarray:
    r = cfg.render
    az = np.arctan2(dirs[..., 1], dirs[..., 0])
    el = np.arcsin(np.clip(dirs[..., 2], -1, 1))
    chans = []
    for f in r.direction_freqs:
        chans += [np.sin(f * az), np.cos(f * az), np.sin(f * el), np.cos(f * el)]
    for lam in r.depth_wavelengths:
        chans += [np.sin(2 * math.pi * depth / lam), np.cos(2 * math.pi * depth / lam)]
    return np.concatenate([np.stack(chans, axis=-1), signature], axis=-1)


def render_feature_maps(scene: Scene, cfg: RunConfig, dtype=np.float32) -> FeatureQueue:
    sig_dims = cfg.render.signature_channels(cfg.model.embed_dims)
    sigs = np.array([b.signature for b in scene.boxes]).reshape(-1, sig_dims)
    dims = np.array([b.dims for b in scene.boxes]).reshape(-1, 3)
    maps = []
    for t in range(len(scene.clock)):
        centers, rots = boxes_at_frame(scene, t)
        per_n = []
        for cam in scene.cameras:
            origin = cam.center
            per_s = []
            for s in range(len(cam.strides)):
                dirs = cell_rays(cam, s)
                hgt, wid = dirs.shape[:2]
                dist = ray_box_distance(origin, dirs.reshape(-1, 3), centers, rots, dims)
                if dist.shape[1]:
                    nearest = dist.argmin(axis=1)
                    d = dist[np.arange(len(dist)), nearest]
                else:
                    nearest = np.zeros(len(dist), dtype=np.int64)
                    d = np.full(len(dist), np.inf)
                hit = np.isfinite(d)
                depth = np.where(hit, d, cfg.render.sentinel_depth)
                sig = np.zeros((len(d), sig_dims))
                if hit.any():
                    sig[hit] = sigs[nearest[hit]]
                fmap = encode(dirs.reshape(-1, 3), depth, sig, cfg).reshape(hgt, wid, -1)
                per_s.append(fmap.astype(dtype))
            per_n.append(per_s)
        maps.append(per_n)
    cameras = [list(scene.cameras) for _ in range(len(scene.clock))]
    poses = [scene.current_to_frame(t) for t in range(len(scene.clock))]
    return FeatureQueue(maps, cameras, poses, scene.clock)


# ---------------------------------------------------------------------------
# scene files

def _se3_dict(p: SE3) -> dict:
    return {"rotation": p.rotation.tolist(), "translation": p.translation.tolist()}


def scene_to_dict(scene: Scene) -> dict:
    return {
        "seed": int(scene.seed),
        "clock": {"timestamps": list(scene.clock.timestamps), "interval": scene.clock.interval},
        "cameras": [{
            "intrinsics": c.intrinsics.tolist(),
            "extrinsic": _se3_dict(c.extrinsic),
            "image_size": list(c.image_size),
            "strides": list(c.strides),
        } for c in scene.cameras],
        "ego_poses": [_se3_dict(p) for p in scene.ego_poses],
        "boxes": [{
            "center": b.center.tolist(),
            "dims": b.dims.tolist(),
            "yaw": float(b.yaw),
            "velocity": b.velocity.tolist(),
            "class_id": int(b.class_id),
            "signature": b.signature.tolist(),
        } for b in scene.boxes],
    }


def scene_from_dict(d: dict) -> Scene:
    cams = [CameraModel(np.array(c["intrinsics"]), SE3(**{k: np.array(v) for k, v in c["extrinsic"].items()}),
                        tuple(c["image_size"]), tuple(c["strides"])) for c in d["cameras"]]
    poses = [SE3(np.array(p["rotation"]), np.array(p["translation"])) for p in d["ego_poses"]]
    boxes = [GTBox(np.array(b["center"]), np.array(b["dims"]), float(b["yaw"]), np.array(b["velocity"]),
                   int(b["class_id"]), np.array(b["signature"])) for b in d["boxes"]]
    clock = FrameClock(tuple(d["clock"]["timestamps"]), d["clock"]["interval"])
    return Scene(int(d["seed"]), boxes, cams, poses, clock)


def save_scene(scene: Scene, path, queue: FeatureQueue | None = None) -> None:
    """Write the scene JSON; with ``queue``, also a raw ``<f4`` feature cache next to it."""
    path = Path(path)
    d = scene_to_dict(scene)
    if queue is not None:
        cache = path.with_suffix(".f32")
        chunks, shapes = [], []
        for per_n in queue.maps:
            for per_s in per_n:
                for m in per_s:
                    chunks.append(np.ascontiguousarray(m.data, dtype="<f4").tobytes())
                    shapes.append(list(m.shape))
        cache.write_bytes(b"".join(chunks))
        d["feature_cache"] = {"path": cache.name, "dtype": "<f4", "order": "t,n,s", "shapes": shapes}
    path.write_text(json.dumps(d, sort_keys=True, indent=1))


def load_scene(path) -> tuple[Scene, dict]:
    """Read a scene file; returns the scene and the raw dict (for cache lookups)."""
    d = json.loads(Path(path).read_text())
    return scene_from_dict(d), d


def load_cached_queue(path, raw: dict, scene: Scene) -> FeatureQueue | None:
    info = raw.get("feature_cache")
    if not info:
        return None
    blob = np.frombuffer((Path(path).parent / info["path"]).read_bytes(), dtype="<f4")
    it = iter(info["shapes"])
    offset = 0
    maps = []
    nt, nn, ns = len(scene.clock), len(scene.cameras), len(scene.cameras[0].strides)
    for _ in range(nt):
        per_n = []
        for _ in range(nn):
            per_s = []
            for _ in range(ns):
                shape = tuple(next(it))
                count = int(np.prod(shape))
                per_s.append(blob[offset:offset + count].reshape(shape).astype(np.float32))
                offset += count
            per_n.append(per_s)
        maps.append(per_n)
    cameras = [list(scene.cameras) for _ in range(nt)]
    poses = [scene.current_to_frame(t) for t in range(nt)]
    return FeatureQueue(maps, cameras, poses, scene.clock)
