"""Optimization loop: synthetic scenes -> decoder -> loss -> AdamW."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import checkpoint
from .. import tensor as T
from ..config import RunConfig, from_dict
from ..decoder import Decoder
from ..errors import NumericalError
from .losses import Targets, total_loss
from .scene import generate_scene, render_feature_maps

log = logging.getLogger(__name__)

# training scene seeds live above this; evaluation seeds stay below
TRAIN_SEED_BASE = 2 ** 32


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if lr == 0:
                continue
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data * (1 - lr * self.wd) - lr * update).astype(p.dtype)


def cosine_lr(step: int, total: int, base: float, warmup: int = 0, min_ratio: float = 0.0) -> float:
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    span = max(1, total - warmup)
    frac = min(1.0, (step - warmup) / span)
    return base * (min_ratio + (1 - min_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))


def build_decoder(cfg: RunConfig, rng: np.random.Generator, dtype=np.float32) -> Decoder:
    sc = cfg.scene
    ranges = (sc.x_range, sc.y_range, sc.z_range)
    return Decoder(cfg.model, cfg.camera.num_cameras, len(cfg.camera.strides), ranges, rng, dtype)


def clip_gradients(params, max_norm: float) -> float:
    norm = math.sqrt(float(sum(np.sum(p.grad.astype(np.float64) ** 2) for p in params)))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.grad = (p.grad * scale).astype(p.dtype)
    return norm


@dataclass
class TrainResult:
    decoder: Decoder
    records: list[dict] = field(default_factory=list)
    checkpoint_path: Path | None = None
    log_path: Path | None = None


def train(cfg: RunConfig, seed: int | None = None, out_dir=None, write: bool = True,
          steps: int | None = None) -> TrainResult:
    """Train from scratch; writes ``checkpoint.bin`` and ``metrics.jsonl`` under ``out_dir``."""
    seed = cfg.seed if seed is None else seed
    steps = cfg.train.steps if steps is None else steps
    rng = np.random.default_rng(seed)
    decoder = build_decoder(cfg, rng)
    params = decoder.parameters()
    tc = cfg.train
    opt = AdamW(params, tc.betas, tc.eps, tc.weight_decay)
    out = Path(out_dir or cfg.out_dir)
    result = TrainResult(decoder)
    log_file = None
    if write:
        out.mkdir(parents=True, exist_ok=True)
        result.log_path = out / "metrics.jsonl"
        log_file = result.log_path.open("w")
    history = cfg.scene.num_frames - 1
    try:
        for step in range(steps):
            lr = cosine_lr(step, steps, tc.lr, tc.warmup_steps, tc.min_lr_ratio)
            decoder.zero_grad()
            scene_seeds = [int(s) for s in rng.integers(TRAIN_SEED_BASE, 2 * TRAIN_SEED_BASE, size=tc.batch_size)]
            detach = [bool(d) for d in rng.random(history) < tc.detach_prob] + [False]
            totals = {"cls": 0.0, "box": 0.0, "depth": 0.0, "total": 0.0}
            for s in scene_seeds:
                scene = generate_scene(cfg, s)
                queue = render_feature_maps(scene, cfg)
                outputs = decoder(queue, detach=detach)
                loss = total_loss(outputs, Targets.from_scene(scene), cfg.model, cfg.loss)
                if not math.isfinite(loss.total):
                    raise NumericalError(f"non-finite loss at step {step}")
                T.backward(T.scale(loss.tensor, 1.0 / tc.batch_size))
                for k in totals:
                    totals[k] += getattr(loss, k) / tc.batch_size
            grad_norm = clip_gradients(params, tc.grad_clip)
            if not math.isfinite(grad_norm):
                raise NumericalError(f"non-finite gradient norm at step {step}")
            opt.step(lr)
            record = {"step": step, "seed": seed, "lr": lr, "grad_norm": grad_norm,
                      "scene_seeds": scene_seeds, **totals}
            result.records.append(record)
            if log_file and step % tc.log_every == 0:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
            if step % 100 == 0:
                log.info("step %d loss %.4f (cls %.4f box %.4f depth %.4f)", step, totals["total"],
                         totals["cls"], totals["box"], totals["depth"])
    except NumericalError as exc:
        if write:
            dump = {"error": str(exc), "step": step, "seed": seed, "scene_seeds": scene_seeds,
                    "last_records": result.records[-5:]}
            (out / "failure_dump.json").write_text(json.dumps(dump, indent=1, sort_keys=True))
        raise
    finally:
        if log_file:
            log_file.close()
    if write:
        result.checkpoint_path = out / "checkpoint.bin"
        save_checkpoint(result.checkpoint_path, decoder, cfg, seed, steps)
    return result


def save_checkpoint(path, decoder: Decoder, cfg: RunConfig, seed: int, steps: int) -> None:
    meta = {"seed": seed, "steps": steps, "config": cfg.to_dict()}
    checkpoint.save(path, decoder.arrays(), meta)


def load_checkpoint(path) -> tuple[Decoder, RunConfig, dict]:
    arrays, meta = checkpoint.load(path)
    cfg = from_dict(meta["config"])
    decoder = build_decoder(cfg, np.random.default_rng(0))
    decoder.load_arrays(arrays)
    return decoder, cfg, meta
