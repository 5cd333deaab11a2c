"""Finite-difference checks for every differentiable op and the composed chains.

All checks run in float64. Random inputs are kept away from the kinks of
piecewise ops (relu/abs at zero, integer cell coordinates, depth bin centres)
so central differences see a smooth function.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .config import LossConfig, ModelConfig
from .decoder import Decoder, apply_refinement
from .flops import AggregationShape, random_queue
from .fusion import (depth_reweight, fuse_keypoints, fuse_temporal, fuse_view_scale, interp_rows,
                     predict_weights, sample_confidence)
from .geometry import SE3, FrameClock, build_keypoints4d, project_points
from .sampling import bilinear_sample, sample_features
from .tensor import Linear, Tensor
from .training.losses import Targets, bce, box_l1_loss, focal_loss, hungarian_match, log_sigmoid, total_loss

F64 = np.float64
# 80-bit on x86-64 Linux; the full decoder loss sums enough terms that the
# 64-bit roundoff floor eps*|L|/step (~1e-10) swamps its smallest gradients
EXTENDED = np.longdouble


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=F64))


def _away(rng, shape, lo=0.2, hi=2.0):
    """Values with ``lo <= |x| <= hi`` and random sign."""
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _frac_away(rng, size, lo, hi):
    """Cell coordinates in ``[lo, hi)`` with fractional part in ``[0.1, 0.9]``."""
    return rng.integers(lo, hi, size=size) + rng.uniform(0.1, 0.9, size=size)


def _weighted(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    w = rng.normal(size=out.shape)
    return lambda y: T.sum(y * w)


Setup = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]


def _unary(op, sampler) -> Setup:
    def setup(rng):
        x = _t(sampler(rng, tuple(rng.integers(1, 5, size=2))))
        red = _weighted(op(x), rng)
        return (lambda a: red(op(a))), [x]
    return setup


def _binary(op, sample_b=None) -> Setup:
    def setup(rng):
        shape = tuple(rng.integers(1, 5, size=2))
        a = _t(rng.normal(size=shape))
        b = _t(sample_b(rng, shape) if sample_b else rng.normal(size=shape))
        red = _weighted(op(a, b), rng)
        return (lambda x, y: red(op(x, y))), [a, b]
    return setup


def _matmul(rng):
    batch = int(rng.integers(1, 3))
    n, k, m = rng.integers(1, 5, size=3)
    shape_a, shape_b = ((n, k), (k, m)) if batch == 1 else ((batch, n, k), (batch, k, m))
    a, b = _t(rng.normal(size=shape_a)), _t(rng.normal(size=shape_b))
    red = _weighted(T.matmul(a, b), rng)
    return (lambda x, y: red(T.matmul(x, y))), [a, b]


def _linear(rng):
    bsz, cin, cout = rng.integers(1, 5, size=3)
    x, w, b = _t(rng.normal(size=(bsz, cin))), _t(rng.normal(size=(cin, cout))), _t(rng.normal(size=cout))
    red = _weighted(T.linear(x, w, b), rng)
    return (lambda *a: red(T.linear(*a))), [x, w, b]


def _softmax(rng):
    x = _t(rng.normal(size=(3, 4, 2)))
    axis = int(rng.integers(0, 3))
    red = _weighted(T.softmax(x, axis), rng)
    return (lambda a: red(T.softmax(a, axis))), [x]


def _reduce(op) -> Setup:
    def setup(rng):
        x = _t(rng.normal(size=(2, 3, 4)))
        axis = [None, 0, 1, 2, (0, 2)][int(rng.integers(0, 5))]
        keep = bool(rng.integers(0, 2))
        red = _weighted(op(x, axis=axis, keepdims=keep), rng)
        return (lambda a: red(op(a, axis=axis, keepdims=keep))), [x]
    return setup


def _structural(rng):
    x = _t(rng.normal(size=(2, 3, 4)))
    fns = [lambda a: T.reshape(a, (4, 6)),
           lambda a: T.transpose(a, (2, 0, 1)),
           lambda a: T.broadcast_to(T.reshape(a, (1, 2, 3, 4)), (3, 2, 3, 4)),
           lambda a: a[:, 1:, ::2],
           lambda a: a[np.array([0, 1, 1, 0]), :, 2]]
    f = fns[int(rng.integers(0, len(fns)))]
    red = _weighted(f(x), rng)
    return (lambda a: red(f(a))), [x]


def _concat_stack(rng):
    a, b = _t(rng.normal(size=(2, 3))), _t(rng.normal(size=(2, 3)))
    f = [lambda x, y: T.concat([x, y], axis=0), lambda x, y: T.concat([x, y], axis=1),
         lambda x, y: T.stack([x, y], axis=2)][int(rng.integers(0, 3))]
    red = _weighted(f(a, b), rng)
    return (lambda x, y: red(f(x, y))), [a, b]


def _bilinear(rng):
    h, w, c = 4, 5, 3
    fmap = _t(rng.normal(size=(h, w, c)))
    p = 6
    # a couple of points straddle the border to exercise zero padding
    u = _t(_frac_away(rng, p, -1, w))
    v = _t(_frac_away(rng, p, -1, h))
    valid = rng.random(p) > 0.2
    red = _weighted(bilinear_sample(fmap, u, v, valid), rng)
    return (lambda f, a, b: red(bilinear_sample(f, a, b, valid))), [fmap, u, v]


def _interp(rng):
    m, d = 4, 6
    values = _t(rng.random(size=(m, d)))
    pos = _t(_frac_away(rng, m, 0, d - 1))
    red = _weighted(interp_rows(values, pos), rng)
    return (lambda a, b: red(interp_rows(a, b))), [values, pos]


def _log_sigmoid(rng):
    x = _t(rng.normal(scale=3.0, size=(3, 4)))
    red = _weighted(log_sigmoid(x), rng)
    return (lambda a: red(log_sigmoid(a))), [x]


def _keypoints(rng):
    m, c, kl = 3, 4, 2
    anchors = np.zeros((m, 11))
    anchors[:, :3] = rng.normal(scale=5.0, size=(m, 3))
    anchors[:, 3:6] = rng.normal(scale=0.3, size=(m, 3))
    yaw = rng.uniform(-np.pi, np.pi, size=m)
    anchors[:, 6], anchors[:, 7] = np.sin(yaw), np.cos(yaw)
    anchors[:, 8:] = rng.normal(size=(m, 3))
    a, feats = _t(anchors), _t(rng.normal(size=(m, c)))
    phi = Linear(c, 3 * kl, rng, F64)
    clock = FrameClock((0.0, 0.4, 1.0))
    poses = [SE3.from_yaw(0.2, (1.0, -0.5, 0.1)), SE3.from_yaw(-0.1, (0.3, 0.2, 0.0)), SE3.identity()]
    fn = lambda an, f, w: T.sum(build_keypoints4d(an, f, phi, clock, poses) * red_w)  # noqa: E731
    red_w = rng.normal(size=(m, 7 + kl, 3, 3))
    return fn, [a, feats, phi.weight]


def _projection(rng):
    queue = random_queue(AggregationShape(1, 2, 0, 1, 1, 1, 1), rng, dtype=F64)
    cam = queue.cameras[0][0]
    pts = np.stack([rng.uniform(3, 10, 5), rng.uniform(-3, 3, 5), rng.uniform(-1, 2, 5)], axis=1)
    pts[0] = (-5.0, 0.0, 1.0)  # behind the camera
    x = _t(pts)
    wu, wv = rng.normal(size=5), rng.normal(size=5)

    def fn(p):
        u, v, _ = project_points(p, cam)
        return T.sum(u * wu) + T.sum(v * wv)
    return fn, [x]


def _fusion(rng):
    m, k, nt, n, s, c, g = 2, 3, 2, 2, 2, 4, 2
    f = _t(rng.normal(size=(m, k, nt, n, s, c)))
    feats = _t(rng.normal(size=(m, c)))
    psi = Linear(c, k * n * s * g, rng, F64)
    psi_t = Linear(2 * c, c, rng, F64)
    conf = _t(rng.random(m))
    w = rng.normal(size=(m, c))

    def fn(fm, x, pw, tw, cf):
        weights = predict_weights(x, psi, k, n, s, g)
        out = fuse_keypoints(fuse_temporal(fuse_view_scale(fm, weights), psi_t))
        return T.sum(depth_reweight(out, cf) * w)
    return fn, [f, feats, psi.weight, psi_t.weight, conf]


def _refinement(rng):
    m = 3
    anchors = _t(np.concatenate([rng.normal(size=(m, 6)), np.ones((m, 2)) * 0.7, rng.normal(size=(m, 3))], 1))
    offsets = _t(rng.normal(scale=0.2, size=(m, 11)))
    red = _weighted(apply_refinement(anchors, offsets), rng)
    return (lambda a, o: red(apply_refinement(a, o))), [anchors, offsets]


def _losses(rng):
    m, classes, g = 5, 3, 3
    logits = _t(rng.normal(size=(m, classes)))
    boxes = _t(rng.normal(size=(m, 11)))
    gt = boxes.data + _away(rng, (m, 11), 0.05, 1.0)
    match = hungarian_match(rng.random((m, g)))
    onehot = np.zeros((m, classes))
    onehot[match.pred_index, rng.integers(0, classes, size=g)] = 1
    probs = _t(rng.uniform(0.05, 0.95, size=(m, 4)))
    target = rng.random((m, 4))

    def fn(lg, bx, pr):
        return (focal_loss(lg, onehot, 0.25, 2.0, g) + box_l1_loss(bx, gt, match)
                + bce(pr, target, 0.5))
    return fn, [logits, boxes, probs]


def tiny_instance(rng, dtype=F64) -> tuple[Decoder, object, Targets, ModelConfig]:
    """M=2, K=8, T=2, N=1, S=1, C=8, two stages.

    Anchors are not detached between stages so that the analytic gradient
    covers every path the finite differences see.
    """
    model = ModelConfig(num_anchors=2, embed_dims=8, num_groups=2, num_learnable_keypoints=1,
                        num_stages=2, num_classes=2, depth_bins=6, depth_min=1.0, depth_max=16.0,
                        depth_blocks=1, spatial_norm=10.0, detach_anchors=False)
    shape = AggregationShape(2, 8, 1, 2, 1, 1, 2)
    queue = random_queue(shape, rng, dtype=dtype)
    dec = Decoder(model, 1, 1, ((5.0, 9.0), (-2.0, 2.0), (0.0, 1.5)), rng, dtype=dtype)
    dec.anchors.data[:, 8:10] = rng.normal(size=(2, 2))
    # every box entry sits well away from the anchor so no L1 term is near its kink
    gt = dec.anchors.data[:1].copy()
    gt[:, :3] += (0.7, -0.4, 0.3)
    gt[:, 3:6] += (0.3, -0.25, 0.2)
    yaw = np.arctan2(gt[:, 6], gt[:, 7]) + 0.5
    gt[:, 6], gt[:, 7] = np.sin(yaw), np.cos(yaw)
    gt[:, 8:] += (0.5, -0.6, 0.4)
    targets = Targets(gt, np.array([1]))
    return dec, queue, targets, model


def _aggregation_chain(rng):
    """Sampling -> weights -> view/scale -> temporal -> keypoints -> reweight.

    Two views and two scales so the view/scale weights are not trivially 1.
    """
    m, kl, c, g = 2, 1, 8, 2
    model = ModelConfig(num_anchors=m, embed_dims=c, num_groups=g, num_learnable_keypoints=kl,
                        num_stages=1, depth_bins=6, depth_min=1.0, depth_max=16.0, depth_blocks=1)
    queue = random_queue(AggregationShape(m, c, kl, 2, 2, 2, g), rng, image_size=(64, 48), dtype=F64)
    dec = Decoder(model, 2, 2, ((5.0, 9.0), (-2.0, 2.0), (0.0, 1.5)), rng, dtype=F64)
    dec.anchors.data[:, 8:10] = rng.normal(size=(m, 2))
    stage = dec.stages[0]
    k = model.num_keypoints
    maps = queue.maps[1][0][1]
    anchors = _t(dec.anchors.data)
    offsets = _t(np.zeros((m, k, 2, 3)))
    w = rng.normal(size=(m, c))

    def fn(fm, an, base, pw, tw, hw):
        kp = build_keypoints4d(an, dec.features, stage.phi, queue.clock, queue.poses) + base
        weights = predict_weights(dec.features, stage.psi, k, 2, 2, g)
        f, _, _ = sample_features(kp, queue)
        agg = fuse_keypoints(fuse_temporal(fuse_view_scale(f, weights), stage.psi_temp))
        conf = sample_confidence(stage.depth(agg), an, model.depth_min, model.depth_max)
        return T.sum(depth_reweight(agg, conf) * w)
    return fn, [maps, anchors, offsets, stage.psi.weight, stage.psi_temp.weight, stage.depth.head.weight]


def _decoder_loss(rng):
    dec, queue, targets, model = tiny_instance(rng, EXTENDED)
    # at the focal prior the class-head gradients are scaled by p^gamma ~ 1e-4
    # and drop to ~1e-10, under even the extended-precision roundoff floor
    for stage in dec.stages:
        stage.cls.fc2.bias.data[:] = 0.0
    loss_cfg = LossConfig()

    def fn(*_):
        return total_loss(dec(queue), targets, model, loss_cfg).tensor
    return fn, dec.parameters()


CHECKS: dict[str, tuple[Setup, int]] = {
    "add": (_binary(T.add), 10),
    "sub": (_binary(T.sub), 10),
    "mul": (_binary(T.mul), 10),
    "div": (_binary(T.div, lambda r, s: _away(r, s, 0.5, 2.0)), 10),
    "scale": (_unary(lambda x: T.scale(x, -1.7), lambda r, s: r.normal(size=s)), 10),
    "shift": (_unary(lambda x: T.shift(x, 0.3), lambda r, s: r.normal(size=s)), 10),
    "sigmoid": (_unary(T.sigmoid, lambda r, s: r.normal(scale=2, size=s)), 10),
    "relu": (_unary(T.relu, _away), 10),
    "exp": (_unary(T.exp, lambda r, s: r.normal(size=s)), 10),
    "log": (_unary(T.log, lambda r, s: r.uniform(0.2, 3.0, size=s)), 10),
    "sqrt": (_unary(T.sqrt, lambda r, s: r.uniform(0.2, 3.0, size=s)), 10),
    "abs": (_unary(T.absolute, _away), 10),
    "log_sigmoid": (_log_sigmoid, 10),
    "matmul": (_matmul, 10),
    "linear": (_linear, 10),
    "softmax": (_softmax, 10),
    "sum": (_reduce(T.sum), 10),
    "mean": (_reduce(T.mean), 10),
    "structural": (_structural, 12),
    "concat_stack": (_concat_stack, 10),
    "bilinear": (_bilinear, 10),
    "interp": (_interp, 10),
    "keypoints": (_keypoints, 3),
    "projection": (_projection, 3),
    "fusion": (_fusion, 3),
    "refinement": (_refinement, 3),
    "losses": (_losses, 3),
    "aggregation_chain": (_aggregation_chain, 2),
    "decoder_loss": (_decoder_loss, 1),
}


@dataclass
class CheckResult:
    name: str
    trials: int
    max_error: float
    seconds: float

    def passed(self, tol: float = 1e-5) -> bool:
        return self.max_error < tol


def run_check(name: str, seed: int = 0, trials: int | None = None, step: float = 1e-5) -> CheckResult:
    setup, default_trials = CHECKS[name]
    trials = default_trials if trials is None else trials
    rng = np.random.default_rng([seed, sorted(CHECKS).index(name)])
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(trials):
        fn, inputs = setup(rng)
        worst = max(worst, T.grad_check(fn, inputs, step))
    return CheckResult(name, trials, worst, time.perf_counter() - t0)


def run_all(names=None, seed: int = 0) -> list[CheckResult]:
    return [run_check(n, seed) for n in (names or list(CHECKS))]
