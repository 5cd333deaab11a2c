"""Set matching and the three-term detection loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..config import LossConfig, ModelConfig
from ..errors import ContractError
from ..fusion import depth_target
from ..tensor import Tensor

MATCH_BOX_DIMS = 10  # every anchor entry except vz


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]
    total_cost: float

    @property
    def pred_index(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=np.int64)

    @property
    def gt_index(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)


def hungarian_match(cost: np.ndarray) -> Assignment:
    """Minimum-cost assignment of every column (ground truth) to a distinct row (prediction).

    Shortest augmenting path with dual potentials, O(G^2 M).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost must be a matrix, got shape {cost.shape}")
    m, g = cost.shape
    if g > m:
        raise ContractError(f"{g} ground truths cannot be matched to {m} predictions")
    if not np.isfinite(cost).all():
        raise ContractError("cost matrix must be finite")
    if g == 0:
        return Assignment([], 0.0)
    a = cost.T  # rows: ground truth, columns: predictions
    n = g
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j]: 1-based row on column j, 0 free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used
            free[0] = False
            cols = np.nonzero(free)[0]
            cur = a[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = cur < minv[cols]
            minv[cols[better]] = cur[better]
            way[cols[better]] = j0
            j1 = cols[np.argmin(minv[cols])]
            delta = minv[j1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    pairs = sorted((int(j - 1), int(owner[j] - 1)) for j in range(1, m + 1) if owner[j])
    total = float(sum(cost[p, q] for p, q in pairs))
    return Assignment(pairs, total)


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0, -x)


def match_cost(logits: np.ndarray | None, boxes: np.ndarray, gt_boxes: np.ndarray,
               gt_classes: np.ndarray, cfg: LossConfig) -> np.ndarray:
    """``[M, G]`` matching cost: focal-style class cost plus L1 box distance.

    The class term at the ground-truth class is the difference between the
    positive and negative focal terms. ``logits=None`` drops it.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64)
    diff = np.abs(boxes[:, None, :MATCH_BOX_DIMS] - gt_boxes[None, :, :MATCH_BOX_DIMS]).sum(axis=2)
    cost = cfg.match_box_weight * diff
    if logits is not None and cfg.match_cls_weight:
        x = np.asarray(logits, dtype=np.float64)[:, gt_classes]
        a, gamma = cfg.focal_alpha, cfg.focal_gamma
        p = np.exp(_log_sigmoid(x))
        pos = -a * (1 - p) ** gamma * _log_sigmoid(x)
        neg = -(1 - a) * p ** gamma * _log_sigmoid(-x)
        cost = cost + cfg.match_cls_weight * (pos - neg)
    return cost


def log_sigmoid(x: Tensor) -> Tensor:
    """Primitive ``log(sigmoid(x))`` that stays finite for large ``|x|``."""
    d = x.data
    out = -np.logaddexp(0, -d).astype(d.dtype)
    sig = np.exp(out)
    T._add_flops(4 * x.size)
    return T._make(out, "log_sigmoid", (x,), lambda g: (g * (1 - sig),))


def focal_loss(logits: Tensor, targets: np.ndarray, alpha: float, gamma: float,
               num_matches: int) -> Tensor:
    """Sigmoid focal loss summed over all entries and divided by ``max(1, num_matches)``.

    Rows of ``targets`` are one-hot for matched predictions and all-zero
    (background) otherwise.
    """
    t = np.asarray(targets, dtype=logits.dtype)
    ls_pos = log_sigmoid(logits)          # log p
    ls_neg = log_sigmoid(-logits)         # log (1 - p)
    pos = T.exp(T.scale(ls_neg, gamma)) * ls_pos
    neg = T.exp(T.scale(ls_pos, gamma)) * ls_neg
    per = T.scale(pos * t, -alpha) + T.scale(neg * (1 - t), -(1 - alpha))
    return T.scale(T.sum(per), 1.0 / max(1, num_matches))


def box_l1_loss(pred: Tensor, gt: np.ndarray, assignment: Assignment) -> Tensor:
    """Mean over matches of the mean absolute error across all 11 anchor entries."""
    n = len(assignment.pairs)
    if n == 0:
        return T.scale(T.sum(pred), 0.0)
    rows = pred[assignment.pred_index]
    target = np.asarray(gt, dtype=pred.dtype)[assignment.gt_index]
    return T.scale(T.sum(T.absolute(rows - target)), 1.0 / (n * pred.shape[1]))


def _bce_eps(dtype) -> float:
    return 1e-12 if np.dtype(dtype) == np.float64 else 1e-6


def depth_loss(probs: Tensor, assignment: Assignment, gt: np.ndarray, model: ModelConfig) -> Tensor:
    """Binary cross entropy between predicted bins and the interpolated target, per match."""
    n = len(assignment.pairs)
    if n == 0:
        return T.scale(T.sum(probs), 0.0)
    gt = np.asarray(gt)[assignment.gt_index]
    r = np.hypot(gt[:, 0], gt[:, 1])
    target = depth_target(r, model.depth_min, model.depth_max, model.depth_bins).astype(probs.dtype)
    return bce(probs[assignment.pred_index], target, 1.0 / n)


def bce(p: Tensor, target: np.ndarray, norm: float) -> Tensor:
    eps = _bce_eps(p.dtype)
    pc = T.shift(T.scale(p, 1 - 2 * eps), eps)
    terms = T.log(pc) * target + T.log(T.shift(-pc, 1.0)) * (1 - target)
    return T.scale(T.sum(terms), -norm)


@dataclass
class LossBreakdown:
    cls: float
    box: float
    depth: float
    total: float
    weights: tuple[float, float, float]
    tensor: Tensor | None = field(default=None, repr=False)
    per_stage: list[dict] = field(default_factory=list)


@dataclass
class Targets:
    boxes: np.ndarray    # [G, 11]
    classes: np.ndarray  # [G]

    @classmethod
    def from_scene(cls, scene) -> "Targets":
        return cls(scene.gt_vectors(), scene.gt_classes())


def stage_losses(out, targets: Targets, model: ModelConfig, cfg: LossConfig):
    logits = out.cls_logits
    cost = match_cost(None if logits is None else logits.data, out.anchors.data, targets.boxes,
                      targets.classes, cfg)
    match = hungarian_match(cost)
    n = len(match.pairs)
    if logits is not None:
        onehot = np.zeros(logits.shape)
        if n:
            onehot[match.pred_index, targets.classes[match.gt_index]] = 1.0
        l_cls = focal_loss(logits, onehot, cfg.focal_alpha, cfg.focal_gamma, n)
    else:
        l_cls = None
    l_box = box_l1_loss(out.anchors, targets.boxes, match)
    l_depth = depth_loss(out.depth_probs, match, targets.boxes, model)
    return l_cls, l_box, l_depth, match


def total_loss(outputs, targets: Targets, model: ModelConfig, cfg: LossConfig) -> LossBreakdown:
    """Independent matching per stage; component losses summed over stages, then weighted."""
    if not outputs:
        raise ContractError("need at least one stage output")
    cls_terms, box_terms, depth_terms, per_stage = [], [], [], []
    for out in outputs:
        l_cls, l_box, l_depth, match = stage_losses(out, targets, model, cfg)
        if l_cls is not None:
            cls_terms.append(l_cls)
        box_terms.append(l_box)
        depth_terms.append(l_depth)
        per_stage.append({"cls": None if l_cls is None else float(l_cls.data), "box": float(l_box.data),
                          "depth": float(l_depth.data), "matches": len(match.pairs)})

    def add_all(terms):
        acc = terms[0]
        for t in terms[1:]:
            acc = acc + t
        return acc

    cls_t, box_t, depth_t = add_all(cls_terms), add_all(box_terms), add_all(depth_terms)
    w = (cfg.cls_weight, cfg.box_weight, cfg.depth_weight)
    total_t = T.scale(cls_t, w[0]) + T.scale(box_t, w[1]) + T.scale(depth_t, w[2])
    c, b, d = float(cls_t.data), float(box_t.data), float(depth_t.data)
    return LossBreakdown(c, b, d, w[0] * c + w[1] * b + w[2] * d, w, total_t, per_stage)
