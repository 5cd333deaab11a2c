"""Desk-scale detection metrics on held-out synthetic scenes.

Predictions from the last stage are ranked by their best class probability
and greedily matched to the nearest unmatched ground-truth centre (3D
Euclidean distance) at each threshold. Matching is class-agnostic.
"""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..config import RunConfig
from .losses import hungarian_match
from .scene import Scene, render_feature_maps


def average_precision(tp: np.ndarray, num_gt: int) -> tuple[float, float, float]:
    """All-point interpolated AP from a score-ranked TP flag list.

    Returns ``(ap, precision, recall)`` with precision/recall at the end of the list.
    """
    if num_gt == 0:
        return float("nan"), float("nan"), float("nan")
    if len(tp) == 0:
        return 0.0, 0.0, 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / num_gt
    # precision envelope, then area under the step function
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = np.concatenate([[0.0], recall[:-1]])
    ap = float(np.sum((recall - prev_r) * env))
    return ap, float(precision[-1]), float(recall[-1])


def greedy_match(preds: list[dict], gts: list[np.ndarray], threshold: float):
    """``preds``: dicts with ``scene``, ``score``, ``center``; ``gts[scene]`` is ``[G, 3]``.

    Returns score-ordered TP flags and the (pred, scene, gt) index of each TP.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i]["score"])
    taken = [np.zeros(len(g), dtype=bool) for g in gts]
    flags, matches = [], []
    for i in order:
        p = preds[i]
        g = gts[p["scene"]]
        if len(g) == 0:
            flags.append(False)
            continue
        dist = np.linalg.norm(g - p["center"], axis=1)
        dist[taken[p["scene"]]] = np.inf
        j = int(np.argmin(dist))
        if dist[j] <= threshold:
            taken[p["scene"]][j] = True
            flags.append(True)
            matches.append((i, p["scene"], j))
        else:
            flags.append(False)
    return np.array(flags, dtype=bool), matches


def detection_metrics(preds: list[dict], scenes_gt: list[np.ndarray], scenes_vel: list[np.ndarray],
                      thresholds, error_threshold: float) -> dict:
    num_gt = int(sum(len(g) for g in scenes_gt))
    out = {"num_gt": num_gt, "num_pred": len(preds), "thresholds": {}}
    for thr in thresholds:
        flags, matches = greedy_match(preds, scenes_gt, thr)
        ap, prec, rec = average_precision(flags, num_gt)
        entry = {"ap": ap, "precision": prec, "recall": rec, "tp": int(flags.sum())}
        if matches:
            cerr = [np.linalg.norm(preds[i]["center"] - scenes_gt[s][j]) for i, s, j in matches]
            verr = [np.linalg.norm(preds[i]["velocity"] - scenes_vel[s][j]) for i, s, j in matches]
            entry["center_error"] = float(np.mean(cerr))
            entry["velocity_error"] = float(np.mean(verr))
        else:
            entry["center_error"] = float("nan")
            entry["velocity_error"] = float("nan")
        out["thresholds"][str(float(thr))] = entry
    ref = out["thresholds"][str(float(error_threshold))]
    out["center_error"] = ref["center_error"]
    out["velocity_error"] = ref["velocity_error"]
    return out


def stage_l1(boxes: np.ndarray, gt: np.ndarray) -> list[float]:
    """Per-GT mean absolute 11-entry error after a pure-L1 Hungarian match."""
    if len(gt) == 0:
        return []
    cost = np.abs(boxes[:, None, :] - gt[None]).mean(axis=2)
    match = hungarian_match(cost)
    return [float(cost[p, g]) for p, g in match.pairs]


def evaluate(decoder, scenes: list[Scene], cfg: RunConfig, queues=None) -> dict:
    """Metrics over ``scenes`` (which must not overlap the training seeds)."""
    preds, gts, vels = [], [], []
    per_stage: list[list[float]] = [[] for _ in range(cfg.model.num_stages)]
    floor = cfg.eval.score_floor
    for si, scene in enumerate(scenes):
        queue = queues[si] if queues is not None else render_feature_maps(scene, cfg)
        with T.no_grad():
            outputs = decoder(queue)
        gt = scene.gt_vectors()
        gts.append(gt[:, :3])
        vels.append(gt[:, 8:11])
        for k, out in enumerate(outputs):
            per_stage[k].extend(stage_l1(out.anchors.data.astype(np.float64), gt))
        last = outputs[-1]
        probs = 1.0 / (1.0 + np.exp(-last.cls_logits.data.astype(np.float64)))
        scores = probs.max(axis=1)
        labels = probs.argmax(axis=1)
        boxes = last.anchors.data.astype(np.float64)
        for i in np.nonzero(scores > floor)[0]:
            preds.append({"scene": si, "score": float(scores[i]), "label": int(labels[i]),
                          "center": boxes[i, :3], "velocity": boxes[i, 8:11]})
    metrics = detection_metrics(preds, gts, vels, cfg.eval.thresholds, cfg.eval.error_threshold)
    metrics["stage_l1"] = [float(np.mean(v)) if v else float("nan") for v in per_stage]
    metrics["num_scenes"] = len(scenes)
    return metrics


def format_table(metrics: dict) -> str:
    lines = [f"scenes={metrics['num_scenes']} gt={metrics['num_gt']} predictions={metrics['num_pred']}",
             f"{'thr(m)':>7} {'AP':>7} {'prec':>7} {'recall':>7} {'ctr_err':>8} {'vel_err':>8}"]
    for thr, e in metrics["thresholds"].items():
        lines.append(f"{float(thr):7.2f} {e['ap']:7.3f} {e['precision']:7.3f} {e['recall']:7.3f} "
                     f"{e['center_error']:8.3f} {e['velocity_error']:8.3f}")
    lines.append("stage L1: " + " ".join(f"{v:.4f}" for v in metrics["stage_l1"]))
    return "\n".join(lines)
