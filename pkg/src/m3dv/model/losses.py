"""Detection, reconstruction, distillation and combined training losses."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..geometry import giou_2d_tensor, iou_3d
from ..matching import Assignment, TargetSet
from ..numeric import Tensor, ops
from .config import LossWeights, SetLossWeights


def _rows(t: Tensor, rows: np.ndarray) -> Tensor:
    return ops.index(t, (np.asarray(rows, dtype=int),))


def set_loss(preds: dict[str, Tensor], rows: np.ndarray, targets: TargetSet, n_classes: int,
             w: SetLossWeights | None = None, norm: float | None = None) -> tuple[Tensor, dict[str, float]]:
    """Focal class loss on every row plus regression terms on ``rows`` (aligned with ``targets``).

    Rows not listed are supervised as background only. Terms are summed and
    divided by ``norm`` (defaults to the number of targets).
    """
    w = w or SetLossWeights()
    rows = np.asarray(rows, dtype=int)
    T = preds["logits"].shape[0]
    norm = float(norm if norm is not None else max(len(rows), 1))
    labels = np.full(T, n_classes, dtype=int)
    labels[rows] = targets.labels
    terms = {"cls": ops.sum(ops.focal_loss(preds["logits"], labels, w.focal_alpha, w.focal_gamma, n_classes))}
    if len(rows):
        center = _rows(preds["center"], rows)
        lrtb = _rows(preds["lrtb"], rows)
        terms["center"] = ops.sum(ops.l1(center, targets.center))
        terms["lrtb"] = ops.sum(ops.l1(lrtb, targets.lrtb))
        giou = giou_2d_tensor(center, lrtb, Tensor(targets.center), Tensor(targets.lrtb))
        terms["giou"] = ops.sum(ops.sub(1.0, giou))
        terms["dims"] = ops.sum(ops.l1(_rows(preds["dims"], rows), targets.dims))
        terms["depth"] = ops.sum(ops.l1(_rows(preds["depth"], rows), targets.depth))
        bin_ce = ops.sum(ops.cross_entropy(_rows(preds["bin_logits"], rows), targets.bins))
        res = ops.index(preds["residual"], (rows, targets.bins))
        terms["orien"] = ops.add(bin_ce, ops.sum(ops.l1(res, targets.residual)))
    weights = {"cls": w.cls, "center": w.center, "lrtb": w.lrtb, "giou": w.giou, "dims": w.dims,
               "depth": w.depth, "orien": w.orien}
    total = None
    for k, t in terms.items():
        part = ops.scale(t, weights[k])
        total = part if total is None else ops.add(total, part)
    total = ops.scale(total, 1.0 / norm)
    return total, {k: float(v.data) / norm for k, v in terms.items()}


def detection_loss(preds: dict[str, Tensor], assignment: Assignment, gts: TargetSet, n_classes: int,
                   w: SetLossWeights | None = None, norm: float | None = None):
    """Set loss for learnable queries under a Hungarian assignment."""
    rows = assignment.pred_indices
    targets = gts.take(assignment.gt_indices)
    return set_loss(preds, rows, targets, n_classes, w, norm if norm is not None else max(len(gts), 1))


def reconstruction_loss(preds: dict[str, Tensor], targets: TargetSet, n_classes: int,
                        w: SetLossWeights | None = None):
    """Every noisy row reconstructs the ground truth it was drawn from; no matching involved."""
    rows = np.arange(preds["logits"].shape[0])
    return set_loss(preds, rows, targets, n_classes, w, len(rows))


def distillation_loss(queries: Sequence[Tensor], refine, rows: np.ndarray, weights: np.ndarray,
                      norm: float | None = None, target: np.ndarray | None = None) -> Tensor:
    """IoU-weighted Smooth-L1 between refined earlier-layer queries and the frozen last-layer query.

    ``queries`` holds the per-layer query tensors; only ``rows`` take part and
    ``weights`` gives one IoU3D weight per row. ``target`` replaces the
    stop-gradient last-layer rows with fixed values, which keeps finite
    differences from moving the target along with the parameters.
    """
    if len(queries) < 2:
        raise ValueError("distillation needs at least two decoder layers")
    rows = np.asarray(rows, dtype=int)
    weights = np.asarray(weights, dtype=np.float64)
    if len(rows) == 0:
        return Tensor(np.array(0.0))
    target = ops.stop_gradient(_rows(queries[-1], rows)) if target is None else Tensor(target)
    total = None
    for q in queries[:-1]:
        diff = ops.mean(ops.smooth_l1(refine(_rows(q, rows)), target), axis=-1)
        term = ops.sum(ops.mul(diff, weights))
        total = term if total is None else ops.add(total, term)
    return ops.scale(total, 1.0 / float(norm if norm is not None else len(rows)))


def iou_weights(pred_boxes, gt_boxes) -> np.ndarray:
    return np.array([iou_3d(p, g) for p, g in zip(pred_boxes, gt_boxes)], dtype=np.float64)


def overall_loss(parts: dict[str, Tensor], w: LossWeights | None = None) -> Tensor:
    """lambda1 L_det + lambda2 (L_res + beta L_KL) + lambda3 L_dis; missing parts count as zero."""
    w = w or LossWeights()
    zero = Tensor(np.array(0.0))
    det = parts.get("det", zero)
    dn = ops.add(parts.get("res", zero), ops.scale(parts.get("kl", zero), w.beta))
    dis = parts.get("dis", zero)
    return ops.add(ops.add(ops.scale(det, w.lambda1), ops.scale(dn, w.lambda2)), ops.scale(dis, w.lambda3))
