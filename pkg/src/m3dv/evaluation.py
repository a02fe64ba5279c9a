"""AP@R40 for 3D and BEV boxes.

A detection is an :class:`Object3D` whose ``score`` is set.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .geometry import Box3D, iou_3d
from .kitti_io import Object3D

RECALL_POSITIONS = np.arange(1, 41) / 40.0


class UndefinedAPError(ValueError):
    pass


def _score(d: Object3D) -> float:
    s = d.score
    if s is None or not math.isfinite(s) or not 0.0 <= s <= 1.0:
        raise ValueError(f"detection score must be a finite value in [0, 1], got {s!r}")
    return float(s)


def filter_by_confidence(dets: Sequence[Object3D], tau: float = 0.2) -> list[Object3D]:
    """Drop detections scoring strictly below ``tau``."""
    return [d for d in dets if _score(d) >= tau]


def pr_curve(dets_per_scene: Sequence[Sequence[Object3D]], gts_per_scene: Sequence[Sequence[Object3D]],
             iou_fn: Callable[[Box3D, Box3D], float], threshold: float, category: str | None = None):
    """Greedy score-ordered matching; returns (precision, recall) after each ranked detection."""
    if len(dets_per_scene) != len(gts_per_scene):
        raise ValueError("detections and ground truth cover different numbers of scenes")
    if not 0.0 < threshold < 1.0:
        raise ValueError("IoU threshold must lie in (0, 1)")
    keep = (lambda o: o.category == category) if category else (lambda o: True)
    gts = [[g for g in scene if keep(g)] for scene in gts_per_scene]
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        raise UndefinedAPError("AP is undefined without ground-truth objects")
    ranked = [(-_score(d), si, di) for si, scene in enumerate(dets_per_scene)
              for di, d in enumerate(scene) if keep(d)]
    ranked.sort()
    used = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = np.zeros(len(ranked))
    for r, (_, si, di) in enumerate(ranked):
        det = dets_per_scene[si][di]
        best, best_j = -1.0, -1
        for j, gt in enumerate(gts[si]):
            if used[si][j] or gt.category != det.category:
                continue
            ov = iou_fn(det.box3d, gt.box3d)
            if ov > best:
                best, best_j = ov, j
        if best_j >= 0 and best >= threshold:
            used[si][best_j] = True
            tp[r] = 1.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(ranked) + 1) if len(ranked) else np.zeros(0)
    recall = ctp / n_gt
    return precision, recall


def ap_r40(dets_per_scene, gts_per_scene, iou_fn: Callable[[Box3D, Box3D], float] = iou_3d,
           threshold: float = 0.7, category: str | None = None) -> float:
    """Average of the interpolated precision at recall 1/40 ... 40/40, in percent."""
    precision, recall = pr_curve(dets_per_scene, gts_per_scene, iou_fn, threshold, category)
    total = 0.0
    for r in RECALL_POSITIONS:
        reach = precision[recall >= r - 1e-12]
        total += float(reach.max()) if reach.size else 0.0
    return 100.0 * total / len(RECALL_POSITIONS)


def ap_table(dets_per_scene, gts_per_scene, iou_fns: dict[str, Callable], thresholds: Sequence[float],
             categories: Sequence[str]) -> list[dict]:
    """One row per (category, metric, threshold); categories without ground truth are skipped."""
    rows = []
    for cat in categories:
        if not any(g.category == cat for scene in gts_per_scene for g in scene):
            continue
        for name, fn in iou_fns.items():
            for thr in thresholds:
                rows.append({"category": cat, "metric": name, "iou_threshold": thr,
                             "ap_r40": ap_r40(dets_per_scene, gts_per_scene, fn, thr, cat)})
    return rows
