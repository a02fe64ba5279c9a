"""3D-aware bipartite matching: composite 2D/3D costs, the step scheduler, Hungarian assignment."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import giou_2d_batch
from .kitti_io import Object3D

COMPONENTS_2D = ("cls", "proj", "lrtb", "giou")
COMPONENTS_3D = ("size3d", "orien", "depth")


class EmptyAssignmentError(ValueError):
    pass


@dataclass(frozen=True)
class SchedulerConfig:
    epsilon: float = 1.0
    trigger_epoch: int = 85

    def __post_init__(self):
        if self.epsilon < 0 or self.trigger_epoch < 0:
            raise ValueError("scheduler needs epsilon >= 0 and trigger_epoch >= 0")


@dataclass(frozen=True)
class CostWeights:
    cls: float = 2.0
    proj: float = 10.0
    lrtb: float = 5.0
    giou: float = 2.0
    size3d: float = 1.0
    orien: float = 1.0
    depth: float = 1.0


@dataclass(frozen=True)
class MatchingConfig:
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    weights: CostWeights = field(default_factory=CostWeights)
    categories: tuple[str, ...] = ("Car", "Pedestrian", "Cyclist")
    num_bins: int = 12
    zero_3d: bool = False  # hard-disable the 3D term regardless of epoch


def gamma(t: int, cfg: SchedulerConfig) -> float:
    """Step schedule: 0 before the trigger epoch, ``epsilon`` from then on."""
    if t < 0:
        raise ValueError("epoch must be non-negative")
    return 0.0 if t < cfg.trigger_epoch else float(cfg.epsilon)


@dataclass
class Prediction:
    class_probs: np.ndarray
    center_proj: np.ndarray
    box2d: np.ndarray  # (l, r, t, b)
    dims: np.ndarray
    depth: float
    orientation_bin_probs: np.ndarray
    orientation_residual: np.ndarray | float  # scalar, or one residual per bin

    def __post_init__(self):
        for name in ("class_probs", "orientation_bin_probs"):
            p = np.asarray(getattr(self, name), dtype=np.float64)
            if abs(p.sum() - 1.0) > 1e-9 or np.any(p < 0):
                raise ValueError(f"{name} must lie on the simplex")
        if not self.depth > 0:
            raise ValueError("predicted depth must be positive")

    @classmethod
    def from_object(cls, obj: Object3D, categories: Sequence[str], num_bins: int) -> "Prediction":
        """One-hot pseudo-prediction that reproduces a labelled object exactly."""
        probs = np.zeros(len(categories))
        probs[list(categories).index(obj.category)] = 1.0
        bins = np.zeros(num_bins)
        bins[obj.orientation_bin] = 1.0
        return cls(probs, np.array(obj.center_proj), obj.box2d.as_array(), np.array(obj.dims), obj.depth, bins,
                   float(obj.orientation_residual))


@dataclass
class PredictionSet:
    """Row-stacked predictions; ``residual`` has one column per orientation bin."""

    class_probs: np.ndarray
    center: np.ndarray
    lrtb: np.ndarray
    dims: np.ndarray
    depth: np.ndarray
    bin_probs: np.ndarray
    residual: np.ndarray

    def __len__(self):
        return len(self.depth)

    @classmethod
    def stack(cls, preds: Sequence[Prediction]) -> "PredictionSet":
        nb = len(preds[0].orientation_bin_probs)
        res = [np.broadcast_to(np.asarray(p.orientation_residual, dtype=np.float64), (nb,)) for p in preds]
        return cls(
            np.array([p.class_probs for p in preds], dtype=np.float64),
            np.array([p.center_proj for p in preds], dtype=np.float64),
            np.array([p.box2d for p in preds], dtype=np.float64),
            np.array([p.dims for p in preds], dtype=np.float64),
            np.array([p.depth for p in preds], dtype=np.float64),
            np.array([p.orientation_bin_probs for p in preds], dtype=np.float64),
            np.array(res),
        )


@dataclass
class TargetSet:
    labels: np.ndarray
    center: np.ndarray
    lrtb: np.ndarray
    dims: np.ndarray
    depth: np.ndarray
    bins: np.ndarray
    residual: np.ndarray

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_objects(cls, objs: Sequence[Object3D], categories: Sequence[str]) -> "TargetSet":
        cats = list(categories)
        return cls(
            np.array([cats.index(o.category) for o in objs], dtype=int),
            np.array([o.center_proj for o in objs], dtype=np.float64).reshape(-1, 2),
            np.array([o.box2d.as_array() for o in objs], dtype=np.float64).reshape(-1, 4),
            np.array([o.dims for o in objs], dtype=np.float64).reshape(-1, 3),
            np.array([o.depth for o in objs], dtype=np.float64),
            np.array([o.orientation_bin for o in objs], dtype=int),
            np.array([o.orientation_residual for o in objs], dtype=np.float64),
        )

    def take(self, idx) -> "TargetSet":
        idx = np.asarray(idx, dtype=int)
        return TargetSet(*(getattr(self, f)[idx] for f in
                           ("labels", "center", "lrtb", "dims", "depth", "bins", "residual")))


def _components(preds: PredictionSet, gts: TargetSet) -> dict[str, np.ndarray]:
    comp = {
        "cls": -preds.class_probs[:, gts.labels],
        "proj": np.abs(preds.center[:, None] - gts.center[None]).sum(-1),
        "lrtb": np.abs(preds.lrtb[:, None] - gts.lrtb[None]).sum(-1),
        "giou": 1.0 - giou_2d_batch(preds.center, preds.lrtb, gts.center, gts.lrtb),
        "size3d": np.abs(preds.dims[:, None] - gts.dims[None]).sum(-1),
        "depth": np.abs(preds.depth[:, None] - gts.depth[None]),
    }
    res = preds.residual[:, gts.bins]
    comp["orien"] = (1.0 - preds.bin_probs[:, gts.bins]) + np.abs(res - gts.residual[None])
    return comp


def _combine(comp: dict[str, np.ndarray], w: CostWeights, g: float) -> np.ndarray:
    c2d = w.cls * comp["cls"] + w.proj * comp["proj"] + w.lrtb * comp["lrtb"] + w.giou * comp["giou"]
    c3d = w.size3d * comp["size3d"] + w.orien * comp["orien"] + w.depth * comp["depth"]
    return c2d + g * c3d


def cost_2d(pred: Prediction, gt: Object3D, weights: CostWeights | None = None,
            categories: Sequence[str] = MatchingConfig.categories) -> tuple[float, dict[str, float]]:
    w = weights or CostWeights()
    comp = _components(PredictionSet.stack([pred]), TargetSet.from_objects([gt], categories))
    total = w.cls * comp["cls"] + w.proj * comp["proj"] + w.lrtb * comp["lrtb"] + w.giou * comp["giou"]
    return float(total[0, 0]), {k: float(comp[k][0, 0]) for k in COMPONENTS_2D}


def cost_3d(pred: Prediction, gt: Object3D, weights: CostWeights | None = None,
            categories: Sequence[str] = MatchingConfig.categories) -> tuple[float, dict[str, float]]:
    w = weights or CostWeights()
    comp = _components(PredictionSet.stack([pred]), TargetSet.from_objects([gt], categories))
    total = w.size3d * comp["size3d"] + w.orien * comp["orien"] + w.depth * comp["depth"]
    return float(total[0, 0]), {k: float(comp[k][0, 0]) for k in COMPONENTS_3D}


@dataclass
class CostMatrix:
    values: np.ndarray
    components: dict[str, np.ndarray]
    gamma: float
    weights: CostWeights

    @property
    def shape(self):
        return self.values.shape

    def breakdown(self, i: int, j: int) -> dict[str, float]:
        return {k: float(v[i, j]) for k, v in self.components.items()}

    def reconstruct(self) -> np.ndarray:
        return _combine(self.components, self.weights, self.gamma)


def build_cost_matrix(preds, gts, epoch: int, cfg: MatchingConfig | None = None) -> CostMatrix:
    """``C_2D + gamma(epoch) * C_3D`` for every (prediction, ground truth) pair."""
    cfg = cfg or MatchingConfig()
    if not isinstance(preds, PredictionSet):
        preds = PredictionSet.stack(preds)
    if not isinstance(gts, TargetSet):
        gts = TargetSet.from_objects(gts, cfg.categories) if len(gts) else None
    if gts is None or len(gts) == 0:
        raise EmptyAssignmentError("no ground-truth objects to match")
    if len(preds) < len(gts):
        raise ValueError(f"need at least as many predictions ({len(preds)}) as ground truths ({len(gts)})")
    g = 0.0 if cfg.zero_3d else gamma(epoch, cfg.scheduler)
    comp = _components(preds, gts)
    values = _combine(comp, cfg.weights, g)
    if not np.isfinite(values).all():
        raise ValueError("non-finite matching cost")
    return CostMatrix(values, comp, g, cfg.weights)


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]  # (prediction index, ground-truth index), sorted by gt
    unmatched: list[int]
    total: float

    @property
    def pred_indices(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=int)

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=int)


def hungarian(costs) -> Assignment:
    """Exact min-cost assignment of every ground truth (column) to a distinct prediction (row).

    Shortest-augmenting-path Hungarian method with dual potentials, O(n^2 m).
    Ties resolve toward the lowest index in scan order, so results are
    deterministic.
    """
    C = np.asarray(costs.values if isinstance(costs, CostMatrix) else costs, dtype=np.float64)
    n_pred, n_gt = C.shape
    if n_gt == 0:
        return Assignment([], list(range(n_pred)), 0.0)
    if n_pred < n_gt:
        raise ValueError("hungarian needs n_pred >= n_gt")
    if not np.isfinite(C).all():
        raise ValueError("costs must be finite")
    # Rows of the working problem are ground truths, columns are predictions.
    a = C.T
    n, m = n_gt, n_pred
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)  # p[j] = row matched to column j (1-based), 0 = free
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, math.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = math.inf
            j1 = 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    pairs = sorted(((j - 1, int(p[j]) - 1) for j in range(1, m + 1) if p[j]), key=lambda t: t[1])
    matched = {pi for pi, _ in pairs}
    total = math.fsum(C[pi, gi] for pi, gi in pairs)
    return Assignment(pairs, [j for j in range(n_pred) if j not in matched], total)


def match(preds, gts, epoch: int, cfg: MatchingConfig | None = None) -> tuple[Assignment, CostMatrix]:
    cm = build_cost_matrix(preds, gts, epoch, cfg)
    return hungarian(cm), cm
