"""Desk-scale training loop over synthetic scenes."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..attention import build_mask, mean_entropy
from ..denoising import NoiseConfig, NoisyDraw, VariationalParams, draw_noisy_sets, embed_draw, kl_loss
from ..kitti_io import Object3D, Scene
from ..matching import Assignment, MatchingConfig, SchedulerConfig, TargetSet, build_cost_matrix, hungarian
from ..numeric import Adam, NonFiniteError, Tensor, no_grad, ops
from .config import VARIANTS, DecoderConfig, TrainConfig
from .decoder import LayerOutput, Mono3DV, decode_boxes, prediction_set, to_detections
from .losses import detection_loss, distillation_loss, iou_weights, overall_loss, reconstruction_loss

log = logging.getLogger(__name__)

PART_NAMES = {"det": "L_det", "res": "L_res", "kl": "L_KL", "dis": "L_dis"}
METRIC_FIELDS = ["epoch", "lr", "L_total", "L_det", "L_res", "L_KL", "L_dis", "entropy", "assignment_flip_count",
                 "entropy_n2l"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class VariantFlags:
    denoise: bool = True
    variational: bool = True
    match_3d: bool = True
    distill: bool = True

    @classmethod
    def of(cls, name: str) -> "VariantFlags":
        if name not in VARIANTS:
            raise ValueError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
        return {
            "full": cls(),
            "ae": cls(variational=False),
            "no-dn": cls(denoise=False, variational=False),
            "no-3dm": cls(match_3d=False),
            "no-fld": cls(distill=False),
        }[name]


@dataclass
class FixedTargets:
    """Everything a loss evaluation needs that is decided outside the differentiable path."""

    assignments: list[Assignment]
    rows_l: np.ndarray  # matched learnable rows across all groups
    targets_l: TargetSet
    targets_n: TargetSet | None
    iou_l: np.ndarray
    iou_n: np.ndarray | None
    gamma: float = 0.0
    # Frozen distillation targets; None means the live stop-gradient rows are used.
    dis_l: np.ndarray | None = None
    dis_n: np.ndarray | None = None


def build_model(cfg: DecoderConfig, seed: int, variational: bool = True) -> Mono3DV:
    return Mono3DV(cfg, np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0]), variational)


def scene_features(scene: Scene, cfg: DecoderConfig) -> np.ndarray:
    return scene.features(cfg.feat_tokens, cfg.dim)


@dataclass
class SceneForward:
    outs: list[LayerOutput]
    vparams: list[VariationalParams]  # one per group when the noisy track is variational


def forward_scene(model: Mono3DV, scene: Scene, draw: NoisyDraw | None, rng_l=None, rng_n=None,
                  record: bool = False, epoch: int = 0) -> SceneForward:
    cfg = model.cfg
    noisy = mask = None
    if draw is not None and not draw.empty:
        noisy = embed_draw(draw, model.embedder)
        mask = build_mask(draw.K, draw.C, cfg.N)
    outs = model.forward(scene_features(scene, cfg), noisy, mask, rng_l, rng_n, record, epoch)
    return SceneForward(outs, noisy.params if noisy is not None else [])


def match_groups(model: Mono3DV, outs: list[LayerOutput], gts: TargetSet, epoch: int,
                 match_cfg: MatchingConfig) -> tuple[list[Assignment], float]:
    N = model.cfg.N
    last = outs[-1].preds_l
    result, g = [], 0.0
    for grp in range(model.cfg.G):
        ps = prediction_set(last, slice(grp * N, (grp + 1) * N))
        cm = build_cost_matrix(ps, gts, epoch, match_cfg)
        g = cm.gamma
        result.append(hungarian(cm))
    return result, g


def fix_targets(model: Mono3DV, scene: Scene, outs: list[LayerOutput], draw: NoisyDraw | None, epoch: int,
                match_cfg: MatchingConfig, freeze_distillation: bool = False) -> FixedTargets:
    cfg = model.cfg
    gts = TargetSet.from_objects(scene.objects, cfg.categories)
    assigns, gamma_t = match_groups(model, outs, gts, epoch, match_cfg)
    rows = np.concatenate([a.pred_indices + g * cfg.N for g, a in enumerate(assigns)]).astype(int)
    gt_idx = np.concatenate([a.gt_indices for a in assigns]).astype(int)
    targets_l = gts.take(gt_idx)
    gt_boxes = [o.box3d for o in scene.objects]
    pred_l = decode_boxes(prediction_set(outs[-1].preds_l, rows), scene.calib, scene.image_size)
    iou_l = iou_weights(pred_l, [gt_boxes[i] for i in gt_idx])
    targets_n = iou_n = None
    if draw is not None and not draw.empty:
        n_idx = np.tile(draw.target_index, draw.G)
        targets_n = gts.take(n_idx)
        pred_n = decode_boxes(prediction_set(outs[-1].preds_n), scene.calib, scene.image_size)
        iou_n = iou_weights(pred_n, [gt_boxes[i] for i in n_idx])
    fixed = FixedTargets(assigns, rows, targets_l, targets_n, iou_l, iou_n, gamma_t)
    if freeze_distillation:
        fixed.dis_l = outs[-1].q_l.data[rows].copy()
        if outs[-1].q_n is not None:
            fixed.dis_n = outs[-1].q_n.data.copy()
    return fixed


def scene_loss(model: Mono3DV, fwd: SceneForward, fixed: FixedTargets, flags: VariantFlags,
               tcfg: TrainConfig) -> tuple[Tensor, dict[str, float]]:
    cfg = model.cfg
    outs = fwd.outs
    last = outs[-1]
    K = len(fixed.assignments[0].pairs)
    parts: dict[str, Tensor] = {}
    matched = Assignment(list(zip(fixed.rows_l.tolist(), range(len(fixed.rows_l)))), [], 0.0)
    parts["det"], _ = detection_loss(last.preds_l, matched, fixed.targets_l, cfg.n_classes, tcfg.set_loss,
                                     norm=float(cfg.G * max(K, 1)))
    dn = last.preds_n is not None
    if dn:
        parts["res"], _ = reconstruction_loss(last.preds_n, fixed.targets_n, cfg.n_classes, tcfg.set_loss)
        if fwd.vparams:
            kls = [kl_loss(p) for p in fwd.vparams]
            parts["kl"] = ops.scale(_total(kls), 1.0 / len(kls))
    if flags.distill and tcfg.loss.lambda3 > 0:
        terms = [distillation_loss([o.q_l for o in outs], model.f_q, fixed.rows_l, fixed.iou_l, 1.0, fixed.dis_l)]
        rows = len(fixed.rows_l)
        if dn:
            rows_n = np.arange(last.q_n.shape[0])
            terms.append(distillation_loss([o.q_n for o in outs], model.f_q, rows_n, fixed.iou_n, 1.0,
                                           fixed.dis_n))
            rows += len(rows_n)
        # Averaged over every participating query, learnable and noisy alike.
        parts["dis"] = ops.scale(_total(terms), 1.0 / max(rows, 1))
    total = overall_loss(parts, tcfg.loss)
    return total, {k: float(v.data) for k, v in parts.items()}


def _total(terms: list[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = ops.add(out, t)
    return out


@dataclass
class TrainResult:
    model: Mono3DV
    metrics: list[dict]
    assignments: list[tuple]  # (epoch, step, scene index, group, pairs)
    step_losses: list[dict] = field(default_factory=list)
    layer_entropy: list[list[float]] = field(default_factory=list)


def _grad_norm_clip(params, max_norm: float) -> None:
    total = np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if total > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad *= max_norm / total


def train(scenes: Sequence[Scene], cfg: DecoderConfig, tcfg: TrainConfig, variant: str = "full",
          out_dir: str | Path | None = None, zero_3d: bool | None = None) -> TrainResult:
    """Train on ``scenes`` for ``tcfg.epochs`` passes, one optimiser step per batch of scenes.

    ``zero_3d`` forces the 3D matching cost off regardless of the variant,
    which is how a 2D-only reference run is produced.
    """
    if not scenes:
        raise ValueError("train needs at least one scene")
    flags = VariantFlags.of(variant)
    seeds = np.random.SeedSequence(tcfg.seed).spawn(5)
    model = Mono3DV(cfg, np.random.default_rng(seeds[0]), flags.variational)
    rng_noise, rng_l, rng_n, rng_order = (np.random.default_rng(s) for s in seeds[1:])
    if cfg.dropout == 0:
        rng_l = rng_n = None
    params = model.parameters()
    opt = Adam(params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    match_cfg = MatchingConfig(SchedulerConfig(tcfg.epsilon, tcfg.trigger_epoch), categories=cfg.categories,
                               num_bins=cfg.num_bins,
                               zero_3d=(not flags.match_3d) if zero_3d is None else zero_3d)
    noise_cfg = NoiseConfig(tcfg.lambda_C, tcfg.lambda_D, cfg.C, tcfg.seed, cfg.categories, cfg.num_bins)
    metrics, assign_log, step_log, layer_ent = [], [], [], []
    previous: dict[tuple[int, int], tuple] = {}
    step = 0
    for epoch in range(tcfg.epochs):
        opt.lr = tcfg.lr_at(epoch)
        sums = {k: 0.0 for k in ("L_total", "det", "res", "kl", "dis")}
        ents, ents_n2l, per_layer, flips = [], [], [[] for _ in range(cfg.layers)], 0
        order = [int(i) for i in rng_order.permutation(len(scenes)) if scenes[int(i)].K > 0]
        for b0 in range(0, len(order), tcfg.batch_size):
            batch = order[b0:b0 + tcfg.batch_size]
            opt.zero_grad()
            step_parts: dict[str, float] = {}
            step_total = 0.0
            for si in batch:
                scene = scenes[si]
                draw = None
                if flags.denoise:
                    draw = draw_noisy_sets(scene, cfg.G, noise_cfg, rng_noise, cfg.dim if flags.variational else None)
                try:
                    fwd = forward_scene(model, scene, draw, rng_l, rng_n, record=True, epoch=epoch)
                    with no_grad():
                        fixed = fix_targets(model, scene, fwd.outs, draw, epoch, match_cfg)
                    loss, parts = scene_loss(model, fwd, fixed, flags, tcfg)
                    # Gradients accumulate over the batch as a mean.
                    ops.scale(loss, 1.0 / len(batch)).backward()
                except NonFiniteError as exc:
                    _dump_divergence(out_dir, epoch, step, si, str(exc), metrics)
                    raise TrainingDiverged(f"non-finite value at epoch {epoch}, step {step}: {exc}") from exc
                for g, a in enumerate(fixed.assignments):
                    key = tuple(a.pairs)
                    assign_log.append((epoch, step, si, g, key))
                    if (si, g) in previous and previous[(si, g)] != key:
                        flips += 1
                    previous[(si, g)] = key
                recs = [r for o in fwd.outs for r in o.records]
                ents.append(mean_entropy(recs))
                noisy_recs = [r for r in recs if r.K * r.C > 0]
                if noisy_recs:
                    ents_n2l.append(mean_entropy(noisy_recs, "noisy_to_learnable"))
                for li, o in enumerate(fwd.outs):
                    per_layer[li].append(mean_entropy(o.records))
                sums["L_total"] += float(loss.data)
                for k in ("det", "res", "kl", "dis"):
                    sums[k] += parts.get(k, 0.0)
                step_total += float(loss.data) / len(batch)
                for k, v in parts.items():
                    name = PART_NAMES[k]
                    step_parts[name] = step_parts.get(name, 0.0) + v / len(batch)
            if tcfg.grad_clip:
                _grad_norm_clip(params, tcfg.grad_clip)
            opt.step()
            step_log.append({"epoch": epoch, "step": step, "scenes": batch, "L_total": step_total, **step_parts})
            step += 1
        n = max(len(ents), 1)
        row = {"epoch": epoch, "lr": opt.lr, "L_total": sums["L_total"] / n, "L_det": sums["det"] / n,
               "L_res": sums["res"] / n, "L_KL": sums["kl"] / n, "L_dis": sums["dis"] / n,
               "entropy": float(np.mean(ents)) if ents else float("nan"), "assignment_flip_count": flips,
               "entropy_n2l": float(np.mean(ents_n2l)) if ents_n2l else float("nan")}
        for li in range(cfg.layers):
            row[f"entropy_layer_{li}"] = float(np.mean(per_layer[li])) if per_layer[li] else float("nan")
        layer_ent.append([row[f"entropy_layer_{li}"] for li in range(cfg.layers)])
        metrics.append(row)
        log.debug("epoch %d: %s", epoch, row)
    result = TrainResult(model, metrics, assign_log, step_log, layer_ent)
    if out_dir is not None:
        save_run(result, out_dir, cfg, tcfg, variant, len(scenes))
    return result


def _dump_divergence(out_dir, epoch, step, scene, message, metrics) -> None:
    if out_dir is None:
        return
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    (path / "divergence.json").write_text(json.dumps(
        {"epoch": epoch, "step": step, "scene": scene, "error": message, "metrics_so_far": metrics}, indent=1))


def save_run(result: TrainResult, out_dir: str | Path, cfg: DecoderConfig, tcfg: TrainConfig, variant: str,
             n_scenes: int) -> None:
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    fields = METRIC_FIELDS + [f"entropy_layer_{i}" for i in range(cfg.layers)]
    with open(path / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in result.metrics:
            w.writerow({k: row.get(k, "") for k in fields})
    manifest = {
        "variant": variant,
        "entropy_variant": "VAE" if VariantFlags.of(variant).variational else "AE",
        "seed": tcfg.seed,
        "scenes": n_scenes,
        "decoder": asdict(cfg),
        "train": asdict(tcfg),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, default=list))
    np.savez(path / "weights.npz", **{k: v.data for k, v in result.model.named_parameters().items()})


def predict(model: Mono3DV, scene: Scene, tau: float = 0.2) -> list[Object3D]:
    """Inference on group 0 only; detections below ``tau`` are dropped."""
    from ..evaluation import filter_by_confidence
    with no_grad():
        outs = model.forward(scene_features(scene, model.cfg))
    ps = prediction_set(outs[-1].preds_l, slice(0, model.cfg.N))
    return filter_by_confidence(to_detections(ps, model.cfg.categories, scene.calib, scene.image_size), tau)
