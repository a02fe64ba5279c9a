"""Finite-difference gradient suite: individual ops and the full desk decoder loss."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ..denoising import NoiseConfig, draw_noisy_sets
from ..kitti_io import generate_scene
from ..matching import MatchingConfig
from ..numeric import Tensor, analytic_gradients, check_gradients, no_grad, ops, replay_numeric_gradients
from .config import TrainConfig, desk_decoder
from .decoder import Mono3DV
from .train import VariantFlags, fix_targets, forward_scene, scene_loss


def _rand(rng, *shape):
    return Tensor(rng.uniform(-2, 2, size=shape), requires_grad=True)


UNARY = {
    "exp": ops.exp,
    "tanh": ops.tanh,
    "sigmoid": ops.sigmoid,
    "gelu": ops.gelu,
    "softmax": ops.softmax,
    "log_softmax": ops.log_softmax,
    "masked_softmax": lambda x: ops.masked_softmax(x, np.array([False, True, False, False])),
    "power3": lambda x: ops.power(x, 3.0),
    "mean_axis": lambda x: ops.mean(x, axis=0),
}

BINARY = {
    "add": ops.add,
    "mul": ops.mul,
    "div": lambda a, b: ops.div(a, ops.add(ops.abs(b), 1.0)),
    "smooth_l1": ops.smooth_l1,
    "matmul": lambda a, b: ops.matmul(a, ops.transpose(b)),
    "concat": lambda a, b: ops.concat([a, b], axis=0),
}


def op_suite(seed: int = 0) -> dict[str, float]:
    """Max relative error per op at random inputs in [-2, 2]."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, fn in UNARY.items():
        x = _rand(rng, 3, 4)
        w = rng.normal(size=fn(Tensor(x.data)).shape)
        out[name] = check_gradients(lambda: ops.sum(ops.mul(fn(x), w)), [x])
    for name, fn in BINARY.items():
        a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
        w = rng.normal(size=fn(Tensor(a.data), Tensor(b.data)).shape)
        out[name] = check_gradients(lambda: ops.sum(ops.mul(fn(a, b), w)), [a, b])
    x, g, b = _rand(rng, 3, 6), _rand(rng, 6), _rand(rng, 6)
    w = rng.normal(size=(3, 6))
    out["layernorm"] = check_gradients(lambda: ops.sum(ops.mul(ops.layernorm(x, g, b), w)), [x, g, b])
    logits = _rand(rng, 5, 4)
    labels = np.array([0, 3, 1, 3, 2])
    out["focal_loss"] = check_gradients(lambda: ops.sum(ops.focal_loss(logits, labels)), [logits])
    mu, lv = _rand(rng, 4, 3), _rand(rng, 4, 3)
    eps = rng.normal(size=(4, 3))
    out["gaussian_sample"] = check_gradients(
        lambda: ops.sum(ops.power(ops.gaussian_sample(mu, lv, eps), 2.0)), [mu, lv])
    return out


@dataclass
class DecoderCheck:
    max_rel_error: float  # |analytic - numeric| / max(1, |numeric|)
    max_abs_error: float
    worst_parameter: str
    parameters: int
    seconds: float


def decoder_gradcheck(seed: int = 0, scene_seed: int = 1, eps: float = 1e-6) -> DecoderCheck:
    """Full training loss of the desk decoder (D=16, F=8, N=4, G=2, C=2) on a 2-object scene.

    Assignments, IoU weights and distillation targets are fixed once at the
    unperturbed point so the loss is a smooth function of every parameter.
    """
    start = time.perf_counter()
    cfg = desk_decoder(dim=16, ffn_dim=16, G=2, C=2, N=4, feat_tokens=8, dropout=0.0)
    scene = generate_scene(scene_seed, 2)
    model = Mono3DV(cfg, np.random.default_rng(seed), True)
    draw = draw_noisy_sets(scene, cfg.G, NoiseConfig(C=cfg.C, categories=cfg.categories),
                           np.random.default_rng(seed + 1), cfg.dim)
    tcfg = TrainConfig()
    with no_grad():
        fwd = forward_scene(model, scene, draw)
        fixed = fix_targets(model, scene, fwd.outs, draw, tcfg.trigger_epoch,
                            MatchingConfig(categories=cfg.categories), freeze_distillation=True)
    flags = VariantFlags.of("full")

    def f():
        return scene_loss(model, forward_scene(model, scene, draw), fixed, flags, tcfg)[0]

    named = model.named_parameters()
    params = list(named.values())
    analytic = analytic_gradients(f, params)
    numeric = replay_numeric_gradients(f, params, eps)
    worst, worst_abs, worst_name = 0.0, 0.0, ""
    for name, a, n in zip(named, analytic, numeric):
        if not a.size:
            continue
        rel = float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n))))
        worst_abs = max(worst_abs, float(np.max(np.abs(a - n))))
        if rel >= worst:
            worst, worst_name = rel, name
    return DecoderCheck(worst, worst_abs, worst_name, int(sum(p.size for p in params)),
                        time.perf_counter() - start)
