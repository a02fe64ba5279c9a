"""Toy detection decoder: grouped learnable queries, optional noisy queries, shared prediction heads."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..attention import AttentionMask, AttentionRecord, SelfAttention, masked_grouped_attention
from ..denoising import NoisyQueryEmbedder, NoisyQuerySet
from ..geometry import Box3D, Calibration, unproject_center
from ..kitti_io import CATEGORY_DIMS, Object3D, bin_to_yaw, make_object
from ..matching import PredictionSet
from ..numeric import MLP, LayerNorm, Linear, Module, Tensor, ops, param
from ..numeric.tensor import grad_enabled
from .config import DecoderConfig

CLS_PRIOR = 0.01
HEAD_KEYS = ("logits", "center", "lrtb", "dims", "depth", "bin_logits", "residual")


class CrossAttention(Module):
    """Multi-head attention from queries onto the scene feature tokens (learned per-token key bias)."""

    def __init__(self, dim: int, heads: int, tokens: int, rng: np.random.Generator):
        self.heads = heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self.token_bias = param(rng.normal(0.0, 0.02, size=(tokens, dim)))

    def memory(self, feats: Tensor):
        F, D = feats.shape
        dh = D // self.heads
        k = ops.reshape(self.wk(ops.add(feats, self.token_bias)), (F, self.heads, dh))
        v = ops.reshape(self.wv(feats), (F, self.heads, dh))
        return ops.transpose(k, (1, 2, 0)), ops.transpose(v, (1, 0, 2))  # (H, dh, F), (H, F, dh)

    def __call__(self, x: Tensor, memory) -> Tensor:
        kT, v = memory
        T, D = x.shape
        dh = D // self.heads
        q = ops.transpose(ops.reshape(self.wq(x), (T, self.heads, dh)), (1, 0, 2))
        a = ops.softmax(ops.scale(ops.matmul(q, kT), 1.0 / math.sqrt(dh)), axis=-1)
        out = ops.reshape(ops.transpose(ops.matmul(a, v), (1, 0, 2)), (T, D))
        return self.wo(out)


class DecoderLayer(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        self.self_attn = SelfAttention(cfg.dim, cfg.heads, rng)
        self.norm1 = LayerNorm(cfg.dim)
        self.cross = CrossAttention(cfg.dim, cfg.heads, cfg.feat_tokens, rng)
        self.norm2 = LayerNorm(cfg.dim)
        self.ffn = MLP([cfg.dim, cfg.ffn_dim, cfg.dim], rng)
        self.norm3 = LayerNorm(cfg.dim)


class Heads(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        D = cfg.dim
        mean_dims = np.mean([CATEGORY_DIMS[c] for c in cfg.categories if c in CATEGORY_DIMS], axis=0)
        # Background logit starts high so each foreground class begins at probability CLS_PRIOR.
        cls_bias = np.zeros(cfg.n_classes + 1)
        cls_bias[-1] = math.log(1.0 / CLS_PRIOR - cfg.n_classes)
        self.cls = Linear(D, cfg.n_classes + 1, rng, bias_init=cls_bias)
        self.center = Linear(D, 2, rng, weight_scale=0.1)
        self.lrtb = Linear(D, 4, rng, weight_scale=0.1)
        self.dims = Linear(D, 3, rng, bias_init=np.log(mean_dims), weight_scale=0.1)
        self.depth = Linear(D, 1, rng, bias_init=math.log(20.0), weight_scale=0.1)
        self.bins = Linear(D, cfg.num_bins, rng)
        self.residual = Linear(D, cfg.num_bins, rng, weight_scale=0.1)

    def __call__(self, x: Tensor, ref: Tensor) -> dict[str, Tensor]:
        """``ref`` is the (T, 6) reference box in logit space; centre and edges are offsets from it."""
        return {
            "logits": self.cls(x),
            "center": ops.sigmoid(ops.add(self.center(x), ops.index(ref, (slice(None), slice(0, 2))))),
            "lrtb": ops.sigmoid(ops.add(self.lrtb(x), ops.index(ref, (slice(None), slice(2, 6))))),
            "dims": ops.exp(self.dims(x)),
            "depth": ops.reshape(ops.exp(self.depth(x)), (x.shape[0],)),
            "bin_logits": self.bins(x),
            "residual": self.residual(x),
        }


@dataclass
class LayerOutput:
    """Per-layer queries; head predictions are computed on first access."""

    q_l: Tensor  # (G*N, D)
    heads: Heads
    ref_l: Tensor  # (G*N, 6) reference boxes in logit space
    q_n: Tensor | None = None  # (G*C*K, D), rows ordered group-major
    ref_n: Tensor | None = None
    records: list[AttentionRecord] = field(default_factory=list)
    _cache: dict = field(default_factory=dict, repr=False)

    def _preds(self, track: str, q: Tensor | None, ref: Tensor | None):
        if q is None:
            return None
        # Predictions made under no_grad carry no graph, so they are cached apart.
        key = (track, grad_enabled())
        if key not in self._cache:
            self._cache[key] = self.heads(q, ref)
        return self._cache[key]

    @property
    def preds_l(self) -> dict[str, Tensor]:
        return self._preds("l", self.q_l, self.ref_l)

    @property
    def preds_n(self) -> dict[str, Tensor] | None:
        return self._preds("n", self.q_n, self.ref_n)


class Mono3DV(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator, variational: bool = True):
        self.cfg = cfg
        D = cfg.dim
        self.queries = param(rng.normal(0.0, 1.0, size=(cfg.G * cfg.N, D)))
        # Reference boxes in logit space: centres spread over the image, edges starting small.
        self.anchor_logits = param(np.concatenate([rng.normal(0.0, 1.0, size=(cfg.G * cfg.N, 2)),
                                                   rng.normal(-3.0, 0.5, size=(cfg.G * cfg.N, 4))], axis=1))
        self.pos = Linear(6, D, rng)
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.layers)]
        self.heads = Heads(cfg, rng)
        self.embedder = NoisyQueryEmbedder(D, cfg.categories, cfg.num_bins, rng, variational, cfg.embed_layers)
        self.f_q = MLP([D] * (cfg.fq_layers + 1), rng)

    def _block(self, layer: DecoderLayer, x: Tensor, memory, rng) -> Tensor:
        p = self.cfg.dropout
        x = layer.norm2(ops.add(x, ops.dropout(layer.cross(x, memory), p, rng)))
        return layer.norm3(ops.add(x, ops.dropout(layer.ffn(x), p, rng)))

    def forward(self, feats: np.ndarray, noisy: NoisyQuerySet | None = None, mask: AttentionMask | None = None,
                rng_l: np.random.Generator | None = None, rng_n: np.random.Generator | None = None,
                record: bool = False, epoch: int = 0) -> list[LayerOutput]:
        """Run all decoder layers; the learnable and noisy tracks never share per-token arithmetic."""
        cfg = self.cfg
        G, D, p = cfg.G, cfg.dim, cfg.dropout
        feats = Tensor(np.asarray(feats, dtype=np.float64))
        if feats.shape != (cfg.feat_tokens, D):
            raise ValueError(f"features must be ({cfg.feat_tokens}, {D}), got {feats.shape}")
        x_l = self.queries
        pos_l = self.pos(ops.sigmoid(self.anchor_logits))
        x_n = pos_n = ref_n = None
        if noisy is not None and noisy.queries is not None:
            x_n = noisy.queries
            anchors = noisy.draw.anchors
            pos_n = self.pos(Tensor(anchors))
            ref_n = Tensor(_logit(anchors.reshape(-1, 6)))
        outs = []
        for li, layer in enumerate(self.layers):
            memory = layer.cross.memory(feats)
            sa_n, sa_l, recs = masked_grouped_attention(x_l, x_n, mask if x_n is not None else None,
                                                        layer.self_attn, G, pos_l, pos_n, li, epoch, record)
            x_l = layer.norm1(ops.add(x_l, ops.dropout(sa_l, p, rng_l)))
            x_l = self._block(layer, x_l, memory, rng_l)
            flat_n = None
            if x_n is not None:
                x_n = layer.norm1(ops.add(x_n, ops.dropout(sa_n, p, rng_n)))
                flat_n = self._block(layer, ops.reshape(x_n, (-1, D)), memory, rng_n)
                x_n = ops.reshape(flat_n, (G, -1, D))
            outs.append(LayerOutput(x_l, self.heads, self.anchor_logits, flat_n, ref_n, recs))
        return outs


def _logit(p: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    p = np.clip(p, eps, 1.0 - eps)
    return np.log(p / (1.0 - p))


# -- decoding predictions -----------------------------------------------------------

def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def prediction_set(preds: dict[str, Tensor], rows=None) -> PredictionSet:
    """Numpy view of head outputs for matching.

    Class probabilities come from the softmax that includes the background
    slot, so rows sum to at most 1 over the foreground categories.
    """
    d = {k: v.data if rows is None else v.data[rows] for k, v in preds.items()}
    probs = _softmax(d["logits"])[:, :-1]
    return PredictionSet(probs, d["center"], d["lrtb"], d["dims"], d["depth"], _softmax(d["bin_logits"]),
                         d["residual"])


def decode_boxes(ps: PredictionSet, calib: Calibration, image_size) -> list[Box3D]:
    boxes = []
    for i in range(len(ps)):
        k = int(np.argmax(ps.bin_probs[i]))
        yaw = bin_to_yaw(k, float(ps.residual[i, k]), ps.bin_probs.shape[1])
        center = unproject_center(float(ps.center[i, 0]), float(ps.center[i, 1]), float(ps.depth[i]), calib,
                                  image_size)
        boxes.append(Box3D(center, tuple(float(v) for v in ps.dims[i]), yaw))
    return boxes


def to_detections(ps: PredictionSet, categories, calib: Calibration, image_size) -> list[Object3D]:
    """Turn decoded predictions into scored objects (score = best foreground probability)."""
    W, H = image_size
    out = []
    for i, box in enumerate(decode_boxes(ps, calib, image_size)):
        c = int(np.argmax(ps.class_probs[i]))
        xc, yc = ps.center[i]
        l, r, t, b = ps.lrtb[i]
        x, y, z = box.center
        bbox = ((xc - l) * W, (yc - t) * H, (xc + r) * W, (yc + b) * H)
        obj = make_object(categories[c], (x, y + box.dims[2] / 2, z), box.dims, box.yaw, bbox, calib, image_size,
                          ps.bin_probs.shape[1], score=float(ps.class_probs[i, c]))
        out.append(obj)
    return out
