"""3D noisy queries: ground-truth perturbation, noisy-box embedding, variational sampling and its KL term."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .kitti_io import DEFAULT_NUM_BINS, Object3D, Scene
from .numeric import MLP, Linear, Module, Tensor, ops, param

LOG_VAR_RANGE = (-10.0, 10.0)


@dataclass(frozen=True)
class NoiseConfig:
    lambda_C: float = 0.4
    lambda_D: float = 0.2
    C: int = 5
    seed: int = 0
    categories: tuple[str, ...] = ("Car", "Pedestrian", "Cyclist")
    num_bins: int = DEFAULT_NUM_BINS

    def __post_init__(self):
        if self.lambda_C < 0:
            raise ValueError("lambda_C must be >= 0")
        if not 0.0 <= self.lambda_D <= 1.0:
            raise ValueError("lambda_D must lie in [0, 1]")
        if self.C < 1:
            raise ValueError("C must be >= 1")


@dataclass(frozen=True)
class NoisyObject:
    category: str
    center_proj: tuple[float, float]
    lrtb: tuple[float, float, float, float]
    dims: tuple[float, float, float]
    depth: float
    orientation_bin: int
    orientation_residual: float
    source: int = 0  # index of the ground truth this was drawn from

    @property
    def anchor6d(self) -> np.ndarray:
        return np.array([*self.center_proj, *self.lrtb], dtype=np.float64)


def _flip(rng: np.random.Generator, value: int, n: int, rate: float) -> int:
    # Both draws always happen so the stream position does not depend on the outcome.
    hit = rng.random() < rate
    other = int(rng.integers(n - 1)) if n > 1 else 0
    if not hit or n < 2:
        return value
    return other + 1 if other >= value else other


def perturb(gt: Object3D, cfg: NoiseConfig, rng: np.random.Generator, source: int = 0) -> NoisyObject:
    lam = cfg.lambda_C
    u = rng.uniform(-1.0, 1.0, size=10)
    xc, yc = gt.center_proj
    l, r, t, b = gt.box2d.l, gt.box2d.r, gt.box2d.t, gt.box2d.b
    xn = xc + lam * u[0] * (r + l) / 2
    yn = yc + lam * u[1] * (t + b) / 2
    lrtb = tuple(float(np.clip(v * (1 + lam * ui), 0.0, 1.0)) for v, ui in zip((l, r, t, b), u[2:6]))
    dims = tuple(float(d * (1 + lam * ui)) for d, ui in zip(gt.dims, u[6:9]))
    depth = gt.depth + lam * u[9] * gt.dims[0] / 2
    cats = list(cfg.categories)
    if gt.category not in cats:
        raise ValueError(f"category {gt.category!r} not in the noise vocabulary {cats}")
    cat = cats[_flip(rng, cats.index(gt.category), len(cats), cfg.lambda_D)]
    k = _flip(rng, gt.orientation_bin, cfg.num_bins, cfg.lambda_D)
    return NoisyObject(cat, (float(xn), float(yn)), lrtb, dims, float(depth), k, gt.orientation_residual, source)


def sinusoidal_encoding(values: np.ndarray, dim: int, temperature: float = 10000.0) -> np.ndarray:
    """Encode each scalar into ``dim`` features, interleaved (sin, cos) per frequency."""
    if dim % 2:
        raise ValueError("sinusoidal width must be even")
    values = np.asarray(values, dtype=np.float64)
    freqs = temperature ** (2 * np.arange(dim // 2) / dim)
    phase = values[..., None] / freqs
    out = np.empty(values.shape + (dim,))
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out


@dataclass
class VariationalParams:
    mu: Tensor
    log_var: Tensor


def variational_sample(params: VariationalParams, rng: np.random.Generator | None = None,
                       eps: np.ndarray | None = None) -> Tensor:
    """Reparameterised draw; ``eps`` may be supplied to replay a sample exactly."""
    if eps is None:
        eps = rng.standard_normal(params.mu.shape)
    return ops.gaussian_sample(params.mu, params.log_var, eps)


def kl_loss(params: VariationalParams) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over features, averaged over queries."""
    mu, lv = params.mu, params.log_var
    per_dim = ops.sub(ops.add(ops.mul(mu, mu), ops.exp(lv)), ops.add(lv, 1.0))
    rows = ops.sum(per_dim, axis=-1)
    return ops.scale(ops.mean(rows), 0.5)


class NoisyQueryEmbedder(Module):
    """Sinusoidal 3D attributes + category/bin tables -> 3-layer MLP, with optional mu/log-var heads."""

    def __init__(self, dim: int, categories: Sequence[str], num_bins: int, rng: np.random.Generator,
                 variational: bool = True, mlp_layers: int = 3):
        if dim % 8:
            raise ValueError("query width must be divisible by 8")
        self.dim = dim
        self.categories = tuple(categories)
        self.num_bins = num_bins
        self.variational = variational
        self.cat_table = param(rng.normal(0.0, 1.0, size=(len(categories), dim // 4)))
        self.bin_table = param(rng.normal(0.0, 1.0, size=(num_bins, dim // 4)))
        in_dim = dim + dim // 2
        self.mlp = MLP([in_dim] + [dim] * mlp_layers, rng)
        if variational:
            self.mu_head = Linear(dim, dim, rng)
            # Start near unit variance so the first samples are not dominated by noise scale.
            self.log_var_head = Linear(dim, dim, rng, weight_scale=0.1)

    def features(self, objs: Sequence[NoisyObject]) -> np.ndarray:
        scalars = np.array([[o.dims[0], o.dims[2], o.dims[1], o.depth] for o in objs], dtype=np.float64)
        enc = sinusoidal_encoding(scalars, self.dim // 4)
        return enc.reshape(len(objs), self.dim)

    def embed(self, objs: Sequence[NoisyObject]) -> Tensor:
        cats = [self.categories.index(o.category) for o in objs]
        bins = [o.orientation_bin for o in objs]
        x = ops.concat([Tensor(self.features(objs)), ops.embedding(self.cat_table, cats),
                        ops.embedding(self.bin_table, bins)], axis=-1)
        return self.mlp(x)

    def params(self, h: Tensor) -> VariationalParams:
        return VariationalParams(self.mu_head(h), ops.clamp(self.log_var_head(h), *LOG_VAR_RANGE))

    def __call__(self, objs: Sequence[NoisyObject], eps: np.ndarray | None = None):
        """Return ``(queries, params)``; ``params`` is None in autoencoder mode."""
        h = self.embed(objs)
        if not self.variational:
            return h, None
        p = self.params(h)
        if eps is None:
            raise ValueError("variational mode needs eps")
        return variational_sample(p, eps=eps), p


@dataclass
class NoisyDraw:
    """Perturbed ground truth for one scene, grouped as (G, C*K) in row order j*K + k."""

    objects: list[list[NoisyObject]]
    anchors: np.ndarray  # (G, C*K, 6)
    target_index: np.ndarray  # (C*K,) gt index per row, identical across groups
    eps: np.ndarray | None = None  # (G, C*K, D) when variational
    G: int = 1
    C: int = 1
    K: int = 0

    @property
    def empty(self) -> bool:
        return self.K == 0


def draw_noisy_sets(scene: Scene, G: int, cfg: NoiseConfig, rng: np.random.Generator,
                    eps_dim: int | None = None) -> NoisyDraw:
    K, C = scene.K, cfg.C
    if K == 0:
        return NoisyDraw([], np.zeros((G, 0, 6)), np.zeros(0, dtype=int), None, G, C, 0)
    groups = []
    for _ in range(G):
        groups.append([perturb(scene.objects[k], cfg, rng, k) for _ in range(C) for k in range(K)])
    anchors = np.array([[o.anchor6d for o in g] for g in groups])
    eps = rng.standard_normal((G, C * K, eps_dim)) if eps_dim else None
    return NoisyDraw(groups, anchors, np.tile(np.arange(K), C), eps, G, C, K)


@dataclass
class NoisyQuerySet:
    queries: Tensor | None  # (G, C*K, D)
    draw: NoisyDraw
    params: list[VariationalParams] = field(default_factory=list)

    def targets(self, scene: Scene) -> list[Object3D]:
        return [scene.objects[k] for k in self.draw.target_index]


def embed_draw(draw: NoisyDraw, embedder: NoisyQueryEmbedder) -> NoisyQuerySet:
    if draw.empty:
        return NoisyQuerySet(None, draw)
    qs, ps = [], []
    for g, objs in enumerate(draw.objects):
        q, p = embedder(objs, None if draw.eps is None else draw.eps[g])
        qs.append(q)
        if p is not None:
            ps.append(p)
    return NoisyQuerySet(ops.stack(qs, axis=0), draw, ps)


def make_noisy_query_sets(scene: Scene, G: int, C: int, cfg: NoiseConfig, variational: bool,
                          embedder: NoisyQueryEmbedder | None = None,
                          rng: np.random.Generator | None = None) -> NoisyQuerySet:
    if C != cfg.C:
        cfg = NoiseConfig(cfg.lambda_C, cfg.lambda_D, C, cfg.seed, cfg.categories, cfg.num_bins)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if embedder is None:
        embedder = NoisyQueryEmbedder(256, cfg.categories, cfg.num_bins, np.random.default_rng(cfg.seed),
                                      variational=variational)
    if embedder.variational != variational:
        raise ValueError("embedder mode does not match the variational flag")
    draw = draw_noisy_sets(scene, G, cfg, rng, embedder.dim if variational else None)
    return embed_draw(draw, embedder)


def noisy_object_to_dict(o: NoisyObject) -> dict:
    return {
        "category": o.category, "center_proj": list(o.center_proj), "lrtb": list(o.lrtb), "dims": list(o.dims),
        "depth": o.depth, "orientation_bin": o.orientation_bin, "orientation_residual": o.orientation_residual,
        "source": o.source, "anchor6d": o.anchor6d.tolist(),
    }


def depth_noise_bound(gt: Object3D, cfg: NoiseConfig) -> float:
    return cfg.lambda_C * gt.dims[0] / 2

