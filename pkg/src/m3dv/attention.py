"""Mask Separated Self-Attention over grouped noisy + learnable queries, and attention diagnostics.

Within each group the sequence is ``[noisy (C*K rows) | learnable (N rows)]``.
The forward keeps the two tracks as separate tensors and evaluates every
product blockwise, so the learnable rows go through exactly the same
floating-point operations with or without noisy queries present. That is what
makes the mask isolation bit-exact rather than merely close.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .numeric import Linear, Module, ShapeError, Tensor, no_grad, ops


@dataclass(frozen=True)
class AttentionMask:
    M: np.ndarray  # (S, S) bool, True = blocked
    K: int
    C: int
    N: int

    @property
    def S(self) -> int:
        return self.K * self.C + self.N

    @property
    def noisy(self) -> int:
        return self.K * self.C


def build_mask(K: int, C: int, N: int) -> AttentionMask:
    """Block learnable->noisy and cross-group noisy->noisy attention.

    Noisy rows are grouped in contiguous blocks of K (one block per noise set).
    """
    if min(K, C, N) < 1:
        raise ValueError("build_mask needs K, C, N >= 1")
    kc = K * C
    S = kc + N
    M = np.zeros((S, S), dtype=bool)
    M[kc:, :kc] = True
    grp = np.arange(kc) // K
    M[:kc, :kc] = grp[:, None] != grp[None, :]
    return AttentionMask(M, K, C, N)


def diagnostic_mask(K: int, C: int, N: int) -> AttentionMask:
    """Like :func:`build_mask` but also blocks noisy->learnable, forcing A(u, w) = 0."""
    m = build_mask(K, C, N)
    M = m.M.copy()
    M[: m.noisy, m.noisy:] = True
    return AttentionMask(M, K, C, N)


@dataclass
class AttentionRecord:
    A: np.ndarray  # (heads, S, S)
    layer: int = 0
    epoch: int = 0
    K: int = 0
    C: int = 0
    N: int = 0


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def split_heads(self, x: Tensor) -> Tensor:
        G, T, D = x.shape
        return ops.transpose(ops.reshape(x, (G, T, self.heads, D // self.heads)), (0, 2, 1, 3))

    def merge_heads(self, x: Tensor) -> Tensor:
        G, H, T, dh = x.shape
        return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (G, T, H * dh))


def concat_groups(q_n: Tensor, q_l: Tensor, G: int) -> Tensor:
    """Per group ``[q_N_i1 ... q_N_iC, q_L_i]`` stacked to (G, S, D)."""
    D = q_l.shape[-1]
    return ops.concat([q_n, ops.reshape(q_l, (G, -1, D))], axis=1)


def split_groups(q: Tensor, noisy: int) -> tuple[Tensor, Tensor]:
    """Inverse of :func:`concat_groups`: (G, C*K, D) noisy and (G*N, D) learnable."""
    G, S, D = q.shape
    n_part, l_part = ops.split(q, [noisy, S - noisy], axis=1)
    return n_part, ops.reshape(l_part, (G * (S - noisy), D))


def _check_shapes(q_l, q_n, mask, G):
    if q_l.ndim != 2:
        raise ShapeError(f"learnable queries must be (G*N, D), got {q_l.shape}")
    if mask is not None and q_l.shape[0] != G * mask.N:
        raise ShapeError(f"learnable queries {q_l.shape} do not hold G={G} groups of N={mask.N}")
    if q_n is not None:
        if mask is None:
            raise ShapeError("noisy queries need a mask")
        if q_n.ndim != 3 or q_n.shape[0] != G or q_n.shape[1] != mask.noisy or q_n.shape[2] != q_l.shape[1]:
            raise ShapeError(f"noisy queries {q_n.shape} do not match (G={G}, C*K={mask.noisy}, D={q_l.shape[1]})")


def masked_grouped_attention(q_l: Tensor, q_n: Tensor | None, mask: AttentionMask | None, attn: SelfAttention,
                             G: int, pos_l=None, pos_n=None, layer: int = 0, epoch: int = 0,
                             record: bool = False):
    """Self-attention over the grouped query layout.

    ``q_l`` is (G*N, D); ``q_n`` is (G, C*K, D) or None for the inference path.
    Queries and keys use ``x + pos``, values use ``x``. Returns
    ``(out_n, out_l, records)`` where ``out_n`` is None when ``q_n`` is.
    """
    _check_shapes(q_l, q_n, mask, G)
    D = q_l.shape[1]
    N = q_l.shape[0] // G
    H = attn.heads
    scale = 1.0 / math.sqrt(D // H)

    if q_n is not None:
        # Literal group-wise concatenation, then split back into the two tracks.
        joint = concat_groups(q_n, q_l, G)
        x_n, x_l = split_groups(joint, mask.noisy)
    else:
        x_n, x_l = None, q_l
    x_l = ops.reshape(x_l, (G, N, D))
    qk_l = x_l if pos_l is None else ops.add(x_l, ops.reshape(pos_l, (G, N, D)))
    Ql = attn.split_heads(attn.wq(qk_l))
    Kl = attn.split_heads(attn.wk(qk_l))
    Vl = attn.split_heads(attn.wv(x_l))
    KlT = ops.swapaxes(Kl, -1, -2)
    L_ll = ops.scale(ops.matmul(Ql, KlT), scale)

    records = []
    if x_n is None:
        A_ll = ops.masked_softmax(L_ll, None, col_split=0)
        out_l = ops.matmul(A_ll, Vl)
        if record:
            records = [AttentionRecord(A_ll.data[g].copy(), layer, epoch, 0, 0, N) for g in range(G)]
        out_l = attn.wo(attn.merge_heads(out_l))
        return None, ops.reshape(out_l, (G * N, D)), records

    kc = mask.noisy
    qk_n = x_n if pos_n is None else ops.add(x_n, pos_n)
    Qn = attn.split_heads(attn.wq(qk_n))
    Kn = attn.split_heads(attn.wk(qk_n))
    Vn = attn.split_heads(attn.wv(x_n))
    KnT = ops.swapaxes(Kn, -1, -2)
    L_nn = ops.scale(ops.matmul(Qn, KnT), scale)
    L_nl = ops.scale(ops.matmul(Qn, KlT), scale)
    L_ln = ops.scale(ops.matmul(Ql, KnT), scale)
    logits = ops.concat([ops.concat([L_nn, L_nl], axis=-1), ops.concat([L_ln, L_ll], axis=-1)], axis=-2)
    A = ops.masked_softmax(logits, mask.M, col_split=kc)
    A_n, A_l = ops.split(A, [kc, N], axis=-2)
    A_nn, A_nl = ops.split(A_n, [kc, N], axis=-1)
    A_ln, A_ll = ops.split(A_l, [kc, N], axis=-1)
    out_n = ops.add(ops.matmul(A_nn, Vn), ops.matmul(A_nl, Vl))
    out_l = ops.add(ops.matmul(A_ln, Vn), ops.matmul(A_ll, Vl))
    if record:
        records = [AttentionRecord(A.data[g].copy(), layer, epoch, mask.K, mask.C, N) for g in range(G)]
    out_n = attn.wo(attn.merge_heads(out_n))
    out_l = attn.wo(attn.merge_heads(out_l))
    return out_n, ops.reshape(out_l, (G * N, D)), records


# -- diagnostics -----------------------------------------------------------------------

def row_entropy(A: np.ndarray) -> np.ndarray:
    """Shannon entropy of each row (last axis) with 0 ln 0 = 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(A > 0, A * np.log(np.where(A > 0, A, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def attention_entropy(rec: AttentionRecord | np.ndarray, region: str = "full") -> float:
    """Mean row entropy over heads and the selected rows.

    ``region="full"`` uses every row of the map; ``"noisy_to_learnable"`` uses
    the noisy rows restricted to learnable columns, renormalised per row so the
    block is itself a distribution (rows with no mass there count as 0).
    """
    A = rec.A if isinstance(rec, AttentionRecord) else np.asarray(rec)
    if region == "full":
        return float(row_entropy(A).mean())
    if region == "noisy_to_learnable":
        if not isinstance(rec, AttentionRecord) or rec.K * rec.C == 0:
            raise ValueError("noisy_to_learnable needs a record with noisy rows")
        kc = rec.K * rec.C
        block = A[..., :kc, kc:]
        mass = block.sum(axis=-1, keepdims=True)
        norm = np.divide(block, mass, out=np.zeros_like(block), where=mass > 0)
        return float(row_entropy(norm).mean())
    raise ValueError(f"unknown region {region!r}")


def mean_entropy(records: Sequence[AttentionRecord], region: str = "full") -> float:
    return float(np.mean([attention_entropy(r, region) for r in records])) if records else float("nan")


@dataclass
class GradientFlowReport:
    autodiff: np.ndarray
    analytic: np.ndarray
    max_rel_error: float
    max_abs_grad: float


def gradient_flow_check(q_n: np.ndarray, q_l: np.ndarray, upstream: np.ndarray, mask: AttentionMask,
                        scores: np.ndarray | None = None) -> GradientFlowReport:
    """Check dL_res/dq_L against ``sum_u g_u * A(u, w)`` on a projection-free single head.

    One group; ``q_n`` is (C*K, D), ``q_l`` is (N, D), ``upstream`` is dL/dO for
    the noisy outputs (C*K, D). The attention map is computed from ``scores``
    (or scaled dot products) and held constant, which is the setting the
    identity describes. Learnable query m (0-based) sits at column K*C + m.
    """
    kc, N = mask.noisy, mask.N
    ql = Tensor(np.asarray(q_l, dtype=np.float64), requires_grad=True)
    qn = Tensor(np.asarray(q_n, dtype=np.float64), requires_grad=True)
    X = ops.concat([qn, ql], axis=0)
    with no_grad():
        if scores is None:
            scores = X.data @ X.data.T / math.sqrt(X.shape[1])
        A = ops.masked_softmax(Tensor(np.asarray(scores, dtype=np.float64)), mask.M).data
    out = ops.matmul(Tensor(A), X)
    out_n = out[:kc]
    loss = ops.sum(ops.mul(out_n, np.asarray(upstream, dtype=np.float64)))
    loss.backward()
    auto = ql.grad if ql.grad is not None else np.zeros_like(ql.data)
    ana = np.zeros_like(ql.data)
    for m in range(N):
        w = kc + m
        ana[m] = (A[:kc, w][:, None] * upstream).sum(axis=0)
    denom = np.maximum(1.0, np.abs(ana))
    return GradientFlowReport(auto, ana, float(np.max(np.abs(auto - ana) / denom)), float(np.max(np.abs(auto))))


def write_entropy_csv(path: str | Path, rows: Sequence[dict], layers: int) -> None:
    """Columns: epoch, variant, mean_entropy, layer_0 ... layer_{L-1}."""
    fields = ["epoch", "variant", "mean_entropy"] + [f"layer_{i}" for i in range(layers)]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in fields})
