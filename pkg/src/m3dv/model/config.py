from __future__ import annotations

from dataclasses import dataclass, field

VARIANTS = ("full", "ae", "no-dn", "no-3dm", "no-fld")


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 3
    dim: int = 256
    ffn_dim: int = 256
    heads: int = 8
    dropout: float = 0.1
    G: int = 11
    N: int = 50
    C: int = 5
    feat_tokens: int = 64
    categories: tuple[str, ...] = ("Car", "Pedestrian", "Cyclist")
    num_bins: int = 12
    embed_layers: int = 3  # noisy-query MLP depth
    fq_layers: int = 2  # distillation refiner depth

    def __post_init__(self):
        for name in ("layers", "dim", "ffn_dim", "heads", "G", "N", "C", "feat_tokens", "num_bins",
                     "embed_layers", "fq_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.dim % 8:
            raise ValueError("dim must be divisible by 8 (sinusoidal layout)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def n_classes(self) -> int:
        return len(self.categories)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.5
    beta: float = 4.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3, self.beta) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class SetLossWeights:
    """Per-term weights inside the detection and reconstruction losses."""

    cls: float = 2.0
    center: float = 10.0
    lrtb: float = 5.0
    giou: float = 2.0
    dims: float = 1.0
    depth: float = 1.0
    orien: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 2e-4
    batch_size: int = 8  # scenes per optimiser step
    weight_decay: float = 1e-4
    decay_epochs: tuple[int, ...] = (34, 50, 66, 82)
    decay_rate: float = 0.5
    trigger_epoch: int = 34
    epsilon: float = 1.0
    lambda_C: float = 0.4
    lambda_D: float = 0.2
    grad_clip: float | None = None
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    set_loss: SetLossWeights = field(default_factory=SetLossWeights)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be non-negative and batch_size positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.lr * self.decay_rate ** drops


def desk_decoder(**overrides) -> DecoderConfig:
    """Small decoder used for desk-scale runs."""
    base = dict(layers=3, dim=32, ffn_dim=32, heads=8, dropout=0.0, G=2, N=8, C=2, feat_tokens=16)
    base.update(overrides)
    return DecoderConfig(**base)
