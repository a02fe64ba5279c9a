"""Flat scenario configuration: the main hyperparameter table plus desk-scale overrides."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .denoising import NoiseConfig
from .matching import CostWeights, MatchingConfig, SchedulerConfig
from .model.config import DecoderConfig, LossWeights, SetLossWeights, TrainConfig

SEED_ENV = "M3DV_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    # loss weights
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.5
    beta: float = 4.0
    # noise
    lambda_C: float = 0.4
    lambda_D: float = 0.2
    # scheduler
    epsilon: float = 1.0
    T: int = 85
    # queries
    N: int = 50
    G: int = 11
    C: int = 5
    # optimiser
    epochs: int = 250
    lr: float = 2e-4
    batch_size: int = 8
    weight_decay: float = 1e-4
    scheduler: str = "step"
    decay_rate: float = 0.5
    decay_list: tuple[int, ...] = (85, 125, 165, 205)
    # decoder
    hidden_dim: int = 256
    ffn_dim: int = 256
    dropout: float = 0.1
    nheads: int = 8
    decoder_layers: int = 3
    # recorded for completeness; the image encoder is not part of this toolkit
    feature_scales: int = 4
    encoder_layers: int = 3
    encoder_points: int = 4
    decoder_points: int = 4
    # toolkit-level settings
    feat_tokens: int = 64
    num_bins: int = 12
    categories: tuple[str, ...] = ("Car", "Pedestrian", "Cyclist")
    embed_layers: int = 3
    fq_layers: int = 2
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    cost_cls: float = 2.0
    cost_proj: float = 10.0
    cost_lrtb: float = 5.0
    cost_giou: float = 2.0
    cost_size3d: float = 1.0
    cost_orien: float = 1.0
    cost_depth: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.scheduler != "step":
            raise ConfigError(f"only the step scheduler is supported, got {self.scheduler!r}")
        for name in ("feature_scales", "encoder_layers", "encoder_points", "decoder_points"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        try:
            self.decoder()
            self.train()
            self.matching()
            self.noise()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # -- module configs ---------------------------------------------------------------

    def decoder(self) -> DecoderConfig:
        return DecoderConfig(layers=self.decoder_layers, dim=self.hidden_dim, ffn_dim=self.ffn_dim,
                             heads=self.nheads, dropout=self.dropout, G=self.G, N=self.N, C=self.C,
                             feat_tokens=self.feat_tokens, categories=self.categories, num_bins=self.num_bins,
                             embed_layers=self.embed_layers, fq_layers=self.fq_layers)

    def train(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                           weight_decay=self.weight_decay, decay_epochs=self.decay_list, decay_rate=self.decay_rate,
                           trigger_epoch=self.T, epsilon=self.epsilon, lambda_C=self.lambda_C,
                           lambda_D=self.lambda_D, seed=self.seed,
                           loss=LossWeights(self.lambda1, self.lambda2, self.lambda3, self.beta),
                           set_loss=SetLossWeights(focal_alpha=self.focal_alpha, focal_gamma=self.focal_gamma))

    def matching(self) -> MatchingConfig:
        w = CostWeights(self.cost_cls, self.cost_proj, self.cost_lrtb, self.cost_giou, self.cost_size3d,
                        self.cost_orien, self.cost_depth)
        return MatchingConfig(SchedulerConfig(self.epsilon, self.T), w, self.categories, self.num_bins)

    def noise(self) -> NoiseConfig:
        return NoiseConfig(self.lambda_C, self.lambda_D, self.C, self.seed, self.categories, self.num_bins)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# Desk runs keep the schedule's phase structure at 100 epochs and shrink the decoder.
DESK_OVERRIDES = {
    "epochs": 100, "T": 34, "decay_list": [34, 50, 66, 82],
    "hidden_dim": 32, "ffn_dim": 32, "dropout": 0.0, "G": 2, "N": 8, "C": 2, "feat_tokens": 16,
}

_FIELDS = {f.name: f for f in fields(ScenarioConfig)}


def _coerce(name: str, value, default):
    """Check one JSON value against the type of its default."""
    if isinstance(default, bool) or isinstance(value, bool):
        raise ConfigError(f"{name}: booleans are not accepted")
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected a list")
        inner = type(default[0]) if default else int
        return tuple(_coerce(f"{name}[{i}]", v, inner()) for i, v in enumerate(value))
    if isinstance(default, int):
        if not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{name}: unsupported value {value!r}")


def _layer(values: dict, base: ScenarioConfig) -> dict:
    unknown = sorted(set(values) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return {k: _coerce(k, v, getattr(base, k)) for k, v in values.items()}


def resolve(file_values: dict | None = None, cli_values: dict | None = None, desk: bool = False,
            env: dict | None = None) -> ScenarioConfig:
    """Defaults, then desk overrides, then the file, then explicit CLI values.

    The seed falls back to ``M3DV_SEED`` when neither the file nor the CLI sets it.
    """
    env = os.environ if env is None else env
    base = ScenarioConfig()
    merged: dict = {}
    if desk:
        merged.update(_layer(DESK_OVERRIDES, base))
    file_values = dict(file_values or {})
    cli_values = {k: v for k, v in (cli_values or {}).items() if v is not None}
    merged.update(_layer(file_values, base))
    if "seed" not in file_values and "seed" not in cli_values and env.get(SEED_ENV):
        try:
            merged["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    merged.update(_layer(cli_values, base))
    return replace(base, **merged)


def load_config(path: str | Path | None, cli_values: dict | None = None, desk: bool = False) -> ScenarioConfig:
    file_values = None
    if path is not None:
        text = Path(path).read_text()
        try:
            file_values = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(file_values, dict):
            raise ConfigError(f"{path}: expected a flat JSON object")
        nested = [k for k, v in file_values.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"{path}: config must be flat, nested keys: {', '.join(nested)}")
    return resolve(file_values, cli_values, desk)
