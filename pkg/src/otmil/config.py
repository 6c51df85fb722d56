"""Run configuration: one flat record covering model, solver, optimizer
and split settings, JSON-round-trippable for reproducibility audits.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

MODEL_KINDS = ("libra", "maxpool", "abmil")
INIT_STRATEGIES = ("kmeans", "random")


def default_k_v(n_classes: int) -> int:
    """Default visual-prototype count: 6 for binary tasks, 10 otherwise."""
    return 6 if n_classes == 2 else 10


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    max_epochs: int = 80
    patience: int = 15
    batch_size: int = 1
    seed: int = 0
    epsilon: float = 0.05
    ot_iters: int = 20
    sinkhorn_tol: float = 1e-9
    k_shot: int = 4
    folds: int = 5
    model_kind: str = "libra"
    k_v: int | None = None  # None: resolved from the class count
    hidden: int = 512
    heads: int = 8
    init_strategy: str = "kmeans"
    freeze_textual: bool = False
    detach_marginals: bool = False
    log_domain_sinkhorn: bool = False

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0 <= self.patience < self.max_epochs:
            raise ValueError("patience must satisfy 0 <= patience < max_epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.ot_iters < 1:
            raise ValueError("ot_iters must be >= 1")
        if self.k_shot < 1:
            raise ValueError("k_shot must be >= 1")
        if self.folds < 1:
            raise ValueError("folds must be >= 1")
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"model_kind must be one of {MODEL_KINDS}")
        if self.k_v is not None and self.k_v < 1:
            raise ValueError("k_v must be >= 1")
        if self.heads < 1 or self.hidden % self.heads != 0:
            raise ValueError("hidden must be a positive multiple of heads")
        if self.init_strategy not in INIT_STRATEGIES:
            raise ValueError(f"init_strategy must be one of {INIT_STRATEGIES}")
        return self

    def resolve_k_v(self, n_classes: int) -> int:
        return self.k_v if self.k_v is not None else default_k_v(n_classes)


@dataclass
class RunConfig(TrainConfig):
    """TrainConfig plus filesystem wiring for CLI runs."""

    data: str | None = None
    priors: str | None = None
    out: str | None = None
    checkpoint: str | None = None
    parallel_folds: bool = False

    def train_config(self) -> TrainConfig:
        fields = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items()
                              if k in fields})


def config_from_dict(data: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return dataclasses.replace(cfg, **data)


def load_config_file(path: str, base: RunConfig | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    return config_from_dict(data, base)


def dump_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(dataclasses.asdict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")
