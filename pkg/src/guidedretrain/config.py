"""Experiment configuration: flat key = value files with explicit seeds.

Unknown keys fail fast. Every random choice in a run traces back to one of
the four named seeds (plus the synthetic data seed), never the wall clock.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .metrics import METRICS
from .retrain import CONFIG_KINDS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # dataset
    dataset: str = "synthetic"  # "synthetic" or "idx"
    synthetic_classes: int = 4
    synthetic_per_class_train: int = 500
    synthetic_per_class_test: int = 125
    synthetic_image_size: int = 16
    synthetic_noise_sigma: float = 1.0
    synthetic_seed: int = 1234
    idx_train_images: str = ""
    idx_train_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    # original training
    train_epochs: int = 20
    train_batch_size: int = 32
    train_lr: float = 0.01
    train_momentum: float = 0.9
    # retraining (per data point)
    retrain_epochs: int = 5
    retrain_batch_size: int = 32
    retrain_lr: float = 0.01
    retrain_momentum: float = 0.9
    # attack
    attack_epsilon: float = 0.1
    attack_fraction: float = 0.16
    # guidance metrics
    nc_threshold: float = 0.5
    lsa_layer: str = ""  # empty: last hidden dense layer
    lsa_variance_threshold: float = 1e-5
    dsa_layers: str = ""  # comma separated; empty: all conv/dense layers
    # experiment plan
    metrics: tuple = ("LSA", "DSA", "NC", "RANDOM")
    configs: tuple = ("C1", "C2", "C3")
    # seeds
    seed_init: int = 11
    seed_shuffle: int = 22
    seed_attack: int = 33
    seed_random_metric: int = 44
    # output
    out: str = "out"

    def __post_init__(self):
        if self.dataset not in ("synthetic", "idx"):
            raise ConfigError(f"dataset must be synthetic or idx, got {self.dataset!r}")
        if not self.metrics:
            raise ConfigError("at least one metric required")
        if not self.configs:
            raise ConfigError("at least one retraining configuration required")
        for m in self.metrics:
            if m not in METRICS:
                raise ConfigError(f"unknown metric {m!r} (choices: {', '.join(METRICS)})")
        for k in self.configs:
            if k not in CONFIG_KINDS:
                raise ConfigError(f"unknown configuration {k!r} (choices: {', '.join(CONFIG_KINDS)})")
        if self.dataset == "idx":
            missing = [name for name in ("idx_train_images", "idx_train_labels",
                                         "idx_test_images", "idx_test_labels")
                       if not getattr(self, name)]
            if missing:
                raise ConfigError(f"idx dataset needs {', '.join(missing)}")


# config-file key -> (field, parser)
_KEYS = {
    "dataset": ("dataset", str),
    "synthetic.classes": ("synthetic_classes", int),
    "synthetic.per_class_train": ("synthetic_per_class_train", int),
    "synthetic.per_class_test": ("synthetic_per_class_test", int),
    "synthetic.image_size": ("synthetic_image_size", int),
    "synthetic.noise_sigma": ("synthetic_noise_sigma", float),
    "synthetic.seed": ("synthetic_seed", int),
    "idx.train_images": ("idx_train_images", str),
    "idx.train_labels": ("idx_train_labels", str),
    "idx.test_images": ("idx_test_images", str),
    "idx.test_labels": ("idx_test_labels", str),
    "train.epochs": ("train_epochs", int),
    "train.batch_size": ("train_batch_size", int),
    "train.lr": ("train_lr", float),
    "train.momentum": ("train_momentum", float),
    "retrain.epochs": ("retrain_epochs", int),
    "retrain.batch_size": ("retrain_batch_size", int),
    "retrain.lr": ("retrain_lr", float),
    "retrain.momentum": ("retrain_momentum", float),
    "attack.epsilon": ("attack_epsilon", float),
    "attack.fraction": ("attack_fraction", float),
    "nc.threshold": ("nc_threshold", float),
    "lsa.layer": ("lsa_layer", str),
    "lsa.variance_threshold": ("lsa_variance_threshold", float),
    "dsa.layers": ("dsa_layers", str),
    "metrics": ("metrics", lambda v: tuple(p.strip().upper() for p in v.split(",") if p.strip())),
    "configs": ("configs", lambda v: tuple(p.strip().upper() for p in v.split(",") if p.strip())),
    "seed.init": ("seed_init", int),
    "seed.shuffle": ("seed_shuffle", int),
    "seed.attack": ("seed_attack", int),
    "seed.random_metric": ("seed_random_metric", int),
    "out": ("out", str),
}

_FIELD_TO_KEY = {f: k for k, (f, _) in _KEYS.items()}


def parse_config(text: str) -> ExperimentConfig:
    """Parse `key = value` lines; '#' starts a comment; unknown keys are errors."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        field_name, parser = _KEYS[key]
        if field_name in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[field_name] = parser(value)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_echo(cfg: ExperimentConfig) -> list[str]:
    """Canonical `key = value` lines of the full effective configuration."""
    lines = []
    for key in sorted(_KEYS):
        field_name, _ = _KEYS[key]
        value = getattr(cfg, field_name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return lines


def with_overrides(cfg: ExperimentConfig, **fields) -> ExperimentConfig:
    return replace(cfg, **fields)
