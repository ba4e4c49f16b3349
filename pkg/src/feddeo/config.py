"""Typed key=value experiment configuration with a canonical digest.

Every knob has a documented default; unknown keys are rejected rather than
ignored so typos fail loudly. The digest is the SHA-256 of the canonical
sorted key=value text and deliberately excludes the output directory: two runs
that differ only in where they write are the same experiment.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields


class ConfigError(Exception):
    """Unknown key, unparsable value, or a semantically invalid combination."""


@dataclass
class ExperimentConfig:
    # experiment
    seed: int = 0
    partition: str = "feature_skew"     # feature_skew | label_skew
    clients: int = 6
    baselines: str = "prompts_only,ceiling,fedavg"
    out_dir: str = "runs/default"       # excluded from the digest

    # world
    categories: int = 10
    domains: int = 6
    dim: int = 2
    sigma: float = 0.17
    category_radius: float = 0.75
    domain_radius: float = 2.2
    rotation_step: float = 0.35
    scale_spread: float = 0.06
    components: int = 1
    component_spread: float = 0.08
    mean_jitter: float = 0.015
    min_separation: float = 0.25
    train_per_class: int = 200
    test_per_class: int = 100

    # diffusion model + pretraining
    timesteps: int = 200
    beta_min: float = 1e-4
    beta_max: float = 0.02
    eta: float = 1.0
    model_hidden: int = 128
    model_depth: int = 3
    time_dim: int = 32
    cond_dim: int = 16
    pretrain_epochs: int = 150
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 256
    pretrain_per_mode: int = 120
    cond_jitter: float = 0.05
    context_scale: float = 0.35         # strength of location tags in pretraining conditions
    context_dropout: float = 0.15       # fraction trained on the bare class embedding

    # client description training
    description_epochs: int = 10
    description_lr: float = 1e-2
    description_batch: int = 64

    # server generation + aggregated classifier
    samples_per_pair: int = 30
    weight_description: float = 1.0
    weight_class: float = 1.0
    classifier_hidden: int = 128
    classifier_depth: int = 3
    classifier_epochs: int = 200
    classifier_lr: float = 1e-3
    classifier_batch: int = 32
    convergence_tol: float = 1e-4
    convergence_patience: int = 10

    # baselines
    fedavg_rounds: int = 20
    fedavg_local_epochs: int = 1

    # metrics
    kl_neighbors: int = 5


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_VALID_PARTITIONS = ("feature_skew", "label_skew")
_VALID_BASELINES = ("prompts_only", "ceiling", "fedavg")


def _parse_value(key: str, text: str):
    kind = _FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind in ("int", int):
            return int(text)
        if kind in ("float", float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {text!r} as {kind}") from exc
    return text


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.partition not in _VALID_PARTITIONS:
        raise ConfigError(f"partition must be one of {_VALID_PARTITIONS}, got {cfg.partition!r}")
    for name in parse_baselines(cfg):
        if name not in _VALID_BASELINES:
            raise ConfigError(f"unknown baseline {name!r}, expected subset of {_VALID_BASELINES}")
    positive = ["clients", "categories", "domains", "dim", "sigma", "train_per_class",
                "test_per_class", "timesteps", "model_hidden", "model_depth", "cond_dim",
                "pretrain_epochs", "pretrain_per_mode", "description_epochs",
                "samples_per_pair", "classifier_hidden", "classifier_epochs",
                "fedavg_rounds", "kl_neighbors"]
    for name in positive:
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"config key {name!r} must be positive, got {getattr(cfg, name)}")
    if not 0.0 <= cfg.context_dropout <= 1.0:
        raise ConfigError(f"config key 'context_dropout' must be in [0, 1], got {cfg.context_dropout}")
    if cfg.context_scale < 0:
        raise ConfigError(f"config key 'context_scale' must be non-negative, got {cfg.context_scale}")
    if cfg.partition == "feature_skew" and cfg.clients > cfg.domains:
        raise ConfigError(f"feature_skew requires clients <= domains, got {cfg.clients} > {cfg.domains}")
    if cfg.partition == "label_skew" and cfg.clients > cfg.categories:
        raise ConfigError(f"label_skew requires clients <= categories, got {cfg.clients} > {cfg.categories}")
    return cfg


def parse_baselines(cfg: ExperimentConfig) -> list[str]:
    return [b.strip() for b in cfg.baselines.split(",") if b.strip()]


def load_config(path=None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Build a config from defaults, an optional key=value file, and CLI overrides."""
    cfg = ExperimentConfig()
    def apply(key: str, raw: str, source: str):
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r} ({source})")
        setattr(cfg, key, _parse_value(key, raw))

    if path is not None:
        try:
            with open(path) as fh:
                lines = fh.readlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        for lineno, line in enumerate(lines, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
            key, raw = stripped.split("=", 1)
            apply(key, raw, f"{path}:{lineno}")
    for key, raw in (overrides or {}).items():
        apply(key, str(raw), "command line")
    return validate_config(cfg)


def canonical_text(cfg: ExperimentConfig) -> str:
    """Sorted key=value lines; floats use repr so the text is exact."""
    parts = []
    for f in sorted(fields(cfg), key=lambda f: f.name):
        if f.name == "out_dir":
            continue
        value = getattr(cfg, f.name)
        parts.append(f"{f.name}={value!r}" if isinstance(value, float) else f"{f.name}={value}")
    return "\n".join(parts) + "\n"


def config_digest(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode("utf-8")).hexdigest()[:16]
