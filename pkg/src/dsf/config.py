"""Experiment configuration: JSON sections mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from dsf.losses import METHODS


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class DatasetConfig:
    num_classes: int = 10
    n_points: int = 5000
    d_in: int = 16
    kappa: float = 30.0
    min_separation_deg: float = 45.0
    test_fraction: float = 0.2


@dataclass
class EncoderConfig:
    hidden: list = field(default_factory=lambda: [64])
    p: int = 8
    activation: str = "tanh"


@dataclass
class AugmentationConfig:
    noise_kappa: float = 50.0
    views_per_group: int = 1
    dropout_prob: float = 0.1


@dataclass
class LossConfig:
    method: str = "dsf"
    tau: float | None = None  # None: 1.0 for dsf, 0.2 for the cosine methods
    negatives: str = "in_batch"
    queue_size: int = 4096
    lambda_r: float = 0.95
    normalize_by_dim: bool = True
    stabilize: bool = True

    def temperature(self):
        if self.tau is not None:
            return float(self.tau)
        return 1.0 if self.method == "dsf" else 0.2


@dataclass
class OptimizerConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs: int = 30


@dataclass
class EvalConfig:
    knn_k: int | None = None  # None: min(200, n_train // 10)
    probe_epochs: int = 100
    probe_lr: float = 0.5


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out_dir: str | None = None
    name: str | None = None

    @property
    def views_per_instance(self):
        return 2 * self.augmentation.views_per_group

    @property
    def budget(self):
        """Encoder forward passes per step, ``B x M``."""
        return self.optimizer.batch_size * self.views_per_instance

    @property
    def label(self):
        if self.name:
            return self.name
        return f"{self.loss.method}_m{self.augmentation.views_per_group}"

    def validate(self):
        _validate(self)
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        """Copy with dotted-path overrides, e.g. ``replace(**{"loss.method": "dsf"})``."""
        data = self.to_dict()
        for path, value in changes.items():
            node = data
            *parents, leaf = path.split(".")
            for key in parents:
                node = node[key]
            if leaf not in node:
                raise ConfigError(path, "unknown field")
            node[leaf] = value
        return from_dict(data)


_SECTIONS = {
    "dataset": DatasetConfig,
    "encoder": EncoderConfig,
    "augmentation": AugmentationConfig,
    "loss": LossConfig,
    "optimizer": OptimizerConfig,
    "eval": EvalConfig,
}


def from_dict(data):
    """Build and validate an :class:`ExperimentConfig` from nested dicts."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "configuration must be a JSON object")
    kwargs = {}
    top_fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key, value in data.items():
        if key not in top_fields:
            raise ConfigError(key, "unknown field")
        cls = _SECTIONS.get(key)
        if cls is None:
            kwargs[key] = value
            continue
        if not isinstance(value, dict):
            raise ConfigError(key, "section must be an object")
        names = {f.name for f in dataclasses.fields(cls)}
        for sub in value:
            if sub not in names:
                raise ConfigError(f"{key}.{sub}", "unknown field")
        kwargs[key] = cls(**value)
    return ExperimentConfig(**kwargs).validate()


def load_config(path):
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}", exc.msg) from exc
    return from_dict(data)


def _require(cond, field, message):
    if not cond:
        raise ConfigError(field, message)


def _is_int(x):
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _validate(cfg):
    d, e, a, l, o, v = cfg.dataset, cfg.encoder, cfg.augmentation, cfg.loss, cfg.optimizer, cfg.eval
    _require(_is_int(d.num_classes) and d.num_classes >= 2, "dataset.num_classes", "must be an integer >= 2")
    _require(_is_int(d.n_points) and d.n_points >= 2 * d.num_classes, "dataset.n_points", "too few points")
    _require(_is_int(d.d_in) and d.d_in >= 2, "dataset.d_in", "must be an integer >= 2")
    _require(_is_num(d.kappa) and d.kappa > 0, "dataset.kappa", "must be positive")
    _require(_is_num(d.min_separation_deg) and 0 <= d.min_separation_deg < 180, "dataset.min_separation_deg", "must lie in [0, 180)")
    _require(_is_num(d.test_fraction) and 0 < d.test_fraction < 1, "dataset.test_fraction", "must lie in (0, 1)")
    _require(isinstance(e.hidden, list) and all(_is_int(h) and h > 0 for h in e.hidden), "encoder.hidden", "must be a list of positive integers")
    _require(_is_int(e.p) and e.p >= 2, "encoder.p", "must be an integer >= 2")
    _require(e.activation in ("tanh", "relu"), "encoder.activation", "must be 'tanh' or 'relu'")
    _require(_is_num(a.noise_kappa) and a.noise_kappa > 0, "augmentation.noise_kappa", "must be positive (use a very large value to disable)")
    _require(_is_int(a.views_per_group) and a.views_per_group >= 1, "augmentation.views_per_group", "must be an integer >= 1")
    _require(_is_num(a.dropout_prob) and 0 <= a.dropout_prob < 1, "augmentation.dropout_prob", "must lie in [0, 1)")
    _require(l.method in METHODS, "loss.method", f"must be one of {', '.join(METHODS)}; got {l.method!r}")
    _require(l.method != "cosine" or a.views_per_group == 1, "augmentation.views_per_group", "method 'cosine' requires views_per_group = 1")
    _require(l.tau is None or (_is_num(l.tau) and l.tau > 0), "loss.tau", "must be positive")
    _require(l.negatives in ("queue", "in_batch"), "loss.negatives", "must be 'queue' or 'in_batch'")
    _require(_is_int(l.queue_size) and l.queue_size >= 1, "loss.queue_size", "must be a positive integer")
    _require(_is_num(l.lambda_r) and 0 < l.lambda_r < 1, "loss.lambda_r", "must lie in (0, 1)")
    _require(_is_num(o.lr) and o.lr >= 0, "optimizer.lr", "must be >= 0")
    _require(_is_num(o.momentum) and 0 <= o.momentum < 1, "optimizer.momentum", "must lie in [0, 1)")
    _require(_is_num(o.weight_decay) and o.weight_decay >= 0, "optimizer.weight_decay", "must be >= 0")
    _require(_is_int(o.batch_size) and o.batch_size >= 1, "optimizer.batch_size", "must be a positive integer")
    _require(l.negatives == "queue" or o.batch_size >= 2, "optimizer.batch_size", "in-batch negatives need batch_size >= 2")
    _require(_is_int(o.epochs) and o.epochs >= 0, "optimizer.epochs", "must be a non-negative integer")
    _require(v.knn_k is None or (_is_int(v.knn_k) and v.knn_k >= 1), "eval.knn_k", "must be a positive integer")
    _require(_is_int(v.probe_epochs) and v.probe_epochs >= 1, "eval.probe_epochs", "must be a positive integer")
    _require(_is_num(v.probe_lr) and v.probe_lr > 0, "eval.probe_lr", "must be positive")
    _require(_is_int(cfg.seed), "seed", "must be an integer")


def check_budget_parity(configs):
    """Raise :class:`ConfigError` unless every config has the same ``B x M``."""
    configs = list(configs)
    if not configs:
        return
    budgets = {c.budget for c in configs}
    if len(budgets) > 1:
        detail = ", ".join(
            f"{c.label}: {c.optimizer.batch_size}x{c.views_per_instance}={c.budget}" for c in configs
        )
        raise ConfigError("optimizer.batch_size", f"budget parity violated (B x M differs): {detail}")


def with_budget(cfg, method, views_per_group, budget):
    """Variant of ``cfg`` for ``method`` with ``B = budget / (2 m)``."""
    m_total = 2 * views_per_group
    if budget % m_total:
        raise ConfigError("optimizer.batch_size", f"budget {budget} not divisible by M={m_total}")
    return cfg.replace(
        **{
            "loss.method": method,
            "augmentation.views_per_group": views_per_group,
            "optimizer.batch_size": budget // m_total,
            "name": f"{method}_m{views_per_group}",
        }
    )
