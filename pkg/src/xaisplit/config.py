"""Experiment configuration: defaults, JSON config files and command-line overrides.

Resolution order is defaults < config file < flags.  Everything is validated
before a command starts working, and the resolved config is what reports echo.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import TASKS
from .nn import ExtractorConfig
from .offload import MODES, CostModel, LinkModel
from .skewtrain import SkewnessSpec, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    task: str = "radial"
    n_train: int = 2048
    n_test: int = 256
    # None: use the experiment seed
    seed: int | None = None
    classes: int = 4
    noise: float = 0.1
    # optional files (.idx or .csv) instead of a synthetic task
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None

    def validate(self):
        if self.train_images is None and self.task not in TASKS:
            raise ConfigError(f"data.task must be one of {', '.join(TASKS)}, got {self.task!r}")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("data.n_train and data.n_test must be positive")
        if self.classes < 2:
            raise ConfigError("data.classes must be at least 2")
        if (self.train_images is None) != (self.test_images is None):
            raise ConfigError("give both data.train_images and data.test_images, or neither")


@dataclass
class LinkConfig:
    bandwidths_bps: list = field(default_factory=lambda: [270e3, 1e6, 6e6])
    rtt_s: float = 0.0

    def validate(self):
        if not self.bandwidths_bps:
            raise ConfigError("link.bandwidths_bps must not be empty")
        try:
            self.models()
        except ValueError as e:
            raise ConfigError(f"link: {e}") from None

    def models(self) -> list[LinkModel]:
        return [LinkModel(float(b), float(self.rtt_s)) for b in self.bandwidths_bps]


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    spec: SkewnessSpec = field(default_factory=SkewnessSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    link: LinkConfig = field(default_factory=LinkConfig)
    cost: CostModel = field(default_factory=CostModel)
    modes: list = field(default_factory=lambda: list(MODES))
    timeout_s: float = 0.5
    eval_ig_steps: int = 128

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extractor"]["input_shape"] = list(self.extractor.input_shape)
        return d

    @property
    def data_seed(self) -> int:
        return self.seed if self.data.seed is None else self.data.seed


_SECTIONS = {"data": DataConfig, "extractor": ExtractorConfig, "spec": SkewnessSpec, "train": TrainConfig,
             "link": LinkConfig, "cost": CostModel}


def _build(cls, values: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    if cls is ExtractorConfig and "input_shape" in values:
        values = dict(values, input_shape=tuple(values["input_shape"]))
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for key, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], v)
        else:
            out[key] = v
    return out


def load_file(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return doc


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the file's values, then the overrides (nested dicts keyed like the config)."""
    values = merge(file_values or {}, overrides or {})
    top = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(values) - top)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kw = {}
    for key, v in values.items():
        if key in _SECTIONS:
            if not isinstance(v, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            kw[key] = _build(_SECTIONS[key], v, key)
        else:
            kw[key] = v
    try:
        cfg = ExperimentConfig(**kw)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    # one seed drives everything unless the train section pins its own
    if "seed" not in values.get("train", {}):
        cfg.train = replace(cfg.train, seed=cfg.seed)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {cfg.seed!r}")
    cfg.data.validate()
    cfg.link.validate()
    try:
        cfg.spec.validate(cfg.extractor.channels_out)
    except ValueError as e:
        raise ConfigError(f"spec: {e}") from None
    t = cfg.train
    if t.epochs < 1 or t.batch_size < 1 or t.ig_steps < 1 or t.eval_ig_steps < 1 or t.eval_every < 1:
        raise ConfigError("train.epochs, batch_size, ig_steps, eval_ig_steps and eval_every must be positive")
    if t.warmup_epochs < 0:
        raise ConfigError("train.warmup_epochs must be non-negative")
    if not 2 <= t.levels <= 256:
        raise ConfigError(f"train.levels must be in [2, 256], got {t.levels}")
    if t.lr <= 0 or t.weight_decay < 0:
        raise ConfigError("train.lr must be positive and train.weight_decay non-negative")
    bad = sorted(set(cfg.modes) - set(MODES))
    if bad or not cfg.modes:
        raise ConfigError(f"modes must be a non-empty subset of {', '.join(MODES)}")
    if cfg.timeout_s <= 0:
        raise ConfigError("timeout_s must be positive")
    if cfg.eval_ig_steps < 1:
        raise ConfigError("eval_ig_steps must be positive")
    if cfg.cost.client_flops <= 0 or cfg.cost.server_flops <= 0 or cfg.cost.compress_s_per_symbol < 0:
        raise ConfigError("cost model rates must be positive")
