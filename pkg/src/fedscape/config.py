"""Experiment configuration: a JSON document mapped onto nested dataclasses.

Unknown keys are rejected, and ``key.path=value`` overrides are type-checked
against the field they target.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .clobj import CLMethod
from .errors import ConfigError
from .flstrat import Scope, Strategy


@dataclass
class StrategyConfig:
    name: str = "AVG"
    scope: str = "FULL"
    mu: float = 0.01
    server_lr: float = 0.01
    server_optimizer: str = "adam"
    alpha: float = 0.5


@dataclass
class CLConfig:
    method: str = "NONE"
    lam: float = 1.0
    gamma: float = 0.9
    xi: float = 0.1
    penalty_scope: str = "ALL"  # ALL (root + top) or TOP
    buffer_capacity: int = 200
    pseudo_per_batch: typing.Optional[int] = None  # None: same as the real batch
    latent_dim: int = 8
    gen_hidden: int = 32
    beta_kl: float = 1.0
    gen_lr: float = 1e-3
    eta_root: float = 1e-4
    eta_top: float = 1e-3


@dataclass
class DataConfig:
    n_scenes: int = 2000
    image_size: int = 32
    iid: bool = True
    task_shift: float = 1.0
    identical_tasks: bool = False
    fl_tasks: typing.List[int] = field(default_factory=lambda: [1, 2])


@dataclass
class ModelSection:
    channels: typing.List[int] = field(default_factory=lambda: [16, 32, 64])
    hidden: int = 32
    top_activation: str = "none"


@dataclass
class Seeds:
    data: int = 0
    model: int = 0
    run: int = 0


@dataclass
class ExperimentConfig:
    mode: str = "FL"
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    cl: CLConfig = field(default_factory=CLConfig)
    n_clients: int = 2
    rounds: int = 5
    rounds_per_task: int = 5
    local_epochs: int = 1
    batch_size: typing.Optional[int] = None  # None: 16, or 8 for >5 clients without augmentation
    augment: bool = False
    lr: float = 1e-3
    pcc_on_clamped: bool = True
    seeds: Seeds = field(default_factory=Seeds)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    deterministic: bool = True
    concurrent: bool = False
    checked: bool = False
    test_mode: bool = False

    def resolved_batch_size(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 16 if (self.augment or self.n_clients <= 5) else 8

    def validate(self) -> "ExperimentConfig":
        if self.mode not in ("FL", "FCL"):
            raise ConfigError(f"mode: expected FL or FCL, got {self.mode!r}")
        _enum("strategy.name", Strategy, self.strategy.name)
        _enum("strategy.scope", Scope, self.strategy.scope)
        _enum("cl.method", CLMethod, self.cl.method)
        if self.strategy.server_optimizer not in ("adam", "sgd"):
            raise ConfigError("strategy.server_optimizer: expected adam or sgd")
        if self.cl.penalty_scope not in ("ALL", "TOP"):
            raise ConfigError("cl.penalty_scope: expected ALL or TOP")
        if not 2 <= self.n_clients <= 10:
            raise ConfigError(f"n_clients: expected 2..10, got {self.n_clients}")
        for key in ("rounds", "rounds_per_task", "local_epochs"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key}: must be >= 1")
        if self.resolved_batch_size() < 2:
            raise ConfigError("batch_size: must be >= 2 (batch norm)")
        for key, val in (("lr", self.lr), ("strategy.mu", self.strategy.mu),
                         ("strategy.server_lr", self.strategy.server_lr), ("cl.lam", self.cl.lam),
                         ("cl.eta_root", self.cl.eta_root), ("cl.eta_top", self.cl.eta_top),
                         ("cl.gen_lr", self.cl.gen_lr)):
            if val < 0:
                raise ConfigError(f"{key}: must be non-negative")
        if not 0 <= self.strategy.alpha <= 1:
            raise ConfigError("strategy.alpha: must be in [0, 1]")
        if not 0 < self.cl.gamma <= 1:
            raise ConfigError("cl.gamma: must be in (0, 1]")
        if self.cl.xi <= 0:
            raise ConfigError("cl.xi: must be positive")
        if self.mode == "FL" and self.cl.method != "NONE":
            raise ConfigError("cl.method: only NONE is valid in FL mode")
        if self.cl.method == "LGR":
            if self.strategy.scope != "ROOT" or self.strategy.name != "AVG":
                raise ConfigError("cl.method: LGR runs with strategy.name=AVG and strategy.scope=ROOT")
            eq_ok = self.test_mode and self.cl.eta_root == self.cl.eta_top
            if self.cl.eta_root > self.cl.eta_top or (self.cl.eta_root == self.cl.eta_top and not eq_ok):
                raise ConfigError("cl.eta_root: must be below cl.eta_top")
        if not set(self.data.fl_tasks) <= {1, 2} or not self.data.fl_tasks:
            raise ConfigError("data.fl_tasks: subset of [1, 2] expected")
        if self.data.n_scenes < 8:
            raise ConfigError("data.n_scenes: must be >= 8")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _enum(key, enum, value):
    try:
        enum(value)
    except ValueError:
        raise ConfigError(f"{key}: {value!r} is not one of {[e.value for e in enum]}") from None


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _coerce(key: str, tp, value):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(key, args[0], value)
    if origin in (list, typing.List):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        (inner,) = typing.get_args(tp)
        return [_coerce(f"{key}[{i}]", inner, v) for i, v in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected an object")
        return _from_dict(tp, value, key + ".")
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value


def _from_dict(cls, doc: dict, prefix: str = ""):
    hints = _hints(cls)
    unknown = set(doc) - set(hints)
    if unknown:
        raise ConfigError(f"unknown config key: {prefix}{sorted(unknown)[0]}")
    kwargs = {k: _coerce(prefix + k, hints[k], v) for k, v in doc.items()}
    return cls(**kwargs)


def config_from_dict(doc: dict) -> ExperimentConfig:
    return _from_dict(ExperimentConfig, doc).validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(doc)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``a.b=value`` strings; values parse as JSON, falling back to bare strings."""
    doc = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node, cls = doc, ExperimentConfig
        for i, part in enumerate(parts):
            hints = _hints(cls)
            if part not in hints:
                raise ConfigError(f"unknown config key: {'.'.join(parts[:i + 1])}")
            if i == len(parts) - 1:
                value = _parse_value(raw)
                tp = hints[part]
                if tp is str and not isinstance(value, str):
                    value = raw
                node[part] = _coerce(key, tp, value)
                if dataclasses.is_dataclass(node[part]):
                    node[part] = dataclasses.asdict(node[part])
            else:
                if not dataclasses.is_dataclass(hints[part]):
                    raise ConfigError(f"{'.'.join(parts[:i + 1])} is not a section")
                node, cls = node[part], hints[part]
    return config_from_dict(doc)
