"""Run configuration: nested dataclasses serialised as flat dotted key = value text.

Example file::

    # comments start with '#'
    method = adaptive_rl
    data.name = cifar10
    train.epsilon_max = 8/255
    search.band.upper = 0.1

Floats accept exact fractions such as ``8/255``. Dataset presets fill any
training key that was not given explicitly.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

from .sac import AgentConfig
from .search import RewardConfig, SearchConfig, p_min
from .training import BASELINE_KINDS, TrainConfig

__version__ = "0.1.0"


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass
class DataSection:
    name: str = "mnist"
    n_train: Optional[int] = None
    n_test: Optional[int] = None
    data_dir: Optional[str] = None


@dataclass
class PolicySection:
    """Fitting the step-size policy on a frozen classifier, and its reward."""
    epochs: int = 1
    batch_size: int = 128
    updates_per_step: float = 0.02
    max_updates: Optional[int] = 3000
    p_value: Optional[float] = None  # None selects step_max * sigmoid(1)


@dataclass
class EvalSection:
    attack_steps: tuple = (10, 20, 50)
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    random_start: bool = True
    n: Optional[int] = None
    batch_size: int = 256


@dataclass
class RunConfig:
    method: str = "adaptive_rl"
    model: str = "auto"
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    search: SearchConfig = field(default_factory=SearchConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    policy: PolicySection = field(default_factory=PolicySection)
    eval: EvalSection = field(default_factory=EvalSection)

    @property
    def model_name(self) -> str:
        if self.model != "auto":
            return self.model
        return "mnist_cnn" if self.data.name == "mnist" else "preact_resnet18"

    def reward_config(self) -> RewardConfig:
        p = self.policy.p_value if self.policy.p_value is not None else p_min(self.search.step_max)
        return RewardConfig(band=self.search.band, p_value=p)

    def flat(self) -> dict:
        return flatten(self)

    def dumps(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.flat().items())


def _eps_key(eps: float) -> Optional[int]:
    n = round(eps * 255)
    return n if abs(eps * 255 - n) < 1e-6 else None


# Per-dataset defaults for keys the user did not set. Lambda depends on epsilon_max.
PRESETS = {
    "mnist": {"method": "standard", "train.epochs": 1, "train.cycle_epochs": 1, "train.lr_max": 0.1,
              "train.batch_size": 64, "train.augment": False, "train.epsilon_max": 0.0,
              "search.epsilon_max": 1.0, "search.epsilon_hi": 1.0},
    "cifar10": {"train.epochs": 40, "train.cycle_epochs": 30, "train.lr_max": 0.3, "train.lr_min": 1e-3,
                "train.warmup_epochs": 0, "_lam": {8: 0.2, 10: 0.356}},
    "svhn": {"train.epochs": 20, "train.cycle_epochs": 15, "train.lr_max": 0.15, "train.lr_min": 1e-3,
             "train.warmup_epochs": 5, "_lam": {8: 2.5, 10: 2.812}},
    "synth2d": {"method": "standard", "train.epochs": 1, "train.cycle_epochs": 1, "train.augment": False},
}


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def flatten(obj, prefix: str = "") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_float(text: str) -> float:
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigError(f"not a number: {text!r}") from e


def _parse(text: str, tp, key: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if text.strip().lower() in ("none", "null", ""):
            return None
        return _parse(text, args[0], key)
    if tp is bool:
        t = text.strip().lower()
        if t in ("1", "true", "yes", "on"):
            return True
        if t in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: not a boolean: {text!r}")
    if tp is int:
        try:
            return int(text)
        except ValueError as e:
            raise ConfigError(f"{key}: not an integer: {text!r}") from e
    if tp is float:
        return parse_float(text)
    if tp is tuple or origin is tuple:
        parts = [p for p in text.split(",") if p.strip()]
        return tuple(int(p) if p.strip().lstrip("-").isdigit() else parse_float(p) for p in parts)
    return text.strip()


def _field_types(cls, prefix="") -> dict:
    out = {}
    hints = _hints(cls)
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            out.update(_field_types(tp, prefix + f.name + "."))
        else:
            out[prefix + f.name] = tp
    return out


FIELD_TYPES = _field_types(RunConfig)


def parse_assignments(lines) -> dict:
    """``key = value`` lines (or ``key=value`` strings) to a typed flat dict."""
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _parse(value, FIELD_TYPES[key], key)
    return out


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} not found")
    return parse_assignments(path.read_text().splitlines())


def _build(cls, flat: dict, prefix: str = ""):
    kwargs = {}
    hints = _hints(cls)
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        key = prefix + f.name
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = _build(tp, flat, key + ".")
        elif key in flat:
            kwargs[f.name] = flat[key]
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{prefix.rstrip('.') or 'run'}: {e}") from e


def resolve(overrides: dict) -> RunConfig:
    """Apply dataset presets beneath explicit overrides and build the config."""
    flat = dict(overrides)
    name = flat.get("data.name", DataSection.name)
    preset = dict(PRESETS.get(name, {}))
    lam_table = preset.pop("_lam", None)
    for k, v in preset.items():
        flat.setdefault(k, v)
    if lam_table is not None and "train.lam" not in flat:
        eps = flat.get("train.epsilon_max", TrainConfig.epsilon_max)
        key = _eps_key(eps)
        if key in lam_table:
            flat["train.lam"] = lam_table[key]
    # the search budget follows the training budget unless set separately
    if "train.epsilon_max" in flat and "search.epsilon_max" not in flat and flat["train.epsilon_max"] > 0:
        flat["search.epsilon_max"] = flat["train.epsilon_max"]
    if "search.epsilon_max" in flat and "search.epsilon_step" not in flat:
        flat["search.epsilon_step"] = min(SearchConfig.epsilon_step, flat["search.epsilon_max"])
    cfg = _build(RunConfig, flat)
    if cfg.method not in BASELINE_KINDS:
        raise ConfigError(f"unknown method {cfg.method!r}; expected one of {BASELINE_KINDS}")
    if cfg.train.warmup_epochs >= cfg.train.epochs and cfg.train.warmup_epochs > 0:
        raise ConfigError("train.warmup_epochs must be below train.epochs")
    try:
        cfg.reward_config()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return cfg


def load_run_config(text: str) -> RunConfig:
    """Rebuild a config from its ``dumps`` text (no presets applied)."""
    return _build(RunConfig, parse_assignments(text.splitlines()))
