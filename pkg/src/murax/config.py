"""Run configuration: sectioned defaults, profiles, file loading and ``section.key=value`` overrides."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, fields
from typing import Any, Dict, Iterable, List, Optional

import yaml

from .augment import AugmentConfig
from .model import DenseNetConfig
from .preprocess import PreprocessConfig
from .synth import SynthSpec
from .trainer import TrainConfig

DATA_ROOT_ENV = "MURAX_DATA_ROOT"
PROFILES = ("desk", "full")
SECTIONS = ("data", "preprocess", "augment", "model", "train", "eval", "synth")


class ConfigKeyError(KeyError):
    """Unknown section or key; the CLI maps this to a usage error."""

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown config key"


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def _defaults(profile: str) -> Dict[str, Dict[str, Any]]:
    if profile not in PROFILES:
        raise ConfigKeyError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    model = DenseNetConfig.desk() if profile == "desk" else DenseNetConfig.full()
    pre = asdict(PreprocessConfig(side=model.input_side))
    pre.pop("mean")
    pre.pop("std")
    model_d = model.to_dict()
    model_d["precision"] = "single"
    train = asdict(TrainConfig())
    train.update(n_models=4, keep_epoch_checkpoints=True)
    return {
        "data": {"root": os.environ.get(DATA_ROOT_ENV, "data"), "source": "tree", "verify_images": True},
        "preprocess": pre,
        "augment": asdict(AugmentConfig()),
        "model": model_d,
        "train": train,
        "eval": {"batch_size": 32},
        "synth": asdict(SynthSpec(image_side=64 if profile == "desk" else 256)),
    }


def _coerce(section: str, key: str, value, default):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError(f"{where} expects true/false, got {value!r}")
        return value
    if isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)):
            raise ValueError(f"{where} expects a list, got {value!r}")
        return [_coerce(section, key, v, default[0]) if default else v for v in value]
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if default is None or value is None or isinstance(value, type(default)):
        return value
    if isinstance(default, (int, float)) and value == "auto":
        return value
    raise ValueError(f"{where} expects {type(default).__name__}, got {value!r}")


class RunConfig:
    """Nested ``section -> key -> value`` with a fixed key set per section."""

    def __init__(self, profile: str = "desk"):
        self.profile = profile
        self.values = _defaults(profile)

    def set(self, section: str, key: str, value) -> None:
        if section not in self.values:
            raise ConfigKeyError(f"unknown config section {section!r}")
        if key not in self.values[section]:
            raise ConfigKeyError(f"unknown config key {section}.{key}")
        self.values[section][key] = _coerce(section, key, value, _defaults(self.profile)[section][key])

    def update(self, nested: dict) -> None:
        for section, body in nested.items():
            if section == "profile":
                continue
            if section not in self.values:
                raise ConfigKeyError(f"unknown config section {section!r}")
            if not isinstance(body, dict):
                raise ValueError(f"config section {section!r} must be a mapping")
            for key, value in body.items():
                self.set(section, key, value)

    def get(self, section: str, key: str):
        return self.values[section][key]

    def flat(self) -> List[str]:
        """Sorted ``section.key=value`` lines (values as compact JSON)."""
        lines = [f"profile={json.dumps(self.profile)}"]
        for section, body in self.values.items():
            for key, value in body.items():
                lines.append(f"{section}.{key}={json.dumps(_plain(value), sort_keys=True)}")
        return sorted(lines)

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.flat()).encode()).hexdigest()[:16]

    # typed views -------------------------------------------------------

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig(**self.values["preprocess"])

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(**self.values["augment"])

    def model_config(self) -> DenseNetConfig:
        d = dict(self.values["model"])
        d.pop("precision")
        return DenseNetConfig.from_dict(d)

    @property
    def precision(self) -> str:
        return self.values["model"]["precision"]

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.values["train"].items() if k in names})

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(**self.values["synth"])

    def validate(self) -> None:
        """Build every typed config once and check cross-section consistency."""
        self.preprocess_config()
        self.augment_config()
        model = self.model_config()
        self.train_config()
        self.synth_spec()
        if self.precision not in ("single", "double"):
            raise ValueError(f"model.precision must be 'single' or 'double', got {self.precision!r}")
        if self.values["preprocess"]["side"] != model.input_side:
            raise ValueError(
                f"preprocess.side={self.values['preprocess']['side']} differs from model.input_side={model.input_side}"
            )
        if self.values["data"]["source"] not in ("tree", "csv"):
            raise ValueError("data.source must be 'tree' or 'csv'")


def read_file(path) -> dict:
    with open(os.fspath(path)) as fh:
        text = fh.read()
    data = json.loads(text) if os.fspath(path).endswith(".json") else yaml.safe_load(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config file must hold a mapping of sections")
    return data


def parse_assignment(text: str):
    """``section.key=value`` with the value parsed as YAML (numbers, lists, null, booleans)."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigKeyError(f"override {text!r} is not of the form section.key=value")
    lhs, rhs = text.split("=", 1)
    section, key = lhs.split(".", 1)
    return section.strip(), key.strip(), yaml.safe_load(rhs)


def resolve(
    profile: Optional[str] = None,
    config_path: Optional[str] = None,
    overrides: Iterable[str] = (),
    seed: Optional[int] = None,
) -> RunConfig:
    """Defaults (by profile) < config file < command-line flags."""
    file_data = read_file(config_path) if config_path else {}
    chosen = profile or file_data.get("profile") or "desk"
    cfg = RunConfig(chosen)
    cfg.update(file_data)
    for item in overrides:
        cfg.set(*parse_assignment(item))
    if seed is not None:
        cfg.set("train", "seed", int(seed))
    cfg.validate()
    return cfg
