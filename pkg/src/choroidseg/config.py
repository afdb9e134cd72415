"""Run configuration files: a small INI dialect with fixed sections.

Sections are [data], [model], [train], [loss], [eval]; every key maps onto a
train-config field. Unknown sections or keys are rejected, and serialization
is canonical so identical configs produce identical bytes (run directories
are content-addressed by this).
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from pathlib import Path

from .errors import ConfigError
from .trainer import TrainConfig, validate_config

# section -> key -> (parser, attribute path on TrainConfig)
_SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {
        "source_dir": (str, "source_dir"),
        "target_dir": (str, "target_dir"),
        "val_dir": (str, "val_dir"),
        "input_size": (int, "input_size"),
    },
    "model": {
        "base_width": (int, "base_width"),
        "depth": (int, "depth"),
        "extractor": (str, "extractor"),
        "extractor_weights": (str, "extractor_weights"),
    },
    "train": {
        "mode": (str, "mode"),
        "steps": (int, "steps"),
        "batch_size": (int, "batch_size"),
        "seed": (int, "seed"),
        "num_threads": (int, "num_threads"),
        "lr_seg": (float, "lr_seg"),
        "lr_disc": (float, "lr_disc"),
        "adam_beta1": (float, "adam_beta1"),
        "adam_beta2": (float, "adam_beta2"),
        "weight_decay": (float, "weight_decay"),
    },
    "loss": {
        "lambda_seg": (float, "weights.lambda_seg"),
        "lambda_adv": (float, "weights.lambda_adv"),
        "lambda_per": (float, "weights.lambda_per"),
        "eps": (float, "weights.eps"),
    },
    "eval": {
        "eval_every": (int, "eval_every"),
        "eval_batch_size": (int, "eval_batch_size"),
    },
}


def default_config() -> TrainConfig:
    return TrainConfig()


def _get_attr(config: TrainConfig, path: str):
    obj = config
    for part in path.split("."):
        obj = getattr(obj, part)
    return obj


def parse_config(text: str) -> TrainConfig:
    """Parse INI text into a TrainConfig, rejecting anything off-schema."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    field_values: dict[str, object] = {}
    weight_values: dict[str, object] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            caster, attr = _SCHEMA[section][key]
            try:
                value = caster(raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc
            if attr.startswith("weights."):
                weight_values[attr.split(".", 1)[1]] = value
            else:
                field_values[attr] = value

    defaults = TrainConfig()
    weights = dataclasses.replace(defaults.weights, **weight_values)
    return dataclasses.replace(defaults, weights=weights, **field_values)


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def serialize_config(config: TrainConfig) -> str:
    """Canonical INI form: fixed section and key order, `key = value` lines."""
    lines = []
    for section, keys in _SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (_, attr) in keys.items():
            lines.append(f"{key} = {_get_attr(config, attr)}")
        lines.append("")
    return "\n".join(lines)


def save_config(config: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(serialize_config(config))


def config_hash(config: TrainConfig) -> str:
    """Content address of a config: short SHA-256 of its canonical form."""
    return hashlib.sha256(serialize_config(config).encode()).hexdigest()[:12]


def validated(config: TrainConfig) -> TrainConfig:
    return validate_config(config)
