"""INI configuration files and the nested-dict snapshot stored in checkpoints.

Values are JSON literals (``0.001``, ``true``, ``null``, ``[0.9, 0.999]``); anything
that does not parse as JSON is taken as a bare string.  Unknown sections and
keys are errors.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import json
from pathlib import Path
from typing import Any, Mapping

from .encoder import EncoderConfig
from .losses import ContrastiveConfig, LossWeights
from .model import ModelConfig, PredictionConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


_NESTED = {"loss_weights", "contrastive", "prediction", "model"}
SECTIONS = ("train", "encoder", "model", "loss_weights", "contrastive", "prediction")


def _plain(obj) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(obj):
        if f.name in _NESTED or f.name == "encoder":
            continue
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def config_to_dict(cfg: TrainConfig) -> dict[str, dict[str, Any]]:
    return {
        "train": _plain(cfg),
        "encoder": _plain(cfg.model.encoder),
        "model": _plain(cfg.model),
        "loss_weights": _plain(cfg.loss_weights),
        "contrastive": _plain(cfg.contrastive),
        "prediction": _plain(cfg.prediction),
    }


def _check_keys(section: str, given: Mapping[str, Any], cls) -> None:
    allowed = {f.name for f in dataclasses.fields(cls)} - _NESTED - {"encoder"}
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s) {unknown}; allowed: {sorted(allowed)}")


def config_from_dict(d: Mapping[str, Mapping[str, Any]]) -> TrainConfig:
    unknown = sorted(set(d) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s) {unknown}; allowed: {list(SECTIONS)}")
    part = {s: dict(d.get(s, {})) for s in SECTIONS}
    for section, cls in (("train", TrainConfig), ("encoder", EncoderConfig), ("model", ModelConfig),
                         ("loss_weights", LossWeights), ("contrastive", ContrastiveConfig),
                         ("prediction", PredictionConfig)):
        _check_keys(section, part[section], cls)
    try:
        if part["loss_weights"]:
            defaults = dataclasses.asdict(LossWeights())
            defaults.update(part["loss_weights"])
            raw = [defaults[f"lambda{i}"] for i in range(1, 6)]
            # already-normalized weights pass through untouched so snapshots round-trip exactly
            weights = LossWeights(*raw) if abs(sum(raw) - 1.0) <= 1e-9 else LossWeights.normalized(*raw)
        else:
            weights = LossWeights()
        model = ModelConfig(encoder=EncoderConfig(**part["encoder"]), **part["model"])
        return TrainConfig(loss_weights=weights, contrastive=ContrastiveConfig(**part["contrastive"]),
                           prediction=PredictionConfig(**part["prediction"]), model=model, **part["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    d = {s: {k: _parse_value(v) for k, v in parser[s].items()} for s in parser.sections()}
    try:
        return config_from_dict(d)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), str(path))


def format_config(cfg: TrainConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, values in config_to_dict(cfg).items():
        parser[section] = {k: json.dumps(v) for k, v in values.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
