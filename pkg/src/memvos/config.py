"""Run configuration: a strict JSON file with engine and train sections.

Unknown keys fail loudly and every complaint names the offending field,
so a typo in a config never silently falls back to a default.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict

from memvos.engine import ConfigError, EngineConfig
from memvos.training import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    engine: EngineConfig
    train: TrainConfig

    def to_dict(self) -> Dict[str, Any]:
        return {"engine": asdict(self.engine), "train": asdict(self.train)}


def _train_from_dict(raw: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"train.{unknown[0]}: unknown field")
    try:
        cfg = TrainConfig(**raw)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from exc
    return cfg


def run_config_from_dict(raw: Dict[str, Any]) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root: expected a JSON object")
    unknown = sorted(set(raw) - {"engine", "train"})
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown section (expected engine/train)")
    engine_raw = raw.get("engine", {})
    train_raw = raw.get("train", {})
    if not isinstance(engine_raw, dict):
        raise ConfigError("engine: expected a JSON object")
    if not isinstance(train_raw, dict):
        raise ConfigError("train: expected a JSON object")
    try:
        engine = EngineConfig.from_dict(engine_raw)
    except ConfigError as exc:
        raise ConfigError(f"engine.{exc}") from exc
    return RunConfig(engine=engine, train=_train_from_dict(train_raw))


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return run_config_from_dict(raw)


def default_run_config() -> RunConfig:
    return RunConfig(engine=EngineConfig().validate(), train=TrainConfig().validate())


def save_run_config(path: str, config: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
