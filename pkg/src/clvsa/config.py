"""JSON run configuration with sections data/model/train/backtest/synth."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .backtest import COST_PRESETS, CostModel
from .marketdata import SynthConfig
from .model import ModelConfig
from .trainer import DataConfig, TrainConfig

SECTIONS = ("data", "model", "train", "backtest", "synth")


class ConfigError(ValueError):
    pass


def _build(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cost: CostModel = field(default_factory=lambda: COST_PRESETS["CL"])
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        train.pop("model")
        return {"data": asdict(self.data), "model": self.model.to_dict(), "train": train,
                "backtest": asdict(self.cost), "synth": asdict(self.synth)}


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    extra = set(doc) - set(SECTIONS)
    if extra:
        raise ConfigError(f"unknown config sections: {', '.join(sorted(extra))}")
    backtest = dict(doc.get("backtest", {}))
    preset = backtest.pop("preset", None)
    if preset is not None:
        if preset not in COST_PRESETS:
            raise ConfigError(f"[backtest] unknown cost preset {preset!r}")
        cost = COST_PRESETS[preset]
        backtest = {**asdict(cost), **backtest}
    model = _build(ModelConfig, doc.get("model", {}), "model")
    train_doc = dict(doc.get("train", {}))
    if "model" in train_doc:
        raise ConfigError("[train] model settings belong in the model section")
    train = _build(TrainConfig, {**train_doc, "model": model}, "train")
    synth = _build(SynthConfig, doc.get("synth", {}), "synth")
    try:
        synth.validate()
    except ValueError as exc:
        raise ConfigError(f"[synth] {exc}") from None
    return RunConfig(
        data=_build(DataConfig, doc.get("data", {}), "data"),
        model=model,
        train=train,
        cost=_build(CostModel, backtest, "backtest"),
        synth=synth,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(doc)
