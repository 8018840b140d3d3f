"""JSON run configuration: ``data``, ``model``, ``train`` and ``output`` sections.

Unknown keys are rejected; absent optional keys take defaults.  Errors are
:class:`~destine.model.ConfigError` carrying the dotted key path.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from typing import Optional

from .features import FieldSchema, SchemaError
from .model import ConfigError, ModelConfig
from .training import TrainConfig

SECTIONS = ("data", "model", "train", "output")
DATA_KEYS = {"path", "schema", "split_seed", "min_count", "ratios"}
OUTPUT_KEYS = {"checkpoint", "metrics"}
# filled from the data at train time
DERIVED_MODEL_KEYS = ("num_fields", "total_features")


@dataclass
class DataConfig:
    path: str
    schema: FieldSchema
    split_seed: int = 0
    min_count: int = 2
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def to_dict(self) -> dict:
        return {"path": self.path, "schema": self.schema.to_dict(), "split_seed": self.split_seed,
                "min_count": self.min_count, "ratios": list(self.ratios)}


@dataclass
class OutputConfig:
    checkpoint: str
    metrics: str


@dataclass
class RunConfig:
    data: Optional[DataConfig]
    model: dict
    train: TrainConfig
    output: Optional[OutputConfig]

    def model_config(self, **derived) -> ModelConfig:
        values = {**self.model}
        for key, value in derived.items():
            if key in values and values[key] != value:
                raise ConfigError(f"model.{key}", f"is {values[key]} but the data implies {value}")
            values[key] = value
        try:
            return ModelConfig.from_dict(values)
        except ConfigError as exc:
            raise ConfigError(f"model.{exc.key}", str(exc).split(": ", 1)[1]) from None

    def to_dict(self) -> dict:
        """Effective configuration with defaults applied."""
        model_defaults = {f.name: f.default for f in fields(ModelConfig) if f.name not in DERIVED_MODEL_KEYS}
        model = ModelConfig(num_fields=1, total_features=1, **{**model_defaults, **{
            k: v for k, v in self.model.items() if k not in DERIVED_MODEL_KEYS}}).to_dict()
        for key in DERIVED_MODEL_KEYS:
            if key in self.model:
                model[key] = self.model[key]
            else:
                model.pop(key)
        out = {"model": model, "train": asdict(self.train)}
        if self.data is not None:
            out["data"] = self.data.to_dict()
        if self.output is not None:
            out["output"] = asdict(self.output)
        return out


def _check_keys(section: str, d, allowed):
    if not isinstance(d, dict):
        raise ConfigError(section, "must be a JSON object")
    for key in d:
        if key not in allowed:
            raise ConfigError(f"{section}.{key}", "unknown key")


def _parse_data(d: dict) -> DataConfig:
    _check_keys("data", d, DATA_KEYS)
    for key in ("path", "schema"):
        if key not in d:
            raise ConfigError(f"data.{key}", "missing required key")
    if not isinstance(d["path"], str):
        raise ConfigError("data.path", "must be a string")
    schema_d = d["schema"]
    _check_keys("data.schema", schema_d, {"fields", "label_column"})
    if "fields" not in schema_d or not isinstance(schema_d["fields"], list):
        raise ConfigError("data.schema.fields", "must be a list of {name, kind} objects")
    for i, f in enumerate(schema_d["fields"]):
        _check_keys(f"data.schema.fields[{i}]", f, {"name", "kind"})
        if "name" not in f:
            raise ConfigError(f"data.schema.fields[{i}].name", "missing required key")
    try:
        schema = FieldSchema.from_dict(schema_d)
    except SchemaError as exc:
        raise ConfigError("data.schema", str(exc)) from None
    ratios = tuple(d.get("ratios", (0.8, 0.1, 0.1)))
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError("data.ratios", "must be three positive numbers summing to 1")
    min_count = d.get("min_count", 2)
    if not isinstance(min_count, int) or min_count < 1:
        raise ConfigError("data.min_count", "must be a positive integer")
    return DataConfig(d["path"], schema, int(d.get("split_seed", 0)), min_count, ratios)


def _parse_model(d: dict) -> dict:
    allowed = {f.name for f in fields(ModelConfig)}
    _check_keys("model", d, allowed)
    probe = {"num_fields": 1, "total_features": 1, **d}
    try:
        ModelConfig.from_dict(probe)
    except ConfigError as exc:
        raise ConfigError(f"model.{exc.key}", str(exc).split(": ", 1)[1]) from None
    except TypeError as exc:
        raise ConfigError("model", str(exc)) from None
    return dict(d)


def _parse_train(d: dict) -> TrainConfig:
    allowed = {f.name for f in fields(TrainConfig)}
    _check_keys("train", d, allowed)
    try:
        return TrainConfig(**d)
    except ConfigError as exc:
        raise ConfigError(f"train.{exc.key}", str(exc).split(": ", 1)[1]) from None
    except TypeError as exc:
        raise ConfigError("train", str(exc)) from None


def parse_run_config(doc: dict, require: tuple[str, ...] = ()) -> RunConfig:
    _check_keys("config", doc, set(SECTIONS))
    needs = {"data": "data.path, data.schema", "output": "output.checkpoint, output.metrics"}
    for section in require:
        if section not in doc:
            raise ConfigError(section, f"missing required section ({needs.get(section, section)})")
    data = _parse_data(doc["data"]) if "data" in doc else None
    output = None
    if "output" in doc:
        _check_keys("output", doc["output"], OUTPUT_KEYS)
        for key in OUTPUT_KEYS:
            if key not in doc["output"]:
                raise ConfigError(f"output.{key}", "missing required key")
        output = OutputConfig(doc["output"]["checkpoint"], doc["output"]["metrics"])
    return RunConfig(data, _parse_model(doc.get("model", {})), _parse_train(doc.get("train", {})), output)


def load_run_config(path, require: tuple[str, ...] = ()) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
    return parse_run_config(doc, require)
