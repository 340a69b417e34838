"""Run configuration documents and their JSON schemas.

Each command reads one JSON document. Its schema is derived from the
dataclasses that consume it, so unknown keys and wrongly typed values are
rejected before any computation starts.
"""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema

from .instances import InstanceSpec
from .orchestrator import DEFAULT_SHIFTS, SubsetSearchConfig, SyntheticSpec
from .policy import PolicyConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


_NUMBER = {"type": "number"}
_INTEGER = {"type": "integer"}


def _type_schema(tp: Any) -> dict:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        return {"anyOf": [_type_schema(a) for a in args]}
    if tp is type(None):
        return {"type": "null"}
    if tp is bool:
        return {"type": "boolean"}
    if tp is int:
        return _INTEGER
    if tp is float:
        return _NUMBER
    if tp is str:
        return {"type": "string"}
    if origin is tuple:
        if len(args) == 2 and args[1] is Ellipsis:
            return {"type": "array", "items": _type_schema(args[0])}
        return {"type": "array", "prefixItems": [_type_schema(a) for a in args],
                "minItems": len(args), "maxItems": len(args)}
    if origin is list:
        return {"type": "array", "items": _type_schema(args[0])}
    if dataclasses.is_dataclass(tp):
        return object_schema(tp)
    raise TypeError(f"no schema for {tp!r}")


def object_schema(cls: type) -> dict:
    hints = typing.get_type_hints(cls)
    props = {f.name: _type_schema(hints[f.name]) for f in dataclasses.fields(cls)}
    return {"type": "object", "properties": props, "additionalProperties": False}


def build(cls: type, doc: dict | None):
    """Instantiate ``cls`` from a validated sub-document (nested dataclasses included)."""
    doc = dict(doc or {})
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        if f.name in doc and dataclasses.is_dataclass(hints[f.name]) and isinstance(doc[f.name], dict):
            doc[f.name] = build(hints[f.name], doc[f.name])
        elif f.name in doc and isinstance(doc[f.name], list):
            doc[f.name] = tuple(doc[f.name])
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


@dataclass
class TrainRun:
    model: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0


@dataclass
class SolveRun:
    search: SubsetSearchConfig = field(default_factory=SubsetSearchConfig)
    shifts: tuple[tuple[float, float], ...] = DEFAULT_SHIFTS
    checkpoint: str | None = None
    instance: str | None = None
    seed: int = 0


@dataclass
class BenchmarkRun:
    qubit_counts: tuple[int, ...] = (4, 5, 6, 7, 8, 9, 10)
    trials: int = 10
    shots: int | None = 500
    noise_p: float = 0.0
    noise_q: float = 0.0
    seed: int = 0


@dataclass
class GenInstanceRun:
    spec: SyntheticSpec = field(default_factory=SyntheticSpec)


RUN_TYPES = {"train": TrainRun, "solve": SolveRun, "benchmark-qonn": BenchmarkRun, "gen-instance": GenInstanceRun}


def schema(command: str) -> dict:
    s = object_schema(RUN_TYPES[command])
    s["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    s["title"] = f"qvrp {command} run configuration"
    return s


def merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        out[k] = merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def parse(command: str, doc: dict):
    try:
        jsonschema.validate(doc, schema(command), cls=jsonschema.Draft202012Validator)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from exc
    run = build(RUN_TYPES[command], doc)
    if command == "solve":
        run.shifts = tuple(tuple(float(x) for x in w) for w in run.shifts)
    return run


def load(command: str, path: str | Path | None, overrides: dict | None = None):
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("a config document must be a JSON object")
    if overrides:
        doc = merge(overrides, doc)
    return parse(command, doc)


def to_dict(run) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(run)))


# training presets: 8-node runs over the rank / cyclic matrix, desk-scale epochs
TRAIN_PRESETS: dict[str, dict] = {
    "classical-3truck": dict(
        model=dict(d=64, d_ff=256, n_heads=8),
        train=dict(num_epochs=20, batch_size=32, learning_rate=1e-3,
                   instances=dict(n_nodes=8, n_trucks=3, n_demands=10, rank3_fraction=0.5, cyclic_fraction=0.5))),
    "quantum-rank2": dict(
        model=dict(d=64, d_ff=256, n_heads=8, encoder_quantum_heads=8, encoder_quantum_projections=["query", "key"]),
        train=dict(num_epochs=20, batch_size=32, learning_rate=1e-3,
                   instances=dict(n_nodes=8, n_trucks=2, n_demands=8))),
    "quantum-rank23": dict(
        model=dict(d=64, d_ff=256, n_heads=8, encoder_quantum_heads=8, encoder_quantum_projections=["query", "key"]),
        train=dict(num_epochs=20, batch_size=32, learning_rate=1e-3,
                   instances=dict(n_nodes=8, n_trucks=2, n_demands=8, rank3_fraction=0.5))),
    "quantum-cyclic": dict(
        model=dict(d=64, d_ff=256, n_heads=8, encoder_quantum_heads=8, encoder_quantum_projections=["query", "key"]),
        train=dict(num_epochs=20, batch_size=32, learning_rate=1e-3,
                   instances=dict(n_nodes=8, n_trucks=2, n_demands=8, cyclic_fraction=1.0))),
    "desk": dict(
        model=dict(d=32, d_ff=64, n_heads=4),
        train=dict(num_epochs=200, batch_size=64, batches_per_epoch=10, learning_rate=1e-3,
                   instances=dict(n_nodes=4, n_trucks=1, n_demands=5))),
}

GEN_PRESETS: dict[str, dict] = {
    "full-scale": dict(spec=dict()),
    "eight-node": dict(spec=dict(n_nodes=8, n_groups=20, total_boxes=200)),
}
