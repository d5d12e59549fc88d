"""JSON <-> config dataclasses.

Field names in the JSON are exactly the dataclass field names. Missing
fields take their defaults; unknown fields are an error. ``SAX_SEED`` in the
environment replaces the workload seed of every config loaded here.
"""
from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Tuple, Union

from agentsim.engine import EngineConfig
from agentsim.errors import AgentSimError, ConfigError
from agentsim.orchestrator import RetrievalMode, RunConfig
from agentsim.workload import Arrival, IntDistribution, WorkloadConfig

SEED_ENV = "SAX_SEED"


@dataclass(frozen=True)
class IndexParams:
    M: int = 16
    ef_construction: int = 100
    seed: int = 0


@dataclass(frozen=True)
class Variation:
    name: str
    config: RunConfig = field(default_factory=RunConfig)


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    variations: Tuple[Variation, ...]
    output_dir: str
    dataset: str
    index: Optional[str] = None
    index_params: IndexParams = field(default_factory=IndexParams)
    workers: int = 1

    def __post_init__(self):
        if not self.variations:
            raise ConfigError("an experiment needs at least one variation")
        names = [v.name for v in self.variations]
        if len(set(names)) != len(names):
            raise ConfigError(f"variation names must be unique: {names}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


_NESTED = {
    RunConfig: {"retrieval_mode": RetrievalMode, "engine": EngineConfig, "workload": WorkloadConfig},
    WorkloadConfig: {"arrival": Arrival, "retrievals_per_request": IntDistribution,
                     "segment_tokens": IntDistribution},
    Variation: {"config": RunConfig},
    ExperimentSpec: {"index_params": IndexParams},
}


def _check_type(cls, name: str, value: Any) -> None:
    hint = typing.get_type_hints(cls)[name]
    base = typing.get_origin(hint)
    args = typing.get_args(hint)
    if base is Union:
        if value is None and type(None) in args:
            return
        hint = next(a for a in args if a is not type(None))
    ok = {
        int: lambda v: isinstance(v, int) and not isinstance(v, bool),
        float: lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        bool: lambda v: isinstance(v, bool),
        str: lambda v: isinstance(v, str),
    }.get(hint)
    if ok is not None and not ok(value):
        raise ConfigError(f"{cls.__name__}.{name}: expected {hint.__name__}, got {value!r}")


def from_dict(cls, data: Mapping[str, Any], where: str = ""):
    """Build ``cls`` from a JSON mapping, rejecting unknown fields."""
    where = where or cls.__name__
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {unknown}")
    nested = _NESTED.get(cls, {})
    kwargs = {}
    for name, value in data.items():
        if name in nested:
            value = from_dict(nested[name], value, f"{where}.{name}")
        elif cls is ExperimentSpec and name == "variations":
            if not isinstance(value, list):
                raise ConfigError(f"{where}.variations: expected a list")
            value = tuple(from_dict(Variation, v, f"{where}.variations[{i}]")
                          for i, v in enumerate(value))
        else:
            _check_type(cls, name, value)
            if typing.get_type_hints(cls)[name] is float and isinstance(value, int):
                value = float(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except AgentSimError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def to_dict(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(x) for x in obj]
    return obj


def env_seed() -> Optional[int]:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def with_seed(cfg: RunConfig, seed: Optional[int]) -> RunConfig:
    if seed is None:
        return cfg
    return dataclasses.replace(cfg, workload=dataclasses.replace(cfg.workload, seed=seed))


def apply_env(obj):
    """Apply ``SAX_SEED`` to a RunConfig or to every variation of an ExperimentSpec."""
    seed = env_seed()
    if seed is None:
        return obj
    if isinstance(obj, RunConfig):
        return with_seed(obj, seed)
    if isinstance(obj, ExperimentSpec):
        vs = tuple(dataclasses.replace(v, config=with_seed(v.config, seed)) for v in obj.variations)
        return dataclasses.replace(obj, variations=vs)
    raise TypeError(f"cannot apply a seed to {type(obj).__name__}")


def _read_json(path: Union[str, Path]):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def load_run_config(path: Union[str, Path]) -> RunConfig:
    return apply_env(from_dict(RunConfig, _read_json(path)))


def load_experiment(path: Union[str, Path]) -> ExperimentSpec:
    return apply_env(from_dict(ExperimentSpec, _read_json(path)))


def dumps(obj) -> str:
    return json.dumps(to_dict(obj), indent=2) + "\n"
