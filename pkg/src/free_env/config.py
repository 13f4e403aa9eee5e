"""Run configuration: one JSON file, strict keys, nested sections."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from .describe import PromptConfig
from .simulate import ObsParams, SimParams, WeatherGenParams
from .train import DESK_MODEL, ModelConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    n_sites: int = 8
    days: int = 2400
    train_days: int = 1200
    weather: WeatherGenParams = WeatherGenParams()
    sim: SimParams = SimParams()
    obs: ObsParams = ObsParams()
    prompt: PromptConfig = PromptConfig()
    model: ModelConfig = DESK_MODEL
    pretrain: TrainConfig = TrainConfig(phase="pretrain", epochs=15, patience=4, lr=1e-3)
    finetune: TrainConfig = TrainConfig(phase="finetune", epochs=12, patience=4, lr=1e-4)
    scratch: TrainConfig = TrainConfig(phase="finetune", epochs=30, patience=5, lr=1e-3)
    seeds: Tuple[int, ...] = (1, 2, 3, 4, 5)
    fractions: Tuple[float, ...] = (0.01, 0.02, 0.04, 1.0)
    include_scratch: bool = True
    aux_fraction: float = 1.0
    aux_observable_fraction: float = 1.0
    aux_withhold: bool = False
    m_values: Tuple[int, ...] = (0, 4)
    feature_fraction: float = 1.0
    transfer_sources: Tuple[str, ...] = ("s1", "s2", "s3", "s4", "s5", "s6", "s7")
    transfer_targets: Tuple[str, ...] = ("s8",)
    transfer_fractions: Tuple[float, ...] = (0.01,)
    probe_per_season: int = 200
    out_dir: str = "runs"
    cache_dir: Optional[str] = None
    workers: int = 1

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _build(cls, data: Dict[str, Any], path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown keys at {path or 'top level'}: {unknown}")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _coerce(hints[key], value, f"{path}.{key}" if path else key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _coerce(tp, value, path):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None:
            return None
        tp = next(a for a in args if a is not type(None))
        return _coerce(tp, value, path)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is tuple:
        return tuple(value)
    return value


def config_from_dict(data: Dict[str, Any], base: Optional[RunConfig] = None) -> RunConfig:
    """Build a RunConfig; sections given as objects are merged over ``base``."""
    merged = to_dict(base or RunConfig())
    _deep_update(merged, data, "")
    return _build(RunConfig, merged, "")


def _deep_update(dst: dict, src: dict, path: str):
    for k, v in src.items():
        if k not in dst:
            raise ConfigError(f"unknown keys at {path or 'top level'}: [{k!r}]")
        if isinstance(v, dict) and isinstance(dst[k], dict):
            _deep_update(dst[k], v, f"{path}.{k}" if path else k)
        else:
            dst[k] = v


def to_dict(cfg) -> Dict[str, Any]:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(data)


def write_config(cfg: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")
