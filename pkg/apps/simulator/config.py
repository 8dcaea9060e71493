"""
Run configuration for simulate / evaluate / train-gru.

Files are plain `key = value` text read with python-dotenv. Values resolve
as settings defaults < file < command-line flags; NMP_ADDR in the
environment wins over the file for service.addr.
"""
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, Union

from django.conf import settings
from dotenv import dotenv_values

from apps.common.exceptions import ConfigurationError
from apps.geometry.grid import GridSpec
from .conditions import Condition, get_condition

logger = logging.getLogger(__name__)


def _bool(raw: Any) -> bool:
    if isinstance(raw, bool):
        return raw
    text = str(raw).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _optional_str(raw: Any) -> Optional[str]:
    text = "" if raw is None else str(raw).strip()
    return text or None


def _optional_float(raw: Any) -> Optional[float]:
    text = "" if raw is None else str(raw).strip()
    return float(text) if text else None


PARSERS: Dict[str, Callable[[Any], Any]] = {
    "city.seed": int,
    "city.extent_m": float,
    "grid.resolution_m": float,
    "grid.map_resolution_m": _optional_float,
    "grid.channels": int,
    "grid.tile_edge": int,
    "fusion.strategy": str,
    "fusion.alpha": float,
    "fusion.weights": _optional_str,
    "fusion.weight_seed": int,
    "fusion.use_pe": _bool,
    "trips.count": int,
    "trips.condition": str,
    "trips.mode": str,
    "trips.spacing_m": float,
    "trips.seed": int,
    "trips.repeat": _bool,
    "trips.frames": int,
    "service.addr": str,
    "store.dir": _optional_str,
    "store.capacity": int,
    "eval.bev_preset": str,
    "eval.render_dir": _optional_str,
}


def default_values() -> Dict[str, Any]:
    map_resolution = settings.NMP_MAP_RESOLUTION_M
    return {
        "city.seed": 7,
        "city.extent_m": 400.0,
        "grid.resolution_m": settings.NMP_RESOLUTION_M,
        "grid.map_resolution_m": None if map_resolution == settings.NMP_RESOLUTION_M else map_resolution,
        "grid.channels": settings.NMP_CHANNELS,
        "grid.tile_edge": settings.NMP_TILE_EDGE,
        "fusion.strategy": "ma",
        "fusion.alpha": settings.NMP_DEFAULT_ALPHA,
        "fusion.weights": None,
        "fusion.weight_seed": settings.NMP_WEIGHT_SEED,
        "fusion.use_pe": True,
        "trips.count": 3,
        "trips.condition": "normal",
        "trips.mode": "inter",
        "trips.spacing_m": 10.0,
        "trips.seed": 1,
        "trips.repeat": False,
        "trips.frames": 0,
        "service.addr": settings.NMP_ADDR,
        "store.dir": settings.NMP_STORE_DIR,
        "store.capacity": settings.NMP_STORE_CAPACITY,
        "eval.bev_preset": settings.NMP_BEV_PRESET,
        "eval.render_dir": None,
    }


@dataclass
class RunConfig:
    values: Dict[str, Any] = field(default_factory=default_values)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def with_changes(self, changes: Mapping[str, Any]) -> "RunConfig":
        values = dict(self.values)
        values.update(_parse(changes, "override"))
        return RunConfig(values)

    def as_dict(self) -> Dict[str, Any]:
        return dict(sorted(self.values.items()))

    def grid_spec(self) -> GridSpec:
        overrides = {
            "resolution": self["grid.resolution_m"],
            "channels": self["grid.channels"],
            "tile_edge": self["grid.tile_edge"],
        }
        if self["grid.map_resolution_m"] is not None:
            overrides["map_resolution"] = self["grid.map_resolution_m"]
        return GridSpec.from_settings(self["eval.bev_preset"], **overrides)

    def condition(self) -> Condition:
        return get_condition(self["trips.condition"])


def _parse(raw: Mapping[str, Any], source: str) -> Dict[str, Any]:
    unknown = sorted(set(raw) - set(PARSERS))
    if unknown:
        raise ConfigurationError(f"unknown configuration keys in {source}: {', '.join(unknown)}")
    parsed = {}
    for key, value in raw.items():
        try:
            parsed[key] = PARSERS[key](value)
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"bad value for {key} in {source}: {e}")
    return parsed


def load_run_config(path: Optional[Union[str, Path]] = None,
                    overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    values = default_values()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file {path} does not exist")
        values.update(_parse(dotenv_values(path), str(path)))
    if os.getenv("NMP_ADDR"):
        values["service.addr"] = os.environ["NMP_ADDR"]
    config = RunConfig(values)
    if overrides:
        config = config.with_changes({k: v for k, v in overrides.items() if v is not None})
    logger.debug(f"run config resolved from {path or 'defaults'}")
    return config
