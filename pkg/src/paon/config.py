"""Run configuration files (strict JSON).

Example::

    {
      "model": "padenet",
      "upscale": 2,
      "seed": 0,
      "network": {"blocks": 3, "channels": 48},
      "train": {"iterations": 500000, "patch": 64},
      "train_dir": "data/train",
      "val_dir": "data/val",
      "output_dir": "runs/padenet_x2"
    }

Unknown keys, at any level, are rejected. Relative paths are resolved
against the directory holding the config file. Environment variables are
never consulted.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigurationError
from .network import MODELS, NetworkConfig, preset, toy
from .training import TrainConfig, toy_train_config

TOP_KEYS = {"model", "upscale", "seed", "network", "train", "train_dir", "val_dir", "output_dir"}
REQUIRED = {"model", "train_dir", "val_dir", "output_dir"}
# fields owned by the top level rather than the sub-sections
_NET_RESERVED = {"model", "upscale"}
_TRAIN_RESERVED = {"seed", "upscale"}
# what --toy overrides
TOY_TRAIN_FIELDS = ("patch", "batch", "iterations", "val_interval", "lr_init")


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig
    train: TrainConfig
    train_dir: Path
    val_dir: Path
    output_dir: Path

    @property
    def seed(self) -> int:
        return self.train.seed

    def blob(self) -> dict:
        """Configuration recorded in (and hashed into) checkpoints."""
        return {"network": self.network.to_dict(), "train": self.train.to_dict()}

    def toy(self) -> "RunConfig":
        """Desk-scale version: 1 block, 8 channels, 500 iterations."""
        t = toy_train_config()
        train = dataclasses.replace(self.train, **{k: getattr(t, k) for k in TOY_TRAIN_FIELDS})
        return dataclasses.replace(self, network=toy(self.network), train=train)


def _check_value(section: str, key: str, default, value):
    where = f"{section}.{key}" if section else key
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = (isinstance(value, list) and len(value) == len(default)
              and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value))
        value = tuple(value) if ok else value
    else:  # pragma: no cover
        ok = True
    if not ok:
        raise ConfigurationError(f"config key '{where}': expected {type(default).__name__}, got {value!r}")
    return value


def _section(raw, name: str, cls, reserved: set[str]) -> dict:
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config key '{name}' must be an object")
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    out = {}
    for key, value in raw.items():
        if key not in defaults or key in reserved:
            raise ConfigurationError(f"unknown config key '{name}.{key}'")
        out[key] = _check_value(name, key, defaults[key], value)
    return out


def parse_run_config(data: dict, base_dir=".") -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("config must be a JSON object")
    unknown = sorted(set(data) - TOP_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown config key '{unknown[0]}'")
    missing = sorted(REQUIRED - set(data))
    if missing:
        raise ConfigurationError(f"missing config key '{missing[0]}'")
    model = data["model"]
    if model not in MODELS:
        raise ConfigurationError(f"config key 'model': expected one of {MODELS}, got {model!r}")
    upscale = _check_value("", "upscale", 2, data.get("upscale", 2))
    seed = _check_value("", "seed", 0, data.get("seed", 0))
    net_fields = _section(data.get("network", {}), "network", NetworkConfig, _NET_RESERVED)
    train_fields = _section(data.get("train", {}), "train", TrainConfig, _TRAIN_RESERVED)
    network = preset(model, upscale=upscale, **net_fields)
    train = TrainConfig(upscale=upscale, seed=seed, **train_fields)
    base = Path(base_dir)
    paths = {}
    for key in ("train_dir", "val_dir", "output_dir"):
        if not isinstance(data[key], str) or not data[key]:
            raise ConfigurationError(f"config key '{key}' must be a non-empty path string")
        paths[key] = base / data[key]
    return RunConfig(network, train, **paths)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigurationError(f"cannot read config {path}: {err.strerror or err}") from err
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigurationError(f"{path}: invalid JSON ({err})") from err
    return parse_run_config(data, path.parent)


def configs_from_blob(blob: dict) -> tuple[NetworkConfig, TrainConfig]:
    """Rebuild the configs stored in a checkpoint."""
    try:
        net = dict(blob["network"])
        model = net.pop("model")
        return preset(model, **net), TrainConfig(**blob["train"])
    except (KeyError, TypeError) as err:
        raise ConfigurationError(f"checkpoint config is incomplete: {err}") from err
