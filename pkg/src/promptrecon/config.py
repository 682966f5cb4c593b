"""Run configuration: dataclass tree, flat-key TOML files, seed splitting."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .frontend import FrontendConfig
from .predictor import ModelConfig, PretrainConfig
from .tuner import TunerConfig

MODES = {
    "baseline": (False, False),
    "local": (True, False),
    "global": (False, True),
    "full": (True, True),
}
MODE_LABELS = {"baseline": "Baseline", "local": "Local*", "global": "Global*", "full": "Full*"}


@dataclass
class WorldConfig:
    family: str = "shifted"
    scene_seed: int = 0
    n_frames: int = 200
    revolutions: float = 0.5


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    tuner: TunerConfig = field(default_factory=TunerConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    mode: str = "full"
    seed: int = 0
    output_dir: str = "runs"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {sorted(MODES)}, got {self.mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def flat(self) -> dict[str, Any]:
        return flatten(self.to_dict())


def derive_seed(root: int, consumer: str) -> int:
    """Independent, reproducible sub-seed for one consumer of randomness."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(consumer.encode())])
    return int(ss.generate_state(1)[0])


def flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(value: Any, current: Any) -> Any:
    if isinstance(value, str):
        if isinstance(current, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {value!r}")
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
    elif isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Return a copy with dotted-key overrides applied (e.g. ``tuner.lr``)."""
    for key, value in overrides.items():
        cfg = _set(cfg, key.split("."), value, key)
    cfg.__post_init__()
    return cfg


def _set(obj, path: list[str], value, full_key: str):
    names = {f.name for f in fields(obj)}
    head = path[0]
    if head not in names:
        raise KeyError(f"unknown config key {full_key!r}")
    current = getattr(obj, head)
    if len(path) == 1:
        if is_dataclass(current):
            raise KeyError(f"{full_key!r} is a section, not a value")
        new = _coerce(value, current)
    else:
        if not is_dataclass(current):
            raise KeyError(f"unknown config key {full_key!r}")
        new = _set(current, path[1:], value, full_key)
    return replace(obj, **{head: new})


def load_config(path=None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Defaults, then the TOML file (nested tables or dotted keys), then overrides."""
    cfg = RunConfig()
    if path is not None:
        with open(path, "rb") as fh:
            cfg = apply_overrides(cfg, flatten(tomllib.load(fh)))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def dump_config(cfg: RunConfig, path) -> None:
    """Write a flat ``key = value`` TOML file that :func:`load_config` reads back."""
    lines = []
    for k, v in cfg.flat().items():
        if isinstance(v, bool):
            s = "true" if v else "false"
        elif isinstance(v, str):
            s = '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        else:
            s = repr(v)
        lines.append(f'"{k}" = {s}' if "." not in k else f"{k} = {s}")
    Path(path).write_text("\n".join(lines) + "\n")
