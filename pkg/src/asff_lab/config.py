"""Run configuration: JSON loading, strict validation, dotted overrides.

Configs are plain JSON objects.  Unknown keys are rejected with the full
field path so a typo cannot silently fall back to a default, and every
scalar field can be overridden from the command line with
``--key.path=value``.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field

from .fusion import ConfigError, IgnoreConfig
from .model import FUSION_MODES, ModelConfig
from .synthetic import SceneConfig
from .training import ScheduleConfig


@dataclass(frozen=True)
class ModelSection:
    channels: tuple = (32, 16, 8)
    strides: tuple = (4, 8, 16)
    head_channels: int = 16
    identity_resize: bool = False


@dataclass(frozen=True)
class RunConfig:
    fusion_mode: str = "asff"
    epsilon_ignore: float = 0.0
    ignore_mode: str = "off"
    seeds: tuple = (0,)
    scene: SceneConfig = field(default_factory=SceneConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train_scenes: int = 64
    val_scenes: int = 32
    batch_size: int = 8
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lambda_box: float = 2.0
    score_threshold: float = 0.05
    random_shapes: bool = False
    random_shape_sizes: tuple = (48, 64, 80)
    out_dir: str = "runs/run"
    deterministic: bool = True
    arms: tuple = ()

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode: must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if not self.seeds:
            raise ConfigError("seeds: must contain at least one seed")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.train_scenes < 1 or self.val_scenes < 1:
            raise ConfigError("train_scenes/val_scenes: must be >= 1")
        IgnoreConfig(epsilon_ignore=self.epsilon_ignore, mode=self.ignore_mode)

    def scene_config(self) -> SceneConfig:
        return self.scene

    def schedule_config(self) -> ScheduleConfig:
        return self.schedule

    def model_config(self) -> ModelConfig:
        return ModelConfig(channels=tuple(self.model.channels),
                           strides=tuple(self.model.strides),
                           head_channels=self.model.head_channels,
                           fusion_mode=self.fusion_mode,
                           identity_resize=self.model.identity_resize)

    def arm_configs(self) -> list[tuple[str, "RunConfig"]]:
        """Expanded (name, config) pairs for a comparison sweep."""
        if not self.arms:
            raise ConfigError("arms: compare needs at least one arm")
        out = []
        for idx, arm in enumerate(self.arms):
            if not isinstance(arm, dict):
                raise ConfigError(f"arms[{idx}]: each arm must be an object")
            allowed = {"name", "fusion_mode", "epsilon_ignore", "ignore_mode"}
            unknown = set(arm) - allowed
            if unknown:
                raise ConfigError(f"arms[{idx}]: unknown keys {sorted(unknown)}")
            overrides = {k: v for k, v in arm.items() if k != "name"}
            cfg = dataclasses.replace(self, arms=(), **overrides)
            name = arm.get("name") or _default_arm_name(cfg)
            out.append((name, cfg))
        return out


def _default_arm_name(cfg: RunConfig) -> str:
    if cfg.fusion_mode == "ignore" or cfg.ignore_mode != "off":
        return f"{cfg.fusion_mode}-eps{cfg.epsilon_ignore:g}"
    return cfg.fusion_mode


@dataclass(frozen=True)
class AnalyzeConfig:
    checkpoint: str = ""
    scene_seed: int = 0
    out_dir: str = "analysis"
    lambda_box: float = 2.0
    num_scenes: int = 4

    def __post_init__(self):
        if not self.checkpoint:
            raise ConfigError("checkpoint: required (path to a .ckpt file)")


# ---------------------------------------------------------------------------
# Generic strict loader
# ---------------------------------------------------------------------------

def _coerce(value, target_type, path: str):
    origin = typing.get_origin(target_type)
    if dataclasses.is_dataclass(target_type):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return _load_dataclass(target_type, value, path)
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if target_type is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def _load_dataclass(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    known = {f.name: hints[f.name] for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(where + k for k in unknown))}")
    kwargs = {}
    for key, value in data.items():
        sub_path = f"{path}.{key}" if path else key
        kwargs[key] = _coerce(value, known[key], sub_path)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(f"{path or cls.__name__}: {err}") from err


def load_run_config(data: dict) -> RunConfig:
    return _load_dataclass(RunConfig, dict(data))


def load_analyze_config(data: dict) -> AnalyzeConfig:
    return _load_dataclass(AnalyzeConfig, dict(data))


def read_json_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from err


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``key.path=value`` strings onto a raw config dict."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        key_path, raw_value = item.split("=", 1)
        keys = [k for k in key_path.strip().lstrip("-").split(".") if k]
        if not keys:
            raise ConfigError(f"override {item!r} has an empty key path")
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {k} is not an object")
        node[keys[-1]] = value
    return data
