"""Training configuration and the plain-text config format.

Config files hold one ``key = value`` per line.  Keys of nested records are
dotted (``detector.grid_h = 8``); a ``[detector]`` header prefixes the keys
that follow it.  ``#`` starts a comment.  Values are parsed as Python
literals when possible and kept as strings otherwise.
"""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from typing import Optional

from .detector import DetectorConfig, HEAD_MODES
from .objectives import LossWeights, ROUTING_MODES

SAMPLING_MODES = ("importance", "uniform", "gumbel", "exhaustive")
OBJECTIVE_MODES = ("both", "G_only", "O_only")


class UnknownKeyError(KeyError):
    def __init__(self, key: str):
        super().__init__(key)
        self.key = key

    def __str__(self):
        return f"unknown config key {self.key!r}"


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 16
    samples_per_image: int = 1
    # sampling smoothing, decayed linearly from start to end over decay_steps
    epsilon_start: float = 1e-3
    epsilon_end: float = 1e-5
    epsilon_decay_steps: Optional[int] = None     # None: first third of stage 2
    crop_size: int = 64
    erase_scale: float = 1.1
    stage1_steps: int = 3000
    stage2_steps: int = 3000
    lr_stage1: float = 1e-3
    lr_stage2: float = 2e-4
    sampling_mode: str = "importance"
    gumbel_temperature: float = 0.1
    routing_mode: str = "separate"
    objective_mode: str = "both"
    head_mode: str = "proposal"
    flow_enabled: bool = False
    checkpoint_every: int = 1000
    segmenter_channels: tuple = (16, 32, 64, 64)
    segmenter_bottleneck: int = 64
    inpainter_channels: tuple = (8, 16, 32, 64)
    perceptual_seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def validate(self) -> None:
        if self.batch_size < 1 or self.samples_per_image < 1:
            raise ValueError("batch_size and samples_per_image must be >= 1")
        for name, allowed in (("sampling_mode", SAMPLING_MODES), ("routing_mode", ROUTING_MODES),
                              ("objective_mode", OBJECTIVE_MODES), ("head_mode", HEAD_MODES)):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        c = self.detector.num_cells
        for name in ("epsilon_start", "epsilon_end"):
            eps = getattr(self, name)
            if not 0 <= eps < 1.0 / c:
                raise ValueError(f"{name}={eps} outside [0, 1/C) with C={c}")
        if self.gumbel_temperature <= 0:
            raise ValueError("gumbel_temperature must be > 0")
        self.loss.validate()
        self.detector.validate()

    def epsilon(self, step: int) -> float:
        decay = self.epsilon_decay_steps
        if decay is None:
            decay = max(self.stage2_steps // 3, 1)
        frac = min(step / decay, 1.0) if decay > 0 else 1.0
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        config = cls()
        for key, value in flatten(data).items():
            set_value(config, key, value)
        return config


def flatten(data: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten(value, name + "."))
        else:
            out[name] = value
    return out


def parse_value(text: str):
    text = text.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if lowered in ("none", "null"):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _coerce(current, value):
    if isinstance(current, bool) or current is None:
        return value
    if isinstance(current, float) and isinstance(value, int):
        return float(value)
    if isinstance(current, tuple) and isinstance(value, (list, tuple)):
        return tuple(value)
    return value


def set_value(obj, dotted_key: str, value) -> None:
    """Assign ``value`` to the dataclass field addressed by ``dotted_key``."""
    parts = dotted_key.split(".")
    target = obj
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(target) or part not in {f.name for f in dataclasses.fields(target)}:
            raise UnknownKeyError(dotted_key)
        target = getattr(target, part)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(target) or leaf not in {f.name for f in dataclasses.fields(target)}:
        raise UnknownKeyError(dotted_key)
    current = getattr(target, leaf)
    if dataclasses.is_dataclass(current):
        raise UnknownKeyError(dotted_key)
    setattr(target, leaf, _coerce(current, value))


def parse_config_text(text: str) -> dict:
    """Parse the config format into a flat ``{dotted_key: value}`` dict."""
    out, section = {}, ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if section:
            key = f"{section}.{key}"
        out[key] = parse_value(value)
    return out


def apply_overrides(config, overrides) -> None:
    """Apply ``{key: value}`` or ``["key=value", ...]`` overrides in order."""
    if isinstance(overrides, dict):
        items = list(overrides.items())
    else:
        items = []
        for item in overrides:
            if "=" not in item:
                raise ValueError(f"override {item!r} is not of the form key=value")
            key, value = item.split("=", 1)
            items.append((key.strip(), parse_value(value)))
    for key, value in items:
        set_value(config, key, value)


def load_config(path=None, overrides=(), base=None) -> TrainConfig:
    config = base if base is not None else TrainConfig()
    if path is not None:
        with open(path) as fh:
            apply_overrides(config, parse_config_text(fh.read()))
    apply_overrides(config, overrides)
    return config


def dump_config(config) -> str:
    """Render a config record in the plain-text format (round-trips through the parser)."""
    lines = []
    for key, value in flatten(dataclasses.asdict(config)).items():
        lines.append(f"{key} = {value!r}" if isinstance(value, str) else f"{key} = {value}")
    return "\n".join(lines) + "\n"
