"""Training configuration and its flat ``key = value`` text format.

One setting per line, ``#`` starts a comment, nested sections use dotted keys::

    epochs = 30
    weights.T = 3
    network.channels = 8,16,32
    enable_dis = false

Sequences are comma-separated.  Unknown keys are errors.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import InvalidConfigError
from .losses import SWITCHABLE, LossWeights
from .network import NetworkConfig, StageSpec


@dataclass
class NetworkSection:
    channels: tuple[int, ...] = (8, 16, 32)
    blocks: tuple[int, ...] = (1, 1, 1)
    downsample: tuple[bool, ...] = (False, True, True)
    disc_hidden: int = 128
    residual: bool = False


@dataclass
class DataSection:
    source: str = "synthetic"  # "synthetic" or "cifar"
    path: str = ""  # CIFAR training file
    test_path: str = ""  # CIFAR test file
    num_classes: int = 4
    per_class: int = 128
    test_per_class: int = 64
    image_size: int = 16
    noise_sigma: float = 0.35
    seed: int = 1234
    augment: bool = True


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 2
    schedule: str = "step"  # "step" or "cosine"
    milestones: tuple[int, ...] = ()  # empty: 60% and 85% of epochs
    decay_factor: float = 0.1
    alpha: float = 0.4
    per_batch_lambda: bool = True
    enable_feature: bool = True
    enable_dis: bool = True
    enable_b_logit: bool = True
    enable_h: bool = True
    enable_f_logit: bool = True
    baseline: bool = False  # plain cross-entropy on the backbone, no Mixup
    seed: int = 0
    grl_scale: float = 1.0
    adversarial_mode: str = "separate"  # "separate", "joint" or "alternating"
    update_discriminators: bool = True
    teacher_feature_grad: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    network: NetworkSection = field(default_factory=NetworkSection)
    data: DataSection = field(default_factory=DataSection)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 0:
            raise InvalidConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise InvalidConfigError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise InvalidConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise InvalidConfigError("weight_decay must be >= 0")
        if self.warmup_epochs < 0 or (self.epochs > 0 and self.warmup_epochs >= self.epochs):
            raise InvalidConfigError("warmup_epochs must be in [0, epochs)")
        if self.schedule not in ("step", "cosine"):
            raise InvalidConfigError(f"schedule must be 'step' or 'cosine', got {self.schedule!r}")
        if self.adversarial_mode not in ("separate", "joint", "alternating"):
            raise InvalidConfigError(f"adversarial_mode must be separate, joint or alternating, got {self.adversarial_mode!r}")
        if not self.alpha > 0:
            raise InvalidConfigError("alpha must be > 0")
        n = len(self.network.channels)
        if len(self.network.blocks) != n or len(self.network.downsample) != n:
            raise InvalidConfigError("network.channels, network.blocks and network.downsample must have equal length")
        if self.data.source not in ("synthetic", "cifar"):
            raise InvalidConfigError(f"data.source must be 'synthetic' or 'cifar', got {self.data.source!r}")
        LossWeights(**dataclasses.asdict(self.weights))

    def enabled(self) -> dict[str, bool]:
        flags = {"feature": self.enable_feature, "dis": self.enable_dis, "b_logit": self.enable_b_logit,
                 "cls_h": self.enable_h, "f_logit": self.enable_f_logit}
        assert set(flags) == set(SWITCHABLE)
        return flags

    def resolved_milestones(self) -> tuple[int, ...]:
        if self.milestones:
            return tuple(self.milestones)
        return (round(0.6 * self.epochs), round(0.85 * self.epochs))

    def method(self) -> str:
        if self.baseline:
            return "ce-baseline"
        flags = self.enabled().values()
        if not any(flags):
            return "mixup-baseline"
        if all(flags):
            return "mixskd"
        return "mixskd-ablation"

    def network_config(self) -> NetworkConfig:
        stages = tuple(StageSpec(c, b, bool(d)) for c, b, d in
                       zip(self.network.channels, self.network.blocks, self.network.downsample))
        size = self.data.image_size if self.data.source == "synthetic" else 32
        return NetworkConfig(stages, self.data.num_classes, (size, size), 3,
                             self.network.disc_hidden, self.network.residual)


_SECTIONS = {"weights": LossWeights, "network": NetworkSection, "data": DataSection}


def _hints(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def valid_keys() -> list[str]:
    keys = []
    for name, tp in _hints(TrainConfig).items():
        if name in _SECTIONS:
            keys.extend(f"{name}.{sub}" for sub in _hints(_SECTIONS[name]))
        else:
            keys.append(name)
    return keys


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_value(raw: str, tp) -> Any:
    raw = raw.strip()
    origin = typing.get_origin(tp)
    if origin is tuple:
        (elem, _ellipsis) = typing.get_args(tp)
        if raw == "":
            return ()
        return tuple(_parse_value(part, elem) for part in raw.split(","))
    if tp is bool:
        return _parse_bool(raw)
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    if tp is str:
        return raw.strip('"').strip("'")
    raise TypeError(f"unsupported config type {tp}")


def _format_value(v: Any) -> str:
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def apply_overrides(cfg: TrainConfig, pairs: dict[str, str]) -> TrainConfig:
    """Return a new config with dotted ``key -> raw string`` settings applied."""
    values = to_flat(cfg)
    hints = {}
    for name, tp in _hints(TrainConfig).items():
        if name in _SECTIONS:
            hints.update({f"{name}.{k}": t for k, t in _hints(_SECTIONS[name]).items()})
        else:
            hints[name] = tp
    for key, raw in pairs.items():
        if key not in hints:
            raise InvalidConfigError(f"unknown config key {key!r}; valid keys: {', '.join(valid_keys())}")
        try:
            values[key] = _parse_value(raw, hints[key])
        except (ValueError, TypeError) as exc:
            raise InvalidConfigError(f"bad value for {key}: {exc}") from None
    return from_flat(values)


def from_flat(values: dict[str, Any]) -> TrainConfig:
    top, sections = {}, {name: {} for name in _SECTIONS}
    for key, v in values.items():
        head, _, tail = key.partition(".")
        if tail:
            sections[head][tail] = v
        else:
            top[key] = v
    built = {name: cls(**sections[name]) for name, cls in _SECTIONS.items()}
    return TrainConfig(**top, **built)


def to_flat(cfg: TrainConfig) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for sf in dataclasses.fields(v):
                out[f"{f.name}.{sf.name}"] = getattr(v, sf.name)
        else:
            out[f.name] = v
    return out


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> TrainConfig:
    pairs = {}
    if path is not None:
        pairs.update(parse_text(Path(path).read_text(encoding="utf-8"), str(path)))
    pairs.update(overrides or {})
    return apply_overrides(TrainConfig(), pairs)


def dump_text(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in to_flat(cfg).items())


def to_json(cfg: TrainConfig) -> str:
    return json.dumps({k: list(v) if isinstance(v, tuple) else v for k, v in to_flat(cfg).items()},
                      indent=2, sort_keys=True)
