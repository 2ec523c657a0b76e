"""Model configuration: strict JSON loading with fully resolved defaults."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; the message carries the offending field path."""


@dataclass
class StackConfig:
    out_channels: int
    stride: int = 1
    expansion: int = 1
    kernel: int = 3


def _default_stacks() -> list[StackConfig]:
    # frozen against the profiler: 0.245 GFLOPs image part, 0.430 total
    return [
        StackConfig(16, 2, 1),
        StackConfig(32, 2, 3),
        StackConfig(32, 2, 3),
        StackConfig(64, 2, 2),
        StackConfig(64, 1, 2),
        StackConfig(64, 1, 2),
        StackConfig(96, 2, 3),
        StackConfig(96, 1, 3),
        StackConfig(96, 1, 3),
    ]


@dataclass
class EncoderConfig:
    tokens: int = 6
    dim: int = 96
    heads: int = 2
    stacks: list[StackConfig] = field(default_factory=_default_stacks)
    # 1-based stack indices whose outputs become Y_0, Y_1, Y_2 (coarse to fine)
    taps: list[int] = field(default_factory=lambda: [9, 6, 3])


@dataclass
class BridgeConfig:
    heads: int = 2
    attention_norm: str = "sqrt_d"
    # "auto" uses separable_levels; "dense"/"separable" force one form everywhere
    cross_mode: str = "auto"
    separable_levels: list[int] = field(default_factory=lambda: [2])
    separable_combine: str = "multiply"
    tokens: str = "shared"
    mlp_ratio: int = 2


@dataclass
class DecoderConfig:
    gcn_depth: list[int] = field(default_factory=lambda: [2, 2, 2])


@dataclass
class LossWeights:
    vertex: float = 1.0
    joint: float = 1.0
    smooth: float = 0.1


@dataclass
class EvalConfig:
    root_joint: int = 0
    metacarpal: list[int] = field(default_factory=lambda: [0, 9])
    train_scale_cm: float = 9.5
    num_joints: int = 21


@dataclass
class ReferenceSchedule:
    """Recorded for reference; the desk-scale fit uses SGD with momentum."""

    optimizer: str = "adam"
    lr_initial: float = 1e-4
    lr_final: float = 1e-5
    decay_epoch: int = 50
    epochs: int = 120
    batch_size: int = 32


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    schedule: str = "cosine"
    steps: int = 500
    clip_norm: float = 100.0
    reference_schedule: ReferenceSchedule = field(default_factory=ReferenceSchedule)


@dataclass
class FlopsConfig:
    convention: str = "1 multiply-add = 2 FLOPs"
    softmax_per_element: int = 5
    activation_per_element: int = 4
    aux_heads: bool = False


@dataclass
class InitConfig:
    """Multipliers on the uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] initializer."""

    gain: float = 1.0
    # tokens and query/key/score projections; larger values sharpen initial softmaxes
    attention_gain: float = 1.0
    # head projection, whose outputs are in meters
    head_gain: float = 0.05


@dataclass
class ModelConfig:
    format_version: int = FORMAT_VERSION
    seed: int = 0
    image_size: int = 256
    activation: str = "silu"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    bridge: BridgeConfig = field(default_factory=BridgeConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    topology: str = "synthetic:0"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    eval: EvalConfig = field(default_factory=EvalConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    flops: FlopsConfig = field(default_factory=FlopsConfig)
    init: InitConfig = field(default_factory=InitConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def validate(self) -> "ModelConfig":
        enc = self.encoder
        if self.format_version != FORMAT_VERSION:
            raise ConfigError(f"format_version: unsupported {self.format_version}")
        if self.activation not in ("silu", "identity"):
            raise ConfigError(f"activation: expected 'silu' or 'identity', got {self.activation!r}")
        if enc.dim % enc.heads or enc.dim % self.bridge.heads:
            raise ConfigError(f"encoder.dim: {enc.dim} not divisible by attention heads")
        if not enc.stacks:
            raise ConfigError("encoder.stacks: at least one stack required")
        size = self.image_size
        sizes = []
        for i, st in enumerate(enc.stacks):
            where = f"encoder.stacks[{i}]"
            if st.stride not in (1, 2):
                raise ConfigError(f"{where}.stride: must be 1 or 2")
            if st.kernel < 1 or st.kernel % 2 == 0:
                raise ConfigError(f"{where}.kernel: must be odd and positive")
            if st.expansion < 1 or st.out_channels < 1:
                raise ConfigError(f"{where}: expansion and out_channels must be positive")
            if st.out_channels % enc.heads:
                raise ConfigError(f"{where}.out_channels: {st.out_channels} not divisible by {enc.heads} heads")
            if size % st.stride:
                raise ConfigError(f"{where}.stride: input size {size} not divisible by stride {st.stride}")
            size //= st.stride
            sizes.append(size)
        if len(enc.taps) != 3 or any(not 1 <= t <= len(enc.stacks) for t in enc.taps):
            raise ConfigError(f"encoder.taps: need three stack indices in [1, {len(enc.stacks)}]")
        res = [sizes[t - 1] for t in enc.taps]
        if not res[0] < res[1] < res[2]:
            raise ConfigError(f"encoder.taps: resolutions {res} must strictly increase from Y_0 to Y_2")
        br = self.bridge
        if br.attention_norm not in ("sqrt_d", "d"):
            raise ConfigError("bridge.attention_norm: expected 'sqrt_d' or 'd'")
        if br.cross_mode not in ("auto", "dense", "separable"):
            raise ConfigError("bridge.cross_mode: expected 'auto', 'dense' or 'separable'")
        if br.separable_combine not in ("multiply", "add"):
            raise ConfigError("bridge.separable_combine: expected 'multiply' or 'add'")
        if br.tokens not in ("shared", "per_level"):
            raise ConfigError("bridge.tokens: expected 'shared' or 'per_level'")
        if any(not 0 <= lv <= 2 for lv in br.separable_levels):
            raise ConfigError("bridge.separable_levels: levels are 0, 1, 2")
        if len(self.decoder.gcn_depth) != 3 or any(d < 0 for d in self.decoder.gcn_depth):
            raise ConfigError("decoder.gcn_depth: three non-negative depths required")
        ev = self.eval
        if ev.train_scale_cm != 9.5:
            raise ConfigError("eval.train_scale_cm: the protocol fixes 9.5")
        if len(ev.metacarpal) != 2 or any(not 0 <= j < ev.num_joints for j in [*ev.metacarpal, ev.root_joint]):
            raise ConfigError("eval.metacarpal: two joint indices within num_joints required")
        if self.optimizer.schedule not in ("constant", "cosine"):
            raise ConfigError("optimizer.schedule: expected 'constant' or 'cosine'")
        return self

    def cross_mode_at(self, level: int) -> str:
        if self.bridge.cross_mode != "auto":
            return self.bridge.cross_mode
        return "separable" if level in self.bridge.separable_levels else "dense"


def _from_dict(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path + '.' if path else ''}{unknown[0]}: unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            where = f"{path}.{f.name}" if path else f.name
            kwargs[f.name] = _coerce(hints[f.name], data[f.name], where)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _from_dict(tp, value, path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        (item,) = typing.get_args(tp)
        return [_coerce(item, v, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin in (typing.Union, types.UnionType):
        raise ConfigError(f"{path}: union types unsupported")
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    raise ConfigError(f"{path}: unsupported field type {tp}")


def config_from_dict(data: dict) -> ModelConfig:
    return _from_dict(ModelConfig, data, "").validate()


def load_config(path=None) -> ModelConfig:
    if path is None:
        return ModelConfig().validate()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def default_config() -> ModelConfig:
    return ModelConfig().validate()


def toy_config() -> ModelConfig:
    """Small dimensions for gradient checks and desk-scale fitting."""
    return ModelConfig(
        image_size=16,
        encoder=EncoderConfig(
            tokens=2,
            dim=8,
            heads=2,
            stacks=[StackConfig(4, 2, 1), StackConfig(6, 2, 2), StackConfig(8, 2, 1)],
            taps=[3, 2, 1],
        ),
        decoder=DecoderConfig(gcn_depth=[1, 1, 1]),
        optimizer=OptimizerConfig(),
        init=InitConfig(gain=2.0, attention_gain=8.0),
    ).validate()
