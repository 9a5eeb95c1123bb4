"""FocalConvNet: convolutional stem, stages of FocalConv blocks, pooled linear head."""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .layers import (
    Conv,
    ConvBlockParams,
    FocalConvBlock,
    FocalModulationParams,
    Linear,
    Norm,
    SEParams,
)
from .params import ParamStore
from .tensor import Tensor


@dataclass
class ModelConfig:
    stage_depths: list[int] = field(default_factory=lambda: [2, 2, 5, 2])
    stage_channels: list[int] = field(default_factory=lambda: [64, 128, 256, 512])
    focal_levels: int = 3
    focal_kernels: list[int] | None = None  # None -> 3 for every level
    num_classes: int = 11
    input_size: tuple[int, int] = (224, 224)
    in_channels: int = 3
    stem_channels: int = 32
    stem_norm: bool = True
    expansion_ratio: int = 6
    se_ratio: int = 4
    gates_per_channel: bool = False
    residual: bool = True
    prenorm: bool = True
    proj_out: bool = True

    def __post_init__(self) -> None:
        self.stage_depths = [int(d) for d in self.stage_depths]
        self.stage_channels = [int(c) for c in self.stage_channels]
        self.input_size = tuple(int(s) for s in self.input_size)
        if self.focal_kernels is not None:
            self.focal_kernels = [int(k) for k in self.focal_kernels]

    @property
    def kernels(self) -> list[int]:
        return list(self.focal_kernels) if self.focal_kernels is not None else [3] * self.focal_levels

    @property
    def num_stages(self) -> int:
        return len(self.stage_depths)

    def validate(self) -> None:
        if len(self.stage_depths) < 1:
            raise ConfigError("stage_depths must name at least one stage")
        if len(self.stage_depths) != len(self.stage_channels):
            raise ConfigError(
                f"stage_depths has {len(self.stage_depths)} entries but stage_channels has {len(self.stage_channels)}"
            )
        if any(d < 1 for d in self.stage_depths) or any(c < 1 for c in self.stage_channels):
            raise ConfigError("stage depths and channel widths must be positive")
        if self.focal_levels < 1:
            raise ConfigError("focal_levels must be >= 1")
        if len(self.kernels) != self.focal_levels:
            raise ConfigError(f"focal_kernels has {len(self.kernels)} entries for {self.focal_levels} focal levels")
        if any(k < 1 or k % 2 == 0 for k in self.kernels):
            raise ConfigError(f"focal kernels must be odd and positive, got {self.kernels}")
        if self.num_classes < 1 or self.stem_channels < 1 or self.in_channels < 1:
            raise ConfigError("num_classes, stem_channels and in_channels must be positive")
        if self.expansion_ratio < 1 or self.se_ratio < 1:
            raise ConfigError("expansion_ratio and se_ratio must be >= 1")
        for c in self.stage_channels:
            if (c * self.expansion_ratio) % self.se_ratio:
                raise ConfigError(f"expanded width {c * self.expansion_ratio} is not divisible by se_ratio {self.se_ratio}")
        div = 2 ** (self.num_stages + 1)
        h, w = self.input_size
        if h % div or w % div:
            raise ConfigError(f"input size {h}x{w} must be divisible by {div} for {self.num_stages} stages")

    def feature_sides(self) -> list[int]:
        """Spatial side after the stem and after each stage (square inputs use H)."""
        h = self.input_size[0] // 2
        sides = [h]
        for _ in self.stage_depths:
            h //= 2
            sides.append(h)
        return sides

    # -- JSON --------------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys: {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ModelConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        try:
            return cls.from_dict(d)
        except ConfigError as e:
            raise ConfigError(f"{path}: {e}") from None

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def tiny_config(num_classes: int = 4) -> ModelConfig:
    """Two shallow stages on 32x32 inputs, used by tests and the synthetic demo."""
    return ModelConfig(
        stage_depths=[1, 1],
        stage_channels=[16, 32],
        stem_channels=8,
        num_classes=num_classes,
        input_size=(32, 32),
    )


# -- initialization ---------------------------------------------------------
_TRUNC = 2.0
# std of a unit normal truncated to +-2 sigma; dividing it out restores the target variance
_TRUNC_STD = math.sqrt(
    1.0 - 2 * _TRUNC * math.exp(-0.5 * _TRUNC**2) / math.sqrt(2 * math.pi) / math.erf(_TRUNC / math.sqrt(2))
)


def init_scheme(shape, fan_in: int, fan_out: int, seed, kind: str = "conv") -> Tensor:
    """Initial values for one parameter.

    ``kind`` is ``conv`` (truncated normal, variance 2/fan_in), ``linear``
    (uniform in +-sqrt(1/fan_in)), ``bias``/``norm_bias`` (zeros) or
    ``norm_scale`` (ones). ``fan_out`` is accepted for symmetry and unused by
    the current rules.
    """
    shape = tuple(int(s) for s in shape)
    if kind in ("bias", "norm_bias"):
        return Tensor(np.zeros(shape))
    if kind == "norm_scale":
        return Tensor(np.ones(shape))
    rng = np.random.default_rng(seed)
    if kind == "linear":
        bound = math.sqrt(1.0 / fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape))
    if kind == "conv":
        n = int(np.prod(shape))
        z = rng.standard_normal(n)
        bad = np.abs(z) > _TRUNC
        while bad.any():
            z[bad] = rng.standard_normal(int(bad.sum()))
            bad = np.abs(z) > _TRUNC
        std = math.sqrt(2.0 / fan_in) / _TRUNC_STD
        return Tensor((z * std).reshape(shape))
    raise ConfigError(f"unknown init kind {kind!r}")


class _Builder:
    def __init__(self, store: ParamStore, seed: int):
        self.store = store
        self.seed = seed

    def _param(self, name: str, shape, fan_in: int, fan_out: int, kind: str) -> Tensor:
        t = init_scheme(shape, fan_in, fan_out, (self.seed, len(self.store)), kind)
        return self.store.add(name, t)

    def conv(self, name: str, cin: int, cout: int, k: int, stride: int = 1) -> Conv:
        w = self._param(f"{name}.w", (cout, cin, k, k), cin * k * k, cout * k * k, "conv")
        b = self._param(f"{name}.b", (cout,), cin, cout, "bias")
        return Conv(w, b, stride=stride)

    def dwconv(self, name: str, c: int, k: int) -> Conv:
        w = self._param(f"{name}.w", (c, 1, k, k), k * k, k * k, "conv")
        b = self._param(f"{name}.b", (c,), k * k, c, "bias")
        return Conv(w, b, stride=1, depthwise=True)

    def linear(self, name: str, cin: int, cout: int) -> Linear:
        w = self._param(f"{name}.w", (cin, cout), cin, cout, "linear")
        b = self._param(f"{name}.b", (cout,), cin, cout, "bias")
        return Linear(w, b)

    def norm(self, name: str, c: int) -> Norm:
        g = self._param(f"{name}.g", (c,), c, c, "norm_scale")
        b = self._param(f"{name}.b", (c,), c, c, "norm_bias")
        return Norm(g, b)


def build_conv_block(bld: _Builder, prefix: str, c: int, cfg: ModelConfig) -> ConvBlockParams:
    e = c * cfg.expansion_ratio
    norm = bld.norm(f"{prefix}.norm", c) if cfg.prenorm else None
    pw1 = bld.conv(f"{prefix}.pw1", c, e, 1)
    dw = bld.dwconv(f"{prefix}.dw", e, 3)
    se = SEParams(
        reduce=bld.linear(f"{prefix}.se.reduce", e, e // cfg.se_ratio),
        expand=bld.linear(f"{prefix}.se.expand", e // cfg.se_ratio, e),
    )
    pw2 = bld.conv(f"{prefix}.pw2", e, c, 1)
    return ConvBlockParams(norm=norm, pw1=pw1, dw=dw, se=se, pw2=pw2, residual=cfg.residual)


def build_focal_block(bld: _Builder, prefix: str, c: int, cfg: ModelConfig) -> FocalModulationParams:
    n = cfg.focal_levels
    gate_ch = (n + 1) * c if cfg.gates_per_channel else n + 1
    norm = bld.norm(f"{prefix}.norm", c) if cfg.prenorm else None
    proj_in = bld.linear(f"{prefix}.proj_in", c, 2 * c + gate_ch)
    levels = [bld.dwconv(f"{prefix}.level_dw{i}", c, k) for i, k in enumerate(cfg.kernels)]
    proj_ctx = bld.linear(f"{prefix}.proj_ctx", c, c)
    proj_out = bld.linear(f"{prefix}.proj_out", c, c) if cfg.proj_out else None
    p = FocalModulationParams(
        norm=norm,
        proj_in=proj_in,
        level_dw=levels,
        proj_ctx=proj_ctx,
        proj_out=proj_out,
        residual=cfg.residual,
        gates_per_channel=cfg.gates_per_channel,
    )
    p.validate()
    return p


@dataclass
class Stage:
    down: Conv  # strided 3x3, halves H and W
    blocks: list[FocalConvBlock]


class FocalConvNet:
    def __init__(self, config: ModelConfig, params: ParamStore, stem, stages: list[Stage], head: Linear):
        self.config = config
        self.params = params
        self.stem: list[tuple[Conv, Norm | None]] = stem
        self.stages = stages
        self.head = head

    def __call__(self, x: Tensor) -> Tensor:
        return forward(self, x)

    @property
    def num_blocks(self) -> int:
        return sum(len(s.blocks) for s in self.stages)


def build(config: ModelConfig, seed: int = 0) -> FocalConvNet:
    config.validate()
    store = ParamStore()
    bld = _Builder(store, seed)
    stem = []
    cin = config.in_channels
    for i, stride in enumerate((2, 1)):
        conv = bld.conv(f"stem.conv{i}", cin, config.stem_channels, 3, stride=stride)
        norm = bld.norm(f"stem.norm{i}", config.stem_channels) if config.stem_norm else None
        stem.append((conv, norm))
        cin = config.stem_channels
    stages = []
    for s, (depth, width) in enumerate(zip(config.stage_depths, config.stage_channels)):
        down = bld.conv(f"stage{s}.down", cin, width, 3, stride=2)
        blocks = []
        for b in range(depth):
            prefix = f"stage{s}.block{b}"
            blocks.append(
                FocalConvBlock(
                    conv=build_conv_block(bld, f"{prefix}.conv", width, config),
                    focal=build_focal_block(bld, f"{prefix}.focal", width, config),
                )
            )
        stages.append(Stage(down=down, blocks=blocks))
        cin = width
    head = bld.linear("head", cin, config.num_classes)
    return FocalConvNet(config, store, stem, stages, head)


def forward(net: FocalConvNet, x: Tensor, features: list | None = None) -> Tensor:
    """Logits (N, num_classes). Pass a list as ``features`` to collect the map after stem and each stage."""
    cfg = net.config
    x = T.as_tensor(x)
    expected = (cfg.in_channels, *cfg.input_size)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise DimensionError(f"forward: expected input (N, {', '.join(map(str, expected))}), got {x.shape}")
    h = x
    for conv, norm in net.stem:
        h = T.gelu(conv(h))
        if norm is not None:
            h = norm(h)
    if features is not None:
        features.append(h)
    for stage in net.stages:
        h = stage.down(h)
        for block in stage.blocks:
            h = block(h)
        if features is not None:
            features.append(h)
    pooled = T.reshape(T.global_avg_pool(h), (h.shape[0], h.shape[1]))
    return net.head(pooled, axis=1)
