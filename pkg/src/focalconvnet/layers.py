"""Convolutional block, squeeze-and-excitation and focal modulation layers.

Parameters live in small dataclasses of :class:`~focalconvnet.tensor.Tensor`
objects; forward passes are plain functions over them. All activations are
NCHW and every per-position linear map contracts the channel axis.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

LN_EPS = 1e-5


@dataclass
class Linear:
    w: Tensor  # (C_in, C_out)
    b: Tensor  # (C_out,)

    @property
    def in_features(self) -> int:
        return self.w.shape[0]

    @property
    def out_features(self) -> int:
        return self.w.shape[1]

    def __call__(self, x: Tensor, axis: int = 1) -> Tensor:
        return T.matmul_linear(x, self.w, self.b, axis=axis)


@dataclass
class Conv:
    w: Tensor  # (C_out, C_in, k, k), or (C, 1, k, k) when depthwise
    b: Tensor
    stride: int = 1
    depthwise: bool = False

    @property
    def kernel_size(self) -> int:
        return self.w.shape[2]

    @property
    def pad(self) -> int:
        return self.kernel_size // 2

    def __call__(self, x: Tensor) -> Tensor:
        op = T.depthwise_conv2d if self.depthwise else T.conv2d
        return op(x, self.w, self.b, stride=self.stride, pad=self.pad)


@dataclass
class Norm:
    g: Tensor
    b: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.g, self.b, eps=LN_EPS, axis=1)


def _named(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    for f in fields(obj):
        val = getattr(obj, f.name)
        if isinstance(val, Tensor):
            yield prefix + f.name, val
        elif isinstance(val, (Linear, Conv, Norm, SEParams)):
            yield from _named(val, f"{prefix}{f.name}.")
        elif isinstance(val, list):
            for i, item in enumerate(val):
                yield from _named(item, f"{prefix}{f.name}{i}.")


@dataclass
class SEParams:
    reduce: Linear  # E -> E/r
    expand: Linear  # E/r -> E

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        return _named(self, prefix)


@dataclass
class ConvBlockParams:
    norm: Norm | None
    pw1: Conv  # 1x1, C -> E
    dw: Conv  # depthwise 3x3 over E
    se: SEParams
    pw2: Conv  # 1x1, E -> C
    residual: bool = True

    @property
    def channels(self) -> int:
        return self.pw1.w.shape[1]

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        return _named(self, prefix)


@dataclass
class FocalModulationParams:
    norm: Norm | None
    proj_in: Linear  # C -> 2C + gate channels, split as [q | M_0 | G]
    level_dw: list[Conv]  # one depthwise conv per focal level
    proj_ctx: Linear  # channel aggregation of the modulator, C -> C
    proj_out: Linear | None  # C -> C, applied to q * M_out
    residual: bool = True
    gates_per_channel: bool = False

    @property
    def channels(self) -> int:
        return self.proj_ctx.in_features

    @property
    def focal_levels(self) -> int:
        return len(self.level_dw)

    @property
    def gate_channels(self) -> int:
        n1 = self.focal_levels + 1
        return n1 * self.channels if self.gates_per_channel else n1

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        return _named(self, prefix)

    def validate(self) -> None:
        c = self.channels
        if self.focal_levels < 1:
            raise ConfigError("focal modulation needs at least one focal level")
        if self.proj_in.in_features != c or self.proj_in.out_features != 2 * c + self.gate_channels:
            raise ConfigError(
                f"proj_in weight {self.proj_in.w.shape} does not match C={c} with {self.gate_channels} gate channels"
            )
        for i, conv in enumerate(self.level_dw):
            if conv.w.shape[0] != c or not conv.depthwise or conv.stride != 1:
                raise ConfigError(f"level_dw[{i}] must be a stride-1 depthwise conv over {c} channels")


def _check_channels(x: Tensor, c: int, what: str) -> None:
    if x.ndim != 4 or x.shape[1] != c:
        raise DimensionError(f"{what}: expected (N, {c}, H, W) input, got {x.shape}")


def se_forward(x: Tensor, p: SEParams) -> Tensor:
    """Channel reweighting: sigmoid(expand(gelu(reduce(gap(x))))) broadcast over H, W."""
    _check_channels(x, p.reduce.in_features, "se_forward")
    s = T.global_avg_pool(x)  # (N, E, 1, 1)
    s = T.gelu(p.reduce(s, axis=1))
    gate = T.sigmoid(p.expand(s, axis=1))
    return T.mul(gate, x)


def conv_block_forward(x: Tensor, p: ConvBlockParams) -> Tensor:
    _check_channels(x, p.channels, "conv_block_forward")
    h = p.norm(x) if p.norm is not None else x
    h = T.gelu(p.pw1(h))
    h = T.gelu(p.dw(h))
    h = se_forward(h, p.se)
    h = p.pw2(h)
    return T.add(x, h) if p.residual else h


def context_aggregate(x: Tensor, p: FocalModulationParams) -> tuple[list[Tensor], Tensor, Tensor]:
    """Hierarchical context for one focal modulation block.

    Returns ``(maps, gates, query)`` where ``maps`` holds ``M_0 .. M_{n+1}``
    (``M_{n+1}`` being the global mean of ``M_n`` spread back over H x W) and
    ``gates`` has one channel per level (``C`` per level with per-channel gates).
    ``x`` is taken as already normalized.
    """
    c = p.channels
    _check_channels(x, c, "context_aggregate")
    z = p.proj_in(x, axis=1)
    q = T.slice_axis(z, 0, c)
    m = [T.slice_axis(z, c, 2 * c)]
    gates = T.slice_axis(z, 2 * c, 2 * c + p.gate_channels)
    for conv in p.level_dw:
        m.append(T.gelu(conv(m[-1])))
    m.append(T.expand(T.global_avg_pool(m[-1]), m[-1].shape))
    return m, gates, q


def gate_for_level(gates: Tensor, level: int, p: FocalModulationParams) -> Tensor:
    """Gate map multiplying ``M_level`` (levels are 1-based, up to n+1)."""
    width = p.channels if p.gates_per_channel else 1
    start = (level - 1) * width
    return T.slice_axis(gates, start, start + width)


def focal_modulation_forward(x: Tensor, p: FocalModulationParams) -> Tensor:
    _check_channels(x, p.channels, "focal_modulation_forward")
    h = p.norm(x) if p.norm is not None else x
    m, gates, q = context_aggregate(h, p)
    # the gated sum starts at level 1; M_0 reaches it only through M_1
    mod = None
    for level in range(1, p.focal_levels + 2):
        term = T.mul(gate_for_level(gates, level, p), m[level])
        mod = term if mod is None else T.add(mod, term)
    mod = p.proj_ctx(mod, axis=1)
    y = T.mul(q, mod)
    if p.proj_out is not None:
        y = p.proj_out(y, axis=1)
    return T.add(x, y) if p.residual else y


@dataclass
class FocalConvBlock:
    """One repeating unit: a conv block followed by a focal modulation block."""

    conv: ConvBlockParams
    focal: FocalModulationParams

    def __call__(self, x: Tensor) -> Tensor:
        return focal_modulation_forward(conv_block_forward(x, self.conv), self.focal)
