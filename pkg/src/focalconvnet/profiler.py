"""Parameter, FLOP, receptive-field and throughput accounting.

FLOP convention: multiply-accumulates are reported both as ``2 * MACs`` (the
default ``flops`` figure) and as raw ``MACs``. Bias adds, activations,
normalization, gating products, residual adds and pooling are counted at one
flop per output element (pooling: per input element) in both conventions.
Counts are per image.
"""

from __future__ import annotations

import json
import math
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from .layers import Conv, ConvBlockParams, FocalModulationParams, Linear, Norm, SEParams
from .model import FocalConvNet
from .tensor import Tensor, no_grad

FLOP_CONVENTION = "flops = 2*MACs + 1/element for bias, activation, norm, gating, residual and pooling; flops_mac = MACs + same"

REPORTED_PARAMS = 34.66e6
REPORTED_GFLOPS = 5.23
REPORTED_THROUGHPUT = 148.02


@dataclass
class LayerCost:
    name: str
    params: int = 0
    macs: int = 0
    elementwise: int = 0

    @property
    def flops(self) -> int:
        return 2 * self.macs + self.elementwise

    @property
    def flops_mac(self) -> int:
        return self.macs + self.elementwise


@dataclass
class ProfileReport:
    per_layer: list[LayerCost]
    input_size: tuple[int, int]
    receptive_fields: list[int] = field(default_factory=list)
    throughput_ips: float | None = None
    hardware: str = ""
    batch_size: int | None = None

    @property
    def total_params(self) -> int:
        return sum(c.params for c in self.per_layer)

    @property
    def total_flops(self) -> int:
        return sum(c.flops for c in self.per_layer)

    @property
    def total_flops_mac(self) -> int:
        return sum(c.flops_mac for c in self.per_layer)

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9

    @property
    def gflops_mac(self) -> float:
        return self.total_flops_mac / 1e9

    def reference_comparison(self) -> dict:
        rel = lambda ours, ref: (ours - ref) / ref
        return {
            "params": {"ours": self.total_params, "reported": REPORTED_PARAMS, "rel_delta": rel(self.total_params, REPORTED_PARAMS)},
            "gflops_2mac": {"ours": self.gflops, "reported": REPORTED_GFLOPS, "rel_delta": rel(self.gflops, REPORTED_GFLOPS)},
            "gflops_mac": {"ours": self.gflops_mac, "reported": REPORTED_GFLOPS, "rel_delta": rel(self.gflops_mac, REPORTED_GFLOPS)},
        }

    def to_dict(self) -> dict:
        return {
            "flop_convention": FLOP_CONVENTION,
            "input_size": list(self.input_size),
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "total_flops_mac": self.total_flops_mac,
            "gflops": self.gflops,
            "gflops_mac": self.gflops_mac,
            "throughput_ips": self.throughput_ips,
            "batch_size": self.batch_size,
            "hardware": self.hardware,
            "receptive_fields": self.receptive_fields,
            "reference_comparison": self.reference_comparison(),
            "per_layer": [
                {**asdict(c), "flops": c.flops, "flops_mac": c.flops_mac} for c in self.per_layer
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table_row(self, method: str = "FocalConvNet") -> str:
        """One row in the column order Method | Parameters | GFLOPs | Throughput."""
        tput = "n/a" if self.throughput_ips is None else f"{self.throughput_ips:.2f}"
        return f"{method} | {self.total_params / 1e6:.2f} M | {self.gflops:.2f} | {tput}"


TABLE_HEADER = "Method | Parameters | GFLOPs | Throughput"


# -- per-layer cost rules --------------------------------------------------------
def _n(t: Tensor | None) -> int:
    return 0 if t is None else int(t.size)


def linear_cost(name: str, lin: Linear, positions: int) -> LayerCost:
    cin, cout = lin.w.shape
    return LayerCost(name, _n(lin.w) + _n(lin.b), positions * cin * cout, positions * cout)


def conv_cost(name: str, conv: Conv, h_out: int, w_out: int) -> LayerCost:
    p = h_out * w_out
    cout, cin_per, k, _ = conv.w.shape
    # depthwise: cin_per == 1, so the cross-channel factor drops out
    macs = k * k * cin_per * cout * p
    return LayerCost(name, _n(conv.w) + _n(conv.b), macs, cout * p)


def norm_cost(name: str, norm: Norm, c: int, positions: int) -> LayerCost:
    return LayerCost(name, _n(norm.g) + _n(norm.b), 0, c * positions)


def _act(name: str, elements: int) -> LayerCost:
    return LayerCost(name, 0, 0, elements)


def se_costs(prefix: str, se: SEParams, e: int, positions: int) -> list[LayerCost]:
    r = se.reduce.out_features
    return [
        _act(f"{prefix}.pool", e * positions),
        linear_cost(f"{prefix}.reduce", se.reduce, 1),
        _act(f"{prefix}.reduce.gelu", r),
        linear_cost(f"{prefix}.expand", se.expand, 1),
        _act(f"{prefix}.expand.sigmoid", e),
        _act(f"{prefix}.scale", e * positions),
    ]


def conv_block_costs(prefix: str, p: ConvBlockParams, h: int, w: int) -> list[LayerCost]:
    c = p.channels
    e = p.pw1.w.shape[0]
    pos = h * w
    out = []
    if p.norm is not None:
        out.append(norm_cost(f"{prefix}.norm", p.norm, c, pos))
    out += [
        conv_cost(f"{prefix}.pw1", p.pw1, h, w),
        _act(f"{prefix}.pw1.gelu", e * pos),
        conv_cost(f"{prefix}.dw", p.dw, h, w),
        _act(f"{prefix}.dw.gelu", e * pos),
    ]
    out += se_costs(f"{prefix}.se", p.se, e, pos)
    out.append(conv_cost(f"{prefix}.pw2", p.pw2, h, w))
    if p.residual:
        out.append(_act(f"{prefix}.residual", c * pos))
    return out


def focal_block_costs(prefix: str, p: FocalModulationParams, h: int, w: int) -> list[LayerCost]:
    c = p.channels
    pos = h * w
    n = p.focal_levels
    out = []
    if p.norm is not None:
        out.append(norm_cost(f"{prefix}.norm", p.norm, c, pos))
    out.append(linear_cost(f"{prefix}.proj_in", p.proj_in, pos))
    for i, conv in enumerate(p.level_dw):
        out.append(conv_cost(f"{prefix}.level_dw{i}", conv, h, w))
        out.append(_act(f"{prefix}.level_dw{i}.gelu", c * pos))
    out.append(_act(f"{prefix}.global_pool", c * pos))
    # n+1 gate products plus n additions
    out.append(_act(f"{prefix}.gate_sum", (2 * n + 1) * c * pos))
    out.append(linear_cost(f"{prefix}.proj_ctx", p.proj_ctx, pos))
    out.append(_act(f"{prefix}.query_mul", c * pos))
    if p.proj_out is not None:
        out.append(linear_cost(f"{prefix}.proj_out", p.proj_out, pos))
    if p.residual:
        out.append(_act(f"{prefix}.residual", c * pos))
    return out


def layer_costs(net: FocalConvNet, input_size: tuple[int, int] | None = None) -> list[LayerCost]:
    cfg = net.config
    h, w = input_size if input_size is not None else cfg.input_size
    out: list[LayerCost] = []
    for i, (conv, norm) in enumerate(net.stem):
        s = conv.stride
        h, w = (h + 2 * conv.pad - conv.kernel_size) // s + 1, (w + 2 * conv.pad - conv.kernel_size) // s + 1
        cout = conv.w.shape[0]
        out.append(conv_cost(f"stem.conv{i}", conv, h, w))
        out.append(_act(f"stem.conv{i}.gelu", cout * h * w))
        if norm is not None:
            out.append(norm_cost(f"stem.norm{i}", norm, cout, h * w))
    for s, stage in enumerate(net.stages):
        d = stage.down
        h = (h + 2 * d.pad - d.kernel_size) // d.stride + 1
        w = (w + 2 * d.pad - d.kernel_size) // d.stride + 1
        out.append(conv_cost(f"stage{s}.down", d, h, w))
        for b, block in enumerate(stage.blocks):
            out += conv_block_costs(f"stage{s}.block{b}.conv", block.conv, h, w)
            out += focal_block_costs(f"stage{s}.block{b}.focal", block.focal, h, w)
    c = net.head.in_features
    out.append(_act("head.pool", c * h * w))
    out.append(linear_cost("head", net.head, 1))
    return out


def count_params(net: FocalConvNet) -> tuple[list[tuple[str, int]], int]:
    """Per-layer parameter counts by traversing the parameter store."""
    per: dict[str, int] = {}
    for name, t in net.params.items():
        layer = name.rsplit(".", 1)[0]
        per[layer] = per.get(layer, 0) + t.size
    rows = list(per.items())
    return rows, sum(n for _, n in rows)


def count_flops(net: FocalConvNet, input_size: tuple[int, int] | None = None) -> tuple[list[tuple[str, int]], int]:
    costs = layer_costs(net, input_size)
    rows = [(c.name, c.flops) for c in costs]
    return rows, sum(n for _, n in rows)


def receptive_field(kernels: Iterable[int]) -> list[int]:
    """Receptive field after each stacked stride-1 conv: ``1 + sum(k_i - 1)`` over levels so far."""
    out, r = [], 1
    for k in kernels:
        r += int(k) - 1
        out.append(r)
    return out


def hardware_string() -> str:
    cpu = platform.processor() or platform.machine()
    return f"{platform.system()} {cpu} python{platform.python_version()} numpy{np.__version__}"


def throughput(
    net: FocalConvNet | None,
    batch_size: int = 6,
    warmup_iters: int = 1,
    timed_iters: int = 5,
    clock: Callable[[], float] = time.perf_counter,
    run: Callable[[], object] | None = None,
    seed: int = 0,
    dtype=np.float32,
    min_elapsed: float = 1e-6,
    max_repeat: int = 1 << 20,
) -> float:
    """Forward-only images/second, the median over ``timed_iters`` samples.

    ``run`` defaults to a no-grad forward of ``net``; tests inject both ``run``
    and a fake ``clock``. When one batch is too fast for the clock to resolve,
    each sample times a doubling number of batches.
    """
    if warmup_iters < 1:
        raise ValueError("warmup_iters must be >= 1")
    if timed_iters < 1:
        raise ValueError("timed_iters must be >= 1")
    if run is None:
        if net is None:
            raise ValueError("throughput needs a network or a run callable")
        cfg = net.config
        x = np.random.default_rng(seed).random((batch_size, cfg.in_channels, *cfg.input_size)).astype(dtype)
        xt = Tensor(x)

        def run(_net=net, _x=xt):
            with no_grad():
                return _net(_x)

    for _ in range(warmup_iters):
        run()
    repeat = 1
    rates = []
    while len(rates) < timed_iters:
        t0 = clock()
        for _ in range(repeat):
            run()
        dt = clock() - t0
        if dt < min_elapsed:
            if repeat >= max_repeat:
                raise RuntimeError("clock never advanced; cannot measure throughput")
            repeat *= 2
            rates.clear()
            continue
        rates.append(batch_size * repeat / dt)
    return float(statistics.median(rates))


def profile(net: FocalConvNet, input_size=None, measure_throughput: bool = False, batch_size: int = 6, **tput_kw) -> ProfileReport:
    costs = layer_costs(net, input_size)
    rep = ProfileReport(
        per_layer=costs,
        input_size=tuple(input_size or net.config.input_size),
        receptive_fields=receptive_field(net.config.kernels),
        hardware=hardware_string(),
    )
    if measure_throughput:
        rep.throughput_ips = throughput(net, batch_size=batch_size, **tput_kw)
        rep.batch_size = batch_size
    return rep


def closeness(ours: float, ref: float) -> float:
    return abs(ours - ref) / ref if ref else math.inf
