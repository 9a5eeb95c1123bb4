"""Central finite-difference gradient checks for every differentiable op and both blocks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .layers import conv_block_forward, focal_modulation_forward
from .model import ModelConfig, build_conv_block, build_focal_block, _Builder
from .params import ParamStore
from .tensor import Tensor

FD_STEP = 1e-4
REL_TOL = 1e-4


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """d f / d arr by central differences; ``arr`` is perturbed in place and restored."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / den)


def check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0, h: float = FD_STEP) -> float:
    """Max relative error between analytic and numerical gradients of ``sum(fn(*inputs) * R)``.

    ``R`` is a fixed random projection so every output element matters
    (a plain sum would hide softmax and normalization gradients).
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    loss = T.tsum(T.mul(out, proj))
    loss.backward()

    def f() -> float:
        with T.no_grad():
            return float((fn(*[Tensor(a) for a in arrays]).data * proj).sum())

    worst = 0.0
    for t, a in zip(tensors, arrays):
        # the Tensor wraps its own contiguous copy, so perturb the source array
        num = numerical_grad(f, a, h)
        ana = t.grad if t.grad is not None else np.zeros_like(a)
        worst = max(worst, rel_error(ana, num))
    return worst


def check_params(forward: Callable[[Tensor], Tensor], x: np.ndarray, store: ParamStore, seed: int = 0, h: float = FD_STEP) -> float:
    """Like :func:`check` but differentiates w.r.t. the input and every parameter in ``store``."""
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    out = forward(xt)
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    store.zero_grad()
    T.tsum(T.mul(out, proj)).backward()

    def f() -> float:
        with T.no_grad():
            return float((forward(Tensor(xt.data)).data * proj).sum())

    worst = rel_error(xt.grad, numerical_grad(f, xt.data, h))
    for _, p in store.items():
        ana = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = max(worst, rel_error(ana, numerical_grad(f, p.data, h)))
    return worst


def _randomize(store: ParamStore, rng: np.random.Generator, scale: float = 0.5) -> None:
    # default init zeroes biases and fixes norm scales; randomize so every path carries gradient
    for _, p in store.items():
        p.data = rng.standard_normal(p.shape) * scale


def conv_block_case(c: int, hw: int, n: int, seed: int) -> tuple[Callable, np.ndarray, ParamStore]:
    cfg = ModelConfig(expansion_ratio=2, se_ratio=2)
    store = ParamStore()
    p = build_conv_block(_Builder(store, seed), "blk", c, cfg)
    rng = np.random.default_rng(seed)
    _randomize(store, rng)
    x = rng.standard_normal((n, c, hw, hw))
    return (lambda t: conv_block_forward(t, p)), x, store


def focal_block_case(c: int, hw: int, n: int, seed: int, levels: int = 2, gates_per_channel: bool = False):
    cfg = ModelConfig(focal_levels=levels, gates_per_channel=gates_per_channel)
    store = ParamStore()
    p = build_focal_block(_Builder(store, seed), "foc", c, cfg)
    rng = np.random.default_rng(seed)
    _randomize(store, rng)
    x = rng.standard_normal((n, c, hw, hw))
    return (lambda t: focal_modulation_forward(t, p)), x, store


@dataclass
class CaseResult:
    name: str
    shape: str
    rel_error: float

    @property
    def ok(self) -> bool:
        return self.rel_error < REL_TOL


def _ce(logits: Tensor, labels: np.ndarray, weights: np.ndarray) -> Tensor:
    from .engine import weighted_ce

    return weighted_ce(logits, labels, weights)


def run_suite(seed: int = 0) -> list[CaseResult]:
    """Every op on three random small shapes each, plus both composite blocks."""
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.standard_normal(s)
    out: list[CaseResult] = []

    def add(name, shape, err):
        out.append(CaseResult(name, str(shape), err))

    for n, ci, co in [(2, 3, 4), (5, 1, 2), (3, 6, 3)]:
        add("linear", (n, ci, co), check(lambda x, w, b: T.matmul_linear(x, w, b), [r(n, ci), r(ci, co), r(co)]))
    for n, ci, co, hw, k, s, p in [(1, 2, 3, 5, 3, 1, 1), (2, 2, 2, 5, 3, 2, 1), (1, 3, 2, 4, 1, 1, 0)]:
        add(
            "conv2d",
            (n, ci, co, hw, k, s, p),
            check(lambda x, w, b: T.conv2d(x, w, b, stride=s, pad=p), [r(n, ci, hw, hw), r(co, ci, k, k), r(co)]),
        )
    for n, c, hw, k, s, p in [(1, 2, 5, 3, 1, 1), (2, 3, 6, 3, 2, 1), (1, 2, 5, 5, 1, 2)]:
        add(
            "depthwise_conv2d",
            (n, c, hw, k, s, p),
            check(lambda x, w, b: T.depthwise_conv2d(x, w, b, stride=s, pad=p), [r(n, c, hw, hw), r(c, 1, k, k), r(c)]),
        )
    for shape in [(3, 4), (2, 3, 2, 2), (7,)]:
        add("gelu", shape, check(T.gelu, [r(*shape) * 2]))
        add("sigmoid", shape, check(T.sigmoid, [r(*shape) * 2]))
    for shape in [(2, 3), (4, 5), (1, 7)]:
        add("softmax", shape, check(lambda x: T.softmax(x, axis=-1), [r(*shape)]))
        labels = rng.integers(0, shape[1], size=shape[0])
        weights = rng.uniform(0.5, 2.0, size=shape[1])
        add("softmax+weighted_ce", shape, check(lambda x: _ce(x, labels, weights), [r(*shape)]))
    for shape, axis in [((3, 5), -1), ((2, 4, 3, 3), 1), ((2, 6), -1)]:
        c = shape[axis]
        add(
            "layer_norm",
            (shape, axis),
            check(lambda x, g, b: T.layer_norm(x, g, b, axis=axis), [r(*shape), r(c), r(c)]),
        )
    for shape in [(1, 2, 3, 3), (2, 3, 4, 5), (2, 1, 1, 1)]:
        add("global_avg_pool", shape, check(T.global_avg_pool, [r(*shape)]))
    for a, b in [((2, 3, 4, 4), (2, 3, 1, 1)), ((2, 1, 3, 3), (2, 4, 3, 3)), ((3, 4), (3, 4))]:
        add("elementwise_mul", (a, b), check(T.mul, [r(*a), r(*b)]))
    for c, hw, n in [(2, 3, 1), (4, 4, 2), (2, 5, 1)]:
        f, x, store = conv_block_case(c, hw, n, seed)
        add("conv_block", x.shape, check_params(f, x, store))
    for c, hw, n, levels, pc in [(2, 4, 1, 2, False), (3, 3, 2, 1, False), (2, 5, 1, 3, True)]:
        f, x, store = focal_block_case(c, hw, n, seed, levels, pc)
        add("focal_modulation", (x.shape, levels, "per-channel" if pc else "per-level"), check_params(f, x, store))
    return out
