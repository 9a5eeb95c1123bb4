"""Dense tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor` and, when any input requires a
gradient, records a backward closure plus references to its parents. Calling
:meth:`Tensor.backward` on a scalar walks that recorded graph in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ContractError, DimensionError, ShapeError

DEFAULT_DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, profiling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires a gradient."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def _topological_order(root: Tensor) -> list[Tensor]:
    """Iterative DFS; parents always precede children in the returned list."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ----------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product; size-1 axes broadcast (e.g. an (N,C,1,1) gate over (N,C,H,W))."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "elementwise_mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


elementwise_mul = mul


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), backward)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 1) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis`` (used to split fused projections)."""
    x = as_tensor(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _make(x.data[idx].copy(), (x,), backward)


def expand(x: Tensor, shape) -> Tensor:
    """Broadcast size-1 axes of ``x`` up to ``shape`` as a materialized tensor."""
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"expand: cannot broadcast {x.shape} to {tuple(shape)}") from None

    def backward(g):
        return (_unbroadcast(g, x.shape),)

    return _make(out, (x,), backward)


def take_along(x: Tensor, index: np.ndarray, axis: int = -1) -> Tensor:
    """``out[n] = x[n, index[n]]`` for a 2-D ``x``."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],) or axis not in (-1, 1):
        raise DimensionError(f"take_along expects x[N,K] and index[N], got {x.shape} and {index.shape}")
    rows = np.arange(x.shape[0])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, index), g)
        return (full,)

    return _make(x.data[rows, index].copy(), (x,), backward)


# -- linear / convolution --------------------------------------------------
def matmul_linear(x: Tensor, w: Tensor, b: Tensor | None = None, axis: int = -1) -> Tensor:
    """Affine map over one axis: ``out[..., j] = sum_i x[..., i] * w[i, j] + b[j]``.

    With ``axis=1`` on an (N, C, H, W) tensor this is a per-position linear
    layer (identical to a 1x1 convolution) and the result stays NCHW.
    """
    x, w = as_tensor(x), as_tensor(w)
    ax = axis % x.ndim
    if w.ndim != 2 or x.shape[ax] != w.shape[0]:
        raise DimensionError(
            f"matmul_linear: input shape {x.shape} (axis {axis}) does not match weight shape {w.shape}"
        )
    if b is not None and (b.ndim != 1 or b.shape[0] != w.shape[1]):
        raise DimensionError(f"matmul_linear: bias shape {b.shape} does not match weight shape {w.shape}")
    xm = np.moveaxis(x.data, ax, -1)
    out = xm @ w.data
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(np.moveaxis(out, -1, ax))
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gm = np.moveaxis(g, ax, -1)
        gx = np.ascontiguousarray(np.moveaxis(gm @ w.data.T, -1, ax))
        gw = xm.reshape(-1, w.shape[0]).T @ gm.reshape(-1, w.shape[1])
        if b is None:
            return gx, gw
        return gx, gw, gm.reshape(-1, w.shape[1]).sum(axis=0)

    return _make(out, parents, backward)


def _out_size(n: int, k: int, stride: int, pad: int, op: str) -> int:
    out = (n + 2 * pad - k) // stride + 1
    if out < 1:
        raise ShapeError(f"{op}: input side {n} with kernel {k}, stride {stride}, pad {pad} gives output side {out}")
    return out


def _pad(a: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding; x is (N, C_in, H, W), w is (C_out, C_in, k, k)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, k, k2 = w.shape
    if wcin != cin or k != k2:
        raise DimensionError(f"conv2d: input shape {x.shape} does not match weight shape {w.shape}")
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    ho = _out_size(h, k, stride, pad, "conv2d")
    wo = _out_size(wd, k, stride, pad, "conv2d")
    xp = _pad(x.data, pad)
    # (N, C, Ho, Wo, k, k) strided view
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, C_out)
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # (C_out, C_in, k, k)
        gxp = np.zeros_like(xp)
        hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(k):
            for j in range(k):
                # (N, C_in, Ho, Wo)
                contrib = np.tensordot(w.data[:, :, i, j], g, axes=([0], [1])).transpose(1, 0, 2, 3)
                gxp[:, :, i : i + hs : stride, j : j + ws : stride] += contrib
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        if b is None:
            return np.ascontiguousarray(gx), gw
        return np.ascontiguousarray(gx), gw, g.sum(axis=(0, 2, 3))

    return _make(out, parents, backward)


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Per-channel cross-correlation; w is (C, 1, k, k) and channel c only sees filter c."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"depthwise_conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    if w.shape[0] != c or w.shape[1] != 1 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"depthwise_conv2d: input shape {x.shape} does not match weight shape {w.shape}")
    k = w.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"depthwise_conv2d: kernel size must be odd, got {k}")
    ho = _out_size(h, k, stride, pad, "depthwise_conv2d")
    wo = _out_size(wd, k, stride, pad, "depthwise_conv2d")
    xp = _pad(x.data, pad)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    kern = w.data[:, 0]
    out = np.zeros((n, c, ho, wo), dtype=np.result_type(x.data, w.data))
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i : i + hs : stride, j : j + ws : stride] * kern[:, i, j][None, :, None, None]
    if b is not None:
        out += b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i in range(k):
            for j in range(k):
                view = xp[:, :, i : i + hs : stride, j : j + ws : stride]
                gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, view)
                gxp[:, :, i : i + hs : stride, j : j + ws : stride] += g * kern[:, i, j][None, :, None, None]
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        if b is None:
            return np.ascontiguousarray(gx), gw
        return np.ascontiguousarray(gx), gw, g.sum(axis=(0, 2, 3))

    return _make(out, parents, backward)


# -- activations -----------------------------------------------------------
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written through erf."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make(x.data * cdf, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        return (g * s * (1.0 - s),)

    return _make(s, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Log-sum-exp stabilized log of softmax."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward)


# -- pooling / normalization -----------------------------------------------
def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over H and W: (N, C, H, W) -> (N, C, 1, 1)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects (N, C, H, W), got {x.shape}")
    hw = x.shape[2] * x.shape[3]

    def backward(g):
        return (np.broadcast_to(g / hw, x.shape).copy(),)

    return _make(x.data.mean(axis=(2, 3), keepdims=True), (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Normalize each position over the channel ``axis`` then apply ``gamma``/``beta``.

    For NCHW activations pass ``axis=1``; statistics never mix examples.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    ax = axis % x.ndim
    c = x.shape[ax]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: channel count {c} does not match gamma {gamma.shape} / beta {beta.shape}")
    bshape = [1] * x.ndim
    bshape[ax] = c
    gam = gamma.data.reshape(bshape)
    mu = x.data.mean(axis=ax, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gam + beta.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != ax)

    def backward(g):
        gxhat = g * gam
        gx = inv * (
            gxhat
            - gxhat.mean(axis=ax, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=ax, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(out, (x, gamma, beta), backward)
