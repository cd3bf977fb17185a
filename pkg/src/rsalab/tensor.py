"""Minimal dense tensor engine with reverse-mode differentiation.

Tensors wrap contiguous numpy arrays (float32 canonical; float64 supported
for high-precision gradient verification). Every differentiable op records
its parents and a backward closure; ``Tensor.backward`` replays them in
reverse topological order. Op coverage is exactly what the networks here
need: 2-D convolution and pooling, elementwise math, reductions, gather,
softmax/sigmoid heads, and a smooth-L1 for box regression.

Forward values are immutable once created; gradients accumulate into
``.grad`` and are reset via ``zero_grad``/fresh graphs. Read-only sharing
across threads is safe, gradient accumulation is not.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import NonFiniteLossError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / target building)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    # -- bookkeeping ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    # -- graph ----------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from a scalar loss.

        Builds the topological order iteratively (graphs from multi-level
        rollouts are deep enough that recursion is a liability).
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.data.shape}")
        order: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # -- operators (thin wrappers over module functions) -----------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), mul(self, -1.0))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the op set")
        return mul(self, 1.0 / float(other))

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def log(self):
        return tlog(self)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[], None] | None) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce gradient g back to a broadcast operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a.dtype)
    out_data = a.data + b.data

    def backward():
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a.dtype)
    out_data = a.data * b.data

    def backward():
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad * a.data, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; subgradient routes to the larger operand (ties -> a)."""
    take_a = a.data >= b.data
    out_data = np.where(take_a, a.data, b.data)

    def backward():
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad * take_a, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad * ~take_a, b.shape))

    out = _make(out_data, (a, b), backward)
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward():
        if x.requires_grad:
            x.accumulate_grad(out.grad * mask)

    out = _make(x.data * mask, (x,), backward)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))

    def backward():
        if x.requires_grad:
            x.accumulate_grad(out.grad * s * (1.0 - s))

    out = _make(s, (x,), backward)
    return out


def tlog(x: Tensor) -> Tensor:
    def backward():
        if x.requires_grad:
            x.accumulate_grad(out.grad / x.data)

    out = _make(np.log(x.data), (x,), backward)
    return out


def texp(x: Tensor) -> Tensor:
    e = np.exp(x.data)

    def backward():
        if x.requires_grad:
            x.accumulate_grad(out.grad * e)

    out = _make(e, (x,), backward)
    return out


def square(x: Tensor) -> Tensor:
    def backward():
        if x.requires_grad:
            x.accumulate_grad(out.grad * 2.0 * x.data)

    out = _make(x.data * x.data, (x,), backward)
    return out


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input was inside (lo, hi)."""
    inside = (x.data > lo) & (x.data < hi)

    def backward():
        if x.requires_grad:
            x.accumulate_grad(out.grad * inside)

    out = _make(np.clip(x.data, lo, hi), (x,), backward)
    return out


def smooth_l1(x: Tensor) -> Tensor:
    """Huber-style penalty: 0.5 x^2 inside |x|<1, |x| - 0.5 outside."""
    a = np.abs(x.data)
    small = a < 1.0
    val = np.where(small, 0.5 * x.data * x.data, a - 0.5)

    def backward():
        if x.requires_grad:
            x.accumulate_grad(out.grad * np.where(small, x.data, np.sign(x.data)))

    out = _make(val, (x,), backward)
    return out


# -- reductions / shape ----------------------------------------------------


def tsum(x: Tensor, axis=None) -> Tensor:
    def backward():
        if not x.requires_grad:
            return
        g = out.grad
        if axis is None:
            x.accumulate_grad(np.broadcast_to(g, x.shape).copy())
        else:
            x.accumulate_grad(np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    out = _make(x.data.sum(axis=axis), (x,), backward)
    return out


def tmean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    def backward():
        if x.requires_grad:
            x.accumulate_grad(out.grad.reshape(x.shape))

    out = _make(x.data.reshape(shape), (x,), backward)
    return out


def concat(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    sizes = [p.data.reshape(-1).shape[0] for p in parts]
    flat = np.concatenate([p.data.reshape(-1) for p in parts])

    def backward():
        off = 0
        for p, s in zip(parts, sizes):
            if p.requires_grad:
                p.accumulate_grad(out.grad[off : off + s].reshape(p.shape))
            off += s

    out = _make(flat, tuple(parts), backward)
    return out


def take_flat(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather values at flat indices into x's raveled data; scatter-add on backward."""
    idx = np.asarray(idx, dtype=np.int64)
    flat = x.data.reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= flat.size):
        raise ShapeError(f"gather index out of range for tensor of size {flat.size}")

    def backward():
        if x.requires_grad:
            g = np.zeros(flat.size, dtype=x.data.dtype)
            np.add.at(g, idx, out.grad)
            x.accumulate_grad(g.reshape(x.shape))

    out = _make(flat[idx], (x,), backward)
    return out


# -- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product (N,K) @ (K,M)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul expects (N,K)@(K,M), got {a.shape} @ {b.shape}")

    def backward():
        if a.requires_grad:
            a.accumulate_grad(out.grad @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ out.grad)

    out = _make(a.data @ b.data, (a, b), backward)
    return out


def softmax(x: Tensor, axis: int = 0) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward():
        if x.requires_grad:
            gy = out.grad
            dot = (gy * s).sum(axis=axis, keepdims=True)
            x.accumulate_grad(s * (gy - dot))

    out = _make(s, (x,), backward)
    return out


# -- convolution / pooling --------------------------------------------------


def _to4d(x: np.ndarray):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected a CxHxW or NxCxHxW map, got shape {x.shape}")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x (C,H,W or N,C,H,W) with kernels w (Co,C,Kh,Kw).

    Zero padding, floor output extents: H' = (H + 2 pad - Kh)//stride + 1.
    """
    x4, squeeze = _to4d(x.data)
    if w.data.ndim != 4:
        raise ShapeError(f"kernel must be Co x C x Kh x Kw, got shape {w.shape}")
    n, c, h, wd = x4.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"input has {c} channels but kernel expects {ci} (kernel {w.shape}, input {x.shape})")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    y = kernels.conv2d_forward(np.ascontiguousarray(x4), w.data, stride, pad)

    def backward():
        gy = out.grad if not squeeze else out.grad[None]
        need_x = x.requires_grad
        need_w = w.requires_grad
        if not (need_x or need_w):
            return
        gx, gw = kernels.conv2d_backward(np.ascontiguousarray(x4), w.data, np.ascontiguousarray(gy), stride, pad)
        if need_x:
            x.accumulate_grad(gx[0] if squeeze else gx)
        if need_w:
            w.accumulate_grad(gw)

    out = _make(y[0] if squeeze else y, (x, w), backward)
    return out


def maxpool2d(x: Tensor, window: int, stride: int, pad: int = 0) -> Tensor:
    if window <= 0:
        raise ShapeError(f"pooling window must be positive, got {window}")
    x4, squeeze = _to4d(x.data)
    if window > x4.shape[2] + 2 * pad or window > x4.shape[3] + 2 * pad:
        raise ShapeError(f"pooling window {window} exceeds spatial extents {x4.shape[2:]} (pad {pad})")
    y, idx = kernels.maxpool_forward(np.ascontiguousarray(x4), window, stride, pad)

    def backward():
        if x.requires_grad:
            gy = out.grad if not squeeze else out.grad[None]
            gx = kernels.maxpool_backward(x4.shape, idx, np.ascontiguousarray(gy))
            x.accumulate_grad(gx[0] if squeeze else gx)

    out = _make(y[0] if squeeze else y, (x,), backward)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Channel means over the spatial plane: (...,C,H,W) -> (...,C,1,1)."""
    x4, squeeze = _to4d(x.data)
    n, c, h, w = x4.shape
    y = x4.mean(axis=(2, 3), keepdims=True)

    def backward():
        if x.requires_grad:
            gy = out.grad if not squeeze else out.grad[None]
            g = np.broadcast_to(gy / (h * w), x4.shape).copy()
            x.accumulate_grad(g[0] if squeeze else g)

    out = _make(y[0] if squeeze else y, (x,), backward)
    return out


def pool2d(x: Tensor, kind: str, window: int = 0, stride: int = 1, pad: int = 0) -> Tensor:
    """Pooling dispatch: kind is 'max' (windowed) or 'global-average'."""
    if kind == "max":
        return maxpool2d(x, window, stride, pad)
    if kind == "global-average":
        return global_avg_pool(x)
    raise ShapeError(f"unknown pooling kind {kind!r}")


# -- verification -----------------------------------------------------------


def assert_finite(x: Tensor, what: str = "tensor"):
    if not np.isfinite(x.data).all():
        raise NonFiniteLossError(f"{what} contains non-finite values")


def finite_diff_check(
    parameter: Tensor,
    loss_fn: Callable[[], Tensor],
    eps: float = 1e-3,
    max_coords: int = 64,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of loss_fn w.r.t. parameter against central
    differences; returns the max relative error over sampled coordinates.

    loss_fn must be deterministic and rebuild the graph on every call. A
    non-finite loss under perturbation raises NonFiniteLossError so it is
    distinguishable from a plain tolerance failure.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    loss = loss_fn()
    if loss.data.size != 1:
        raise ShapeError("loss_fn must return a scalar")
    if not np.isfinite(loss.data).all():
        raise NonFiniteLossError("loss is non-finite at the evaluation point")
    parameter.zero_grad()
    loss.backward()
    analytic = np.zeros_like(parameter.data) if parameter.grad is None else parameter.grad.copy()

    flat = parameter.data.reshape(-1)
    n = flat.size
    if n <= max_coords:
        coords = np.arange(n)
    else:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = gen.choice(n, size=max_coords, replace=False)

    worst = 0.0
    a_flat = analytic.reshape(-1)
    for c in coords:
        orig = flat[c]
        flat[c] = orig + eps
        lp = loss_fn().item()
        flat[c] = orig - eps
        lm = loss_fn().item()
        flat[c] = orig
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise NonFiniteLossError(f"loss non-finite under perturbation of coordinate {int(c)}")
        numeric = (lp - lm) / (2.0 * eps)
        denom = max(abs(a_flat[c]), abs(numeric), 1e-8)
        worst = max(worst, abs(a_flat[c] - numeric) / denom)
    return worst
