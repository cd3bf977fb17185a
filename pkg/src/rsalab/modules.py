"""Layer building blocks: parameter containers, conv/norm/linear layers,
residual blocks, and a plain SGD optimizer."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DataError
from .tensor import Tensor


class Module:
    """Parameter container. Parameters are Tensors with requires_grad=True
    found on attributes (recursing into sub-modules and lists); buffers are
    plain numpy arrays registered explicitly."""

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if key == "_buffers":
                continue
            full = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{full}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def named_buffers(self, prefix: str = ""):
        for name, val in self._buffers.items():
            yield f"{prefix}{name}", val
        for key, val in vars(self).items():
            if key == "_buffers":
                continue
            full = f"{prefix}{key}"
            if isinstance(val, Module):
                yield from val.named_buffers(f"{full}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.zero_grad()

    def state_dict(self, prefix: str = "") -> dict:
        state = {name: p.data for name, p in self.named_parameters(prefix)}
        state.update({name: b for name, b in self.named_buffers(prefix)})
        return state

    def load_state_dict(self, state: dict, prefix: str = ""):
        for name, p in self.named_parameters(prefix):
            if name not in state:
                raise DataError(f"weights file missing parameter {name}")
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise DataError(f"{name}: stored shape {arr.shape} != expected {p.data.shape}")
            p.data = arr.copy()
        # buffers are replaced in-registry so views held by layers stay valid
        for name, buf in list(self.named_buffers(prefix)):
            if name in state:
                np.copyto(buf, np.asarray(state[name], dtype=buf.dtype).reshape(buf.shape))


def he_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Fan-in scaled Gaussian init (training happens from scratch)."""
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(np.float32)


class Conv(Module):
    def __init__(self, rng, cin: int, cout: int, k: int, stride: int = 1, pad: int = 0, bias: bool = False):
        super().__init__()
        self.stride = stride
        self.pad = pad
        self.w = Tensor(he_init(rng, (cout, cin, k, k), cin * k * k), requires_grad=True)
        self.b = Tensor(np.zeros((cout, 1, 1), np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.w, self.stride, self.pad)
        if self.b is not None:
            y = y + self.b
        return y


class Linear(Module):
    def __init__(self, rng, cin: int, cout: int):
        super().__init__()
        self.w = Tensor(he_init(rng, (cin, cout), cin), requires_grad=True)
        self.b = Tensor(np.zeros((cout,), np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.w) + self.b


class ChannelNorm(Module):
    """Per-channel normalization with running statistics.

    While warming up, maps are normalized with their own batch statistics
    (treated as constants by the backward pass) and the running buffers are
    updated; after freeze() the stored statistics are used, making the layer
    a fixed per-channel affine. Rollout targets stay stable once frozen.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones((channels, 1, 1), np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros((channels, 1, 1), np.float32), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, np.float32))
        self.register_buffer("running_var", np.ones(channels, np.float32))
        self.register_buffer("frozen", np.zeros(1, np.float32))

    @property
    def is_frozen(self) -> bool:
        return bool(self._buffers["frozen"][0] > 0.5)

    def freeze(self):
        self._buffers["frozen"][0] = 1.0

    def __call__(self, x: Tensor) -> Tensor:
        axes = (0, 2, 3) if x.data.ndim == 4 else (1, 2)
        if self.is_frozen:
            mean = self._buffers["running_mean"]
            var = self._buffers["running_var"]
        else:
            mean = x.data.mean(axis=axes)
            var = x.data.var(axis=axes)
            m = self.momentum
            self._buffers["running_mean"] *= 1.0 - m
            self._buffers["running_mean"] += m * mean.astype(np.float32)
            self._buffers["running_var"] *= 1.0 - m
            self._buffers["running_var"] += m * var.astype(np.float32)
        shape = (1, -1, 1, 1) if x.data.ndim == 4 else (-1, 1, 1)
        scale = (1.0 / np.sqrt(var + self.eps)).reshape(shape).astype(x.dtype)
        shift = (-mean).reshape(shape).astype(x.dtype)
        return (x + Tensor(shift)) * Tensor(scale) * self.gamma + self.beta


class ResBlock(Module):
    """Two 3x3 convs with pre-norm ordering conv->norm->relu, additive
    shortcut (1x1 projection when stride or width changes), final relu."""

    def __init__(self, rng, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = Conv(rng, cin, cout, 3, stride=stride, pad=1)
        self.n1 = ChannelNorm(cout)
        self.conv2 = Conv(rng, cout, cout, 3, stride=1, pad=1)
        self.n2 = ChannelNorm(cout)
        if stride != 1 or cin != cout:
            self.proj = Conv(rng, cin, cout, 1, stride=stride, pad=0)
            self.nproj = ChannelNorm(cout)
        else:
            self.proj = None
            self.nproj = None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.relu(self.n1(self.conv1(x)))
        y = self.n2(self.conv2(y))
        if self.proj is not None:
            sc = self.nproj(self.proj(x))
        else:
            sc = x
        return T.relu(y + sc)


def freeze_norms(module: Module):
    stack = [module]
    while stack:
        m = stack.pop()
        if isinstance(m, ChannelNorm):
            m.freeze()
        for val in vars(m).values():
            if isinstance(val, Module):
                stack.append(val)
            elif isinstance(val, (list, tuple)):
                stack.extend(v for v in val if isinstance(v, Module))


class SGD:
    """Plain momentum SGD over a module's parameters."""

    def __init__(self, module: Module, lr: float, momentum: float = 0.9):
        self.params = dict(module.named_parameters())
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            p.data = p.data - self.lr * v

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()
