"""Small layer library and Adam on top of :mod:`tvrn.tensor`."""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import FormatError
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Container that discovers parameters and sub-modules by attribute order.

    Attributes whose name starts with an underscore are references to
    modules owned elsewhere (e.g. a frozen encoder) and are not collected.
    """

    def parameters(self) -> list[Parameter]:
        return list(self._iter_params(set()))

    def _iter_params(self, seen: set[int]) -> Iterator[Parameter]:
        for name, value in vars(self).items():
            if not name.startswith("_"):
                yield from _walk(value, seen)

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, arrays) -> None:
        params = self.parameters()
        arrays = list(arrays)
        if len(arrays) != len(params):
            raise FormatError(f"checkpoint has {len(arrays)} tensors, model needs {len(params)}")
        for p, a in zip(params, arrays):
            if p.shape != a.shape:
                raise FormatError(f"checkpoint tensor shape {a.shape} != parameter {p.shape}")
            p.data = np.array(a, dtype=p.data.dtype)

    def save(self, path) -> None:
        T.save_tensors(path, (p.data for p in self.parameters()))

    def load(self, path) -> None:
        self.load_state(T.load_tensors(path))

    def digest(self) -> str:
        """Hash of all parameter values; used to audit frozen phases."""
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _walk(value, seen: set[int]) -> Iterator[Parameter]:
    if isinstance(value, Parameter):
        if id(value) not in seen:
            seen.add(id(value))
            yield value
    elif isinstance(value, Module):
        if id(value) not in seen:
            seen.add(id(value))
            yield from value._iter_params(seen)
    elif isinstance(value, (list, tuple)):
        for v in value:
            yield from _walk(v, seen)
    elif isinstance(value, dict):
        for v in value.values():
            yield from _walk(v, seen)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, k: int = 3,
                 stride: int = 1, zero: bool = False, gain: float = 1.0):
        self.stride = stride
        self.padding = k // 2
        if zero:
            w = np.zeros((cout, cin, k, k))
        else:
            w = rng.normal(0.0, gain * np.sqrt(2.0 / (cin * k * k)), (cout, cin, k, k))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, zero: bool = False):
        w = np.zeros((cout, cin)) if zero else rng.normal(0.0, np.sqrt(1.0 / cin), (cout, cin))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


# softplus(_NEUTRAL_BIAS) + 1e-3 == 1, so a fresh scale head is neutral
QP_CENTRE, QP_SPREAD = 27.0, 10.0
_NEUTRAL_BIAS = float(np.log(np.expm1(1.0 - 1e-3)))


class QPScale(Module):
    """Two-layer perceptron mapping the centred QP ``(qp - 27) / 10`` to a positive channel scale."""

    def __init__(self, channels: int, rng: np.random.Generator, hidden: int = 16):
        self.fc1 = Linear(1, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)
        self.fc2.weight.data *= 0.1
        self.fc2.bias.data[:] = _NEUTRAL_BIAS

    def __call__(self, qp) -> Tensor:
        q = (np.asarray(qp, dtype=T.get_default_dtype()).reshape(-1, 1) - QP_CENTRE) / QP_SPREAD
        h = T.leaky_relu(self.fc1(Tensor(q)))
        return T.softplus(self.fc2(h)) + 1e-3


class ConvStack(Module):
    """conv-lrelu-conv-lrelu-conv; an optional channel scale hits the penultimate features."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, hidden: int = 16,
                 zero_last: bool = True):
        self.c1 = Conv2d(cin, hidden, rng)
        self.c2 = Conv2d(hidden, hidden, rng)
        self.c3 = Conv2d(hidden, cout, rng, zero=zero_last)
        self.hidden = hidden

    def __call__(self, x: Tensor, scale: Tensor | None = None) -> Tensor:
        h = T.leaky_relu(self.c1(x))
        h = T.leaky_relu(self.c2(h))
        if scale is not None:
            h = T.channel_scale(h, scale)
        return self.c3(h)


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def all_finite(grads) -> bool:
    return all(np.isfinite(g).all() for g in grads)
