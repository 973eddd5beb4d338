"""Affine coupling blocks and their QP-conditioned variant.

One block updates the low branch from the high branch, then the high
branch from the updated low branch::

    l' = l * S(phi(h)) + varphi(h)
    h' = h * S(rho(l')) + eta(l')

with the bounded scale ``S(u) = exp(gamma * (2 sigmoid(u) - 1))``. Because
``S(-u) = 1 / S(u)`` the inverse needs no function inverses::

    h = (h' - eta(l')) * S(-rho(l'))
    l = (l' - varphi(h)) * S(-phi(h))
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .errors import InvalidConfigError, InvalidShapeError
from .tensor import Tensor


def scale_activation(u: Tensor, gamma: float = 1.0) -> Tensor:
    if gamma <= 0:
        raise InvalidConfigError("gamma must be positive")
    return T.exp((T.sigmoid(u) * 2.0 - 1.0) * gamma)


class CouplingBlock(nn.Module):
    def __init__(self, c_low: int, c_high: int, rng: np.random.Generator, gamma: float = 1.0,
                 hidden: int = 16):
        self.c_low, self.c_high, self.gamma = c_low, c_high, gamma
        self.phi = nn.ConvStack(c_high, c_low, rng, hidden=hidden)
        self.varphi = nn.ConvStack(c_high, c_low, rng, hidden=hidden)
        self.rho = nn.ConvStack(c_low, c_high, rng, hidden=hidden)
        self.eta = nn.ConvStack(c_low, c_high, rng, hidden=hidden)

    def _scales(self, qp):
        return {}

    def _check(self, low: Tensor, high: Tensor) -> None:
        if low.ndim != 4 or high.ndim != 4 or low.shape[1] != self.c_low \
                or high.shape[1] != self.c_high or low.shape[0] != high.shape[0] \
                or low.shape[2:] != high.shape[2:]:
            raise InvalidShapeError(
                f"coupling block ({self.c_low}, {self.c_high}) got {low.shape} and {high.shape}")

    def forward(self, low: Tensor, high: Tensor, qp=None) -> tuple[Tensor, Tensor]:
        self._check(low, high)
        s = self._scales(qp)
        g = self.gamma
        low = low * scale_activation(self.phi(high, s.get("phi")), g) + self.varphi(high, s.get("varphi"))
        high = high * scale_activation(self.rho(low, s.get("rho")), g) + self.eta(low, s.get("eta"))
        return low, high

    def inverse(self, low: Tensor, high: Tensor, qp=None) -> tuple[Tensor, Tensor]:
        self._check(low, high)
        s = self._scales(qp)
        g = self.gamma
        high = (high - self.eta(low, s.get("eta"))) * scale_activation(-self.rho(low, s.get("rho")), g)
        low = (low - self.varphi(high, s.get("varphi"))) * scale_activation(-self.phi(high, s.get("phi")), g)
        return low, high


class QCouplingBlock(CouplingBlock):
    """Coupling block whose transformation nets are channel-scaled by ``s(qp)``."""

    NETS = ("phi", "varphi", "rho", "eta")

    def __init__(self, c_low: int, c_high: int, rng: np.random.Generator, gamma: float = 1.0,
                 hidden: int = 16, conditioned: bool = True):
        super().__init__(c_low, c_high, rng, gamma, hidden)
        self.conditioned = conditioned
        self.scales = {k: nn.QPScale(hidden, rng) for k in self.NETS} if conditioned else {}

    def _scales(self, qp):
        if not self.conditioned:
            return {}
        if qp is None:
            raise InvalidConfigError("a QP-conditioned block needs qp")
        return {k: self.scales[k](qp) for k in self.NETS}


class CouplingStack(nn.Module):
    def __init__(self, blocks):
        self.blocks = list(blocks)

    def forward(self, low: Tensor, high: Tensor, qp=None) -> tuple[Tensor, Tensor]:
        for blk in self.blocks:
            low, high = blk.forward(low, high, qp)
        return low, high

    def inverse(self, low: Tensor, high: Tensor, qp=None) -> tuple[Tensor, Tensor]:
        for blk in reversed(self.blocks):
            low, high = blk.inverse(low, high, qp)
        return low, high


def coupling_stack(c_low: int, c_high: int, rng: np.random.Generator, depth: int = 3,
                   gamma: float = 1.0, hidden: int = 16) -> CouplingStack:
    return CouplingStack(CouplingBlock(c_low, c_high, rng, gamma, hidden) for _ in range(depth))


def randomize(module: nn.Module, rng: np.random.Generator, scale: float = 1.0) -> None:
    """Overwrite every parameter with Gaussian noise; used by invertibility checks.

    Weights get standard deviation ``scale / sqrt(fan_in)``, biases ``0.1 * scale``,
    so zero-initialised heads become active at a realistic magnitude.
    """
    for p in module.parameters():
        fan_in = int(np.prod(p.shape[1:])) if p.ndim > 1 else 0
        std = scale / np.sqrt(fan_in) if fan_in else 0.1 * scale
        p.data = (rng.standard_normal(p.shape) * std).astype(p.data.dtype)
