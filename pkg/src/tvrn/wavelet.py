"""Temporal lifting transform over even/odd frame groups and the motion-compensated Haar pair.

Frame groups are tensors ``[B, N, H, W]`` with time along the channel axis.
The lifting order is predict-then-update::

    x_h = x_o - P(x_e)        x_l = x_e + U(x_h)

and the inverse undoes the steps in reverse, so reconstruction is exact for
any ``P`` and ``U``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .codec import mv_to_flow
from .errors import InvalidLengthError, InvalidPairError
from .flow import backward_warp, block_flow, interpolation_matrices
from .tensor import Tensor


def group_sizes(n: int) -> tuple[int, int]:
    """``(ceil(n/2), floor(n/2))``."""
    if n < 2:
        raise InvalidLengthError(f"a frame group needs at least 2 frames, got {n}")
    return (n + 1) // 2, n // 2


@dataclass
class FrequencyPair:
    low: Tensor   # [B, ceil(N/2), H, W]
    high: Tensor  # [B, floor(N/2), H, W]

    def validate(self) -> None:
        nl, nh = self.low.shape[1], self.high.shape[1]
        if nl - nh not in (0, 1) or self.low.shape[2:] != self.high.shape[2:] \
                or self.low.shape[0] != self.high.shape[0]:
            raise InvalidPairError(f"low {self.low.shape} and high {self.high.shape} do not pair")

    @property
    def frame_count(self) -> int:
        return self.low.shape[1] + self.high.shape[1]


def split(x: Tensor) -> tuple[Tensor, Tensor]:
    group_sizes(x.shape[1])
    return T.take(x, (slice(None), slice(0, None, 2))), T.take(x, (slice(None), slice(1, None, 2)))


def interleave(even: Tensor, odd: Tensor) -> Tensor:
    ne, no = even.shape[1], odd.shape[1]
    if ne - no not in (0, 1):
        raise InvalidPairError(f"cannot interleave {ne} even with {no} odd frames")
    order = np.empty(ne + no, dtype=np.int64)
    order[0::2] = np.arange(ne)
    order[1::2] = ne + np.arange(no)
    return T.take(T.concat([even, odd]), (slice(None), order))


# --------------------------------------------------------------------------
# predictors and updates


class AveragingPredictor(nn.Module):
    """Mean of the two temporal neighbours; an edge frame copies its single neighbour."""

    def __call__(self, even: Tensor, n_odd: int) -> Tensor:
        ne = even.shape[1]
        frames = []
        for k in range(n_odd):
            a = even[:, k:k + 1]
            frames.append(a if k + 1 >= ne else (a + even[:, k + 1:k + 2]) * 0.5)
        return T.concat(frames)


class ZeroUpdate(nn.Module):
    def __call__(self, high: Tensor, n_even: int) -> Tensor:
        B, _, H, W = high.shape
        return Tensor(np.zeros((B, n_even, H, W), dtype=high.data.dtype))


def flow_interpolation(even: Tensor, n_odd: int) -> Tensor:
    """Block-flow interpolation of each odd frame from its even neighbours.

    Flows are estimated from the current values and held constant, so the
    result is linear in ``even`` and differentiable through the warps.
    """
    B, ne = even.shape[:2]
    frames = []
    for k in range(n_odd):
        a = even[:, k:k + 1]
        if k + 1 >= ne:
            frames.append(a)
            continue
        b = even[:, k + 1:k + 2]
        ops0, ops1 = [], []
        for i in range(B):
            A0, A1 = interpolation_matrices(*block_flow(a.data[i, 0], b.data[i, 0]))
            ops0.append(A0)
            ops1.append(A1)
        frames.append(T.spatial_linear(a, ops0) + T.spatial_linear(b, ops1))
    return T.concat(frames)


class FlowPredictor(nn.Module):
    """Flow-warp interpolation plus a learned correction (zero at start)."""

    def __init__(self, n_even: int, n_odd: int, rng: np.random.Generator, hidden: int = 16):
        self.n_even, self.n_odd = n_even, n_odd
        self.refine = nn.ConvStack(n_even + n_odd, n_odd, rng, hidden=hidden)

    def __call__(self, even: Tensor, n_odd: int) -> Tensor:
        base = flow_interpolation(even, n_odd)
        return base + self.refine(T.concat([even, base]))


class LearnedUpdate(nn.Module):
    def __init__(self, n_even: int, n_odd: int, rng: np.random.Generator, hidden: int = 16):
        self.net = nn.ConvStack(n_odd, n_even, rng, hidden=hidden)

    def __call__(self, high: Tensor, n_even: int) -> Tensor:
        return self.net(high)


# --------------------------------------------------------------------------
# lifting


def mimo_twt_forward(x: Tensor, P, U) -> FrequencyPair:
    even, odd = split(x)
    high = odd - P(even, odd.shape[1])
    low = even + U(high, even.shape[1])
    return FrequencyPair(low, high)


def mimo_twt_inverse(pair: FrequencyPair, P, U) -> Tensor:
    pair.validate()
    even = pair.low - U(pair.high, pair.low.shape[1])
    odd = pair.high + P(even, pair.high.shape[1])
    return interleave(even, odd)


# --------------------------------------------------------------------------
# motion-compensated Haar pair


def _flows(mvs, sign: float):
    return [sign * mv_to_flow(mv) for mv in mvs]


def motion_compensate(prev: Tensor, mvs) -> Tensor:
    """``prev(p - mv)`` per batch item, i.e. the codec's inter prediction."""
    return backward_warp(prev, _flows(mvs, -1.0))


def haar_mv_forward(prev: Tensor, cur: Tensor, mvs) -> tuple[Tensor, Tensor]:
    """``(y_l, y_h)`` with ``y_h = cur - MC(prev)`` and ``y_l = prev + MC^-1(cur)``.

    ``mvs`` holds one block field ``mv_{t-1 -> t}`` per batch item; the
    reverse field is its negation.
    """
    high = cur - motion_compensate(prev, mvs)
    low = prev + backward_warp(cur, _flows(mvs, 1.0))
    return low, high


def haar_mv_reconstruct(prev: Tensor, high: Tensor, mvs) -> Tensor:
    return high + motion_compensate(prev, mvs)
