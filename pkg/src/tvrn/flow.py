"""Block-matching flow, forward/backward warping, and high-frequency synthesis.

Flows are ``[2, H, W]`` arrays holding ``(dx, dy)`` in pixels. ``F01`` lives
on frame 0's grid and says where each pixel of frame 0 moves in frame 1.

Warps are linear in the image, so each is built once as a sparse
``(H*W x H*W)`` matrix and applied through :func:`tvrn.tensor.spatial_linear`,
which back-propagates with the transpose. Flows are always constants.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy import sparse

from . import nn
from . import tensor as T
from .codec import BLOCK, SEARCH, motion_search
from .errors import InvalidGeometryError, InvalidShapeError, InvalidTimeError
from .tensor import Tensor

HOLE_EPS = 1e-6
LEVELS = 4


@lru_cache(maxsize=None)
def _interp_matrix(n: int, count: int, block: int) -> np.ndarray:
    """Linear interpolation from ``count`` block centres to ``n`` pixels (edge clamped)."""
    pos = np.clip((np.arange(n) - (block - 1) / 2) / block, 0, count - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), count - 1)
    hi = np.minimum(lo + 1, count - 1)
    frac = pos - lo
    m = np.zeros((n, count))
    m[np.arange(n), lo] += 1 - frac
    m[np.arange(n), hi] += frac
    return m


def _upsample_block_field(field: np.ndarray, block: int, H: int, W: int) -> np.ndarray:
    """Bilinear interpolation of a block-centre field ``[hb, wb]`` to pixels."""
    hb, wb = field.shape
    return _interp_matrix(H, hb, block) @ field @ _interp_matrix(W, wb, block).T


def flow_toward(I0, I1, block: int = BLOCK, search: int = SEARCH) -> np.ndarray:
    """Per-pixel flow ``F01`` on frame 0's grid from block SAD search."""
    I0 = np.asarray(I0, dtype=np.float64)
    I1 = np.asarray(I1, dtype=np.float64)
    if I0.shape != I1.shape or I0.ndim != 2:
        raise InvalidShapeError(f"block_flow: frames {I0.shape} vs {I1.shape}")
    H, W = I0.shape
    # match on the 8-bit grid: integer SADs are exact, so float noise far below
    # one level (e.g. lifting roundoff) cannot flip a near-tied vector
    I0, I1 = np.round(I0 * 255.0), np.round(I1 * 255.0)
    # searching I1 inside I0 gives I0(p) ~ I1(p - mv): pixel p of frame 0 moves by -mv
    mv = motion_search(I1, I0, block, search)
    return np.stack([_upsample_block_field(-mv[..., k].astype(np.float64), block, H, W)
                     for k in range(2)])


def block_flow(I0, I1, block: int = BLOCK, search: int = SEARCH) -> tuple[np.ndarray, np.ndarray]:
    """Bidirectional per-pixel flow ``(F01, F10)`` from block SAD search."""
    return flow_toward(I0, I1, block, search), flow_toward(I1, I0, block, search)


def scale_flow(F01: np.ndarray, F10: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < t < 1.0:
        raise InvalidTimeError(f"t must lie in (0, 1), got {t}")
    return t * F01, (1.0 - t) * F10


def downscale_flow(flow: np.ndarray, levels: int = LEVELS) -> list[np.ndarray]:
    """Flow pyramid: 2x average pooling with the magnitude halved per level."""
    out = [flow]
    for _ in range(1, levels):
        f = out[-1]
        _, H, W = f.shape
        if H % 2 or W % 2:
            raise InvalidGeometryError(f"flow {W}x{H} cannot be halved")
        out.append(f.reshape(2, H // 2, 2, W // 2, 2).mean(axis=(2, 4)) * 0.5)
    return out


# --------------------------------------------------------------------------
# warp operators


def _bilinear_taps(x: np.ndarray, y: np.ndarray):
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    return ((y0, x0, (1 - fy) * (1 - fx)), (y0, x0 + 1, (1 - fy) * fx),
            (y0 + 1, x0, fy * (1 - fx)), (y0 + 1, x0 + 1, fy * fx))


def backward_warp_matrix(flow: np.ndarray) -> sparse.csr_matrix:
    """Bilinear sampling at ``p + flow(p)`` with border clamping."""
    _, H, W = flow.shape
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    sx = np.clip(xs + flow[0], 0, W - 1)
    sy = np.clip(ys + flow[1], 0, H - 1)
    rows = np.arange(H * W)
    r, c, v = [], [], []
    for ty, tx, wt in _bilinear_taps(sx, sy):
        r.append(rows)
        c.append((np.clip(ty, 0, H - 1) * W + np.clip(tx, 0, W - 1)).ravel())
        v.append(wt.ravel())
    return sparse.csr_matrix((np.concatenate(v), (np.concatenate(r), np.concatenate(c))),
                             shape=(H * W, H * W))


def splat_matrix(flow: np.ndarray) -> tuple[sparse.csr_matrix, np.ndarray]:
    """Un-normalized bilinear splatting of each pixel to ``p + flow(p)``; returns (S, weights)."""
    _, H, W = flow.shape
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    tx = xs + flow[0]
    ty = ys + flow[1]
    cols = np.arange(H * W)
    r, c, v = [], [], []
    for qy, qx, wt in _bilinear_taps(tx, ty):
        ok = ((qy >= 0) & (qy < H) & (qx >= 0) & (qx < W)).ravel()
        r.append((qy * W + qx).ravel()[ok])
        c.append(cols[ok])
        v.append(wt.ravel()[ok])
    S = sparse.csr_matrix((np.concatenate(v), (np.concatenate(r), np.concatenate(c))),
                          shape=(H * W, H * W))
    weights = np.asarray(S.sum(axis=1)).ravel()
    return S, weights


def forward_warp_matrix(flow: np.ndarray) -> tuple[sparse.csr_matrix, np.ndarray]:
    """Normalized splatting operator and the hole mask (1 where nothing landed)."""
    S, weights = splat_matrix(flow)
    filled = weights > HOLE_EPS
    inv = np.where(filled, 1.0 / np.where(filled, weights, 1.0), 0.0)
    _, H, W = flow.shape
    return sparse.diags(inv) @ S, (~filled).reshape(H, W).astype(np.float64)


def backward_warp_np(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return (backward_warp_matrix(flow) @ img.ravel()).reshape(img.shape)


def forward_warp_np(img: np.ndarray, flow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    img = np.asarray(img, dtype=np.float64)
    op, holes = forward_warp_matrix(flow)
    return (op @ img.ravel()).reshape(img.shape), holes


def backward_warp(x: Tensor, flows) -> Tensor:
    """Differentiable backward warp of ``x [B,C,H,W]`` with one flow per batch item."""
    return T.spatial_linear(x, [backward_warp_matrix(f) for f in flows])


def forward_warp(x: Tensor, flows) -> tuple[Tensor, np.ndarray]:
    """Differentiable normalized forward warp; returns (warped, holes ``[B,1,H,W]``)."""
    ops, holes = zip(*(forward_warp_matrix(f) for f in flows))
    return T.spatial_linear(x, ops), np.stack(holes)[:, None]


def interpolation_matrices(F01: np.ndarray, F10: np.ndarray, t: float = 0.5):
    """Sparse ``(A0, A1)`` with ``A0 @ I0 + A1 @ I1`` the frame at time ``t``.

    Both frames are splatted toward ``t`` and blended by temporal distance;
    pixels no splat reaches fall back to the plain temporal blend.
    """
    F0t, F1t = scale_flow(F01, F10, t)
    S0, w0 = splat_matrix(F0t)
    S1, w1 = splat_matrix(F1t)
    total = (1 - t) * w0 + t * w1
    filled = total > HOLE_EPS
    inv = np.where(filled, 1.0 / np.where(filled, total, 1.0), 0.0)
    hole = sparse.diags((~filled).astype(np.float64))
    A0 = sparse.diags(inv * (1 - t)) @ S0 + (1 - t) * hole
    A1 = sparse.diags(inv * t) @ S1 + t * hole
    return A0.tocsr(), A1.tocsr()


def flow_interpolate_np(I0, I1, t: float = 0.5) -> np.ndarray:
    I0 = np.asarray(I0, dtype=np.float64)
    I1 = np.asarray(I1, dtype=np.float64)
    A0, A1 = interpolation_matrices(*block_flow(I0, I1), t)
    return (A0 @ I0.ravel() + A1 @ I1.ravel()).reshape(I0.shape)


# --------------------------------------------------------------------------
# high-frequency reconstruction


def hf_initial(I0, I1, t: float = 0.5):
    """``W->(I0, t F01) - W->(I1, (1-t) F10)`` on 2-D frames; returns (z_init, holes0, holes1)."""
    F0t, F1t = scale_flow(*block_flow(I0, I1), t)
    a, h0 = forward_warp_np(I0, F0t)
    b, h1 = forward_warp_np(I1, F1t)
    return a - b, h0, h1


def combine(z_init: Tensor, mask: Tensor, residue: Tensor) -> Tensor:
    """``z_init * M' + R' * (1 - M')`` with ``M' = sigmoid(M)``, ``R' = 2 sigmoid(R) - 1``."""
    m = T.sigmoid(mask)
    r = T.sigmoid(residue) * 2.0 - 1.0
    return z_init * m + r * (1.0 - m)


class ContextExtractor(nn.Module):
    """Four conv layers giving features at scales 1, 1/2, 1/4, 1/8."""

    widths = (8, 16, 32, 64)

    def __init__(self, rng: np.random.Generator):
        cin = 1
        self.convs = []
        for j, w in enumerate(self.widths):
            self.convs.append(nn.Conv2d(cin, w, rng))
            cin = w

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = []
        for j, conv in enumerate(self.convs):
            # downsampling is a 2x2 average pool ahead of a stride-1 conv
            x = T.leaky_relu(conv(x if j == 0 else T.avg_pool2x(x)))
            feats.append(x)
        return feats


class HFUNet(nn.Module):
    """Four pooled downs and four nearest-upsample ups with skips.

    Encoder level ``j`` also sees the warped contexts of both frames. The
    last layer is zero so a fresh model yields ``M' = 1/2`` and ``R' = 0``.
    """

    widths = (16, 24, 32, 48)
    bottleneck = 64

    def __init__(self, rng: np.random.Generator, in_ch: int = 3):
        ctx = ContextExtractor.widths
        w = self.widths
        self.enc = [nn.Conv2d(in_ch + 2 * ctx[0], w[0], rng)]
        self.down = []
        for j in range(1, LEVELS):
            self.down.append(nn.Conv2d(w[j - 1], w[j], rng))
            self.enc.append(nn.Conv2d(w[j] + 2 * ctx[j], w[j], rng))
        self.down.append(nn.Conv2d(w[-1], self.bottleneck, rng))
        self.up = []
        self.dec = []
        prev = self.bottleneck
        for j in reversed(range(LEVELS)):
            self.up.append(nn.Conv2d(prev, w[j], rng))
            self.dec.append(nn.Conv2d(2 * w[j], w[j], rng))
            prev = w[j]
        self.head = nn.Conv2d(w[0], 2, rng, zero=True)

    def __call__(self, inp: Tensor, ctx0: list[Tensor], ctx1: list[Tensor]) -> tuple[Tensor, Tensor]:
        act = T.leaky_relu
        h = act(self.enc[0](T.concat([inp, ctx0[0], ctx1[0]])))
        skips = [h]
        for j in range(1, LEVELS):
            h = act(self.down[j - 1](T.avg_pool2x(h)))
            h = act(self.enc[j](T.concat([h, ctx0[j], ctx1[j]])))
            skips.append(h)
        h = act(self.down[-1](T.avg_pool2x(h)))
        for k, j in enumerate(reversed(range(LEVELS))):
            h = act(self.up[k](T.upsample2x(h)))
            h = act(self.dec[k](T.concat([h, skips[j]])))
        out = self.head(h)
        return out[:, 0:1], out[:, 1:2]


class HFModule(nn.Module):
    """Synthesizes the high-frequency frame between two low-frequency frames."""

    def __init__(self, rng: np.random.Generator, t: float = 0.5):
        self.t = t
        self.context = ContextExtractor(rng)
        self.unet = HFUNet(rng)

    def __call__(self, I0: Tensor, I1: Tensor, return_init: bool = False):
        """``I0, I1 [B,1,H,W]`` -> ``z_t [B,1,H,W]``."""
        B, _, H, W = I0.shape
        if H % 16 or W % 16:
            raise InvalidGeometryError(f"HF synthesis needs extents divisible by 16, got {W}x{H}")
        flows0, flows1 = [], []
        for b in range(B):
            F0t, F1t = scale_flow(*block_flow(I0.data[b, 0], I1.data[b, 0]), self.t)
            flows0.append(downscale_flow(F0t))
            flows1.append(downscale_flow(F1t))
        w0, holes0 = forward_warp(I0, [f[0] for f in flows0])
        w1, holes1 = forward_warp(I1, [f[0] for f in flows1])
        z_init = w0 - w1
        feats = self.context(T.concat([I0, I1], axis=0))
        ctx0, ctx1 = [], []
        for j, f in enumerate(feats):
            ctx0.append(forward_warp(f[0:B], [fl[j] for fl in flows0])[0])
            ctx1.append(forward_warp(f[B:2 * B], [fl[j] for fl in flows1])[0])
        z = hf_synthesize(self.unet, z_init, (holes0, holes1), ctx0, ctx1)
        return (z, z_init) if return_init else z


def hf_synthesize(unet: HFUNet, z_init: Tensor, holes, ctx0: list[Tensor], ctx1: list[Tensor]) -> Tensor:
    """Refine ``z_init`` with the context U-Net; ``holes`` are the two ``[B,1,H,W]`` hole masks."""
    if len(ctx0) != LEVELS or len(ctx1) != LEVELS:
        raise InvalidShapeError(f"context pyramid needs {LEVELS} levels")
    _, _, H, W = z_init.shape
    for j, (c0, c1) in enumerate(zip(ctx0, ctx1)):
        if c0.shape[2:] != (H >> j, W >> j) or c1.shape != c0.shape:
            raise InvalidShapeError(f"context level {j} has shape {c0.shape} / {c1.shape}")
    dt = z_init.data.dtype
    inp = T.concat([z_init, Tensor(holes[0].astype(dt)), Tensor(holes[1].astype(dt))])
    mask, residue = unet(inp, ctx0, ctx1)
    return combine(z_init, mask, residue)
