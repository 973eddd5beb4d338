"""Compression-aware enhancement: encoder + ranker (learning to rank) and the gated enhancer.

The enhancer blends a learned candidate ``f_q`` with the low-quality input::

    I_HQ = w_q * f_q + (1 - w_q) * I_LQ,   w_q = sigmoid(UNet(f_d, f_c))

so a zero weight map is an exact identity. ``f_c`` are multi-level features
of a frozen compression encoder that was pre-trained to rank frames by QP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import codec, nn
from . import tensor as T
from .errors import (InvalidDatasetError, InvalidPairError, InvalidShapeError,
                     InvalidWindowError, TrainingFailureError)
from .flow import backward_warp, flow_toward
from .metrics import psnr
from .tensor import Tensor
from .video import VideoClip

RANK_MARGIN = 0.5
RANK_QPS = (17, 22, 27, 32, 37)


def rank_loss(s_i: Tensor, s_j: Tensor, q_i, q_j, margin: float = RANK_MARGIN) -> Tensor:
    """Mean pairwise hinge ``max(0, (s_i - s_j) * kappa + margin)``.

    ``kappa = +1`` when ``q_i < q_j``, so the loss pushes the score of the
    more heavily compressed frame up: scores grow with QP.
    """
    q_i = np.atleast_1d(np.asarray(q_i))
    q_j = np.atleast_1d(np.asarray(q_j))
    if np.any(q_i == q_j):
        raise InvalidPairError("a ranking pair needs two different QPs")
    kappa = np.where(q_i < q_j, 1.0, -1.0).astype(T.get_default_dtype())
    d = T.reshape(s_i - s_j, kappa.shape) * Tensor(kappa) + margin
    # hinge via relu(d) = (d + |d|) / 2
    return T.mean((d + T.absolute(d)) * 0.5)


class _ResBlock(nn.Module):
    """2x average pool, conv to ``cout``, then a residual conv pair."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.inp = nn.Conv2d(cin, cout, rng)
        self.c1 = nn.Conv2d(cout, cout, rng)
        self.c2 = nn.Conv2d(cout, cout, rng, gain=0.5)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.leaky_relu(self.inp(T.avg_pool2x(x)))
        return T.leaky_relu(h + self.c2(T.leaky_relu(self.c1(h))))


class CompressionEncoder(nn.Module):
    """Three residual blocks; level ``l`` has ``8 l`` channels at scale ``1/2^l``."""

    widths = (8, 16, 24)

    def __init__(self, rng: np.random.Generator):
        cin = 1
        self.blocks = []
        for w in self.widths:
            self.blocks.append(_ResBlock(cin, w, rng))
            cin = w

    def __call__(self, x: Tensor) -> list[Tensor]:
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise InvalidShapeError(f"compression encoder needs extents divisible by 8, got {x.shape}")
        feats = []
        for blk in self.blocks:
            x = blk(x)
            feats.append(x)
        return feats


class Ranker(nn.Module):
    """Global average pool of the second encoder level, then three fully connected layers."""

    def __init__(self, rng: np.random.Generator, hidden: int = 16):
        c = CompressionEncoder.widths[1]
        self.fc = [nn.Linear(c, hidden, rng), nn.Linear(hidden, hidden, rng), nn.Linear(hidden, 1, rng)]

    def __call__(self, feats: list[Tensor]) -> Tensor:
        h = T.global_avg_pool(feats[1])
        h = T.leaky_relu(self.fc[0](h))
        h = T.leaky_relu(self.fc[1](h))
        return self.fc[2](h)


class RankingModel(nn.Module):
    def __init__(self, rng: np.random.Generator):
        self.encoder = CompressionEncoder(rng)
        self.ranker = Ranker(rng)

    def score(self, frames: Tensor) -> Tensor:
        """``[B,1,H,W]`` -> ``[B,1]``."""
        return self.ranker(self.encoder(frames))


# --------------------------------------------------------------------------
# ranker data and training


@dataclass
class RankDataset:
    """Codec reconstructions ``frames[c, k]`` of content ``c`` at ``qps[k]``."""

    frames: np.ndarray   # [C, K, H, W]
    qps: tuple

    def validate(self) -> None:
        if len(set(self.qps)) < 2:
            raise InvalidDatasetError("ranking needs every content coded at two or more QPs")
        if self.frames.ndim != 4 or self.frames.shape[1] != len(self.qps):
            raise InvalidDatasetError(f"frames {self.frames.shape} do not match qps {self.qps}")


def build_rank_dataset(clips, qps=RANK_QPS) -> RankDataset:
    """Code every clip at every QP; each decoded frame becomes one content instance."""
    qps = tuple(qps)
    if len(set(qps)) < 2:
        raise InvalidDatasetError("ranking needs at least two distinct QPs")
    per_clip = []
    for c in clips:
        clip = c if isinstance(c, VideoClip) else VideoClip(c)
        coded = np.stack([codec.encode(clip, qp).reconstruction.data for qp in qps], axis=1)
        per_clip.append(coded)
    frames = np.concatenate(per_clip)  # [sum N, K, H, W]
    ds = RankDataset(frames, qps)
    ds.validate()
    return ds


def _sample_pairs(ds: RankDataset, count: int, rng: np.random.Generator):
    c = rng.integers(0, ds.frames.shape[0], size=count)
    k = np.stack([rng.choice(len(ds.qps), size=2, replace=False) for _ in range(count)])
    q = np.asarray(ds.qps)
    return c, k[:, 0], k[:, 1], q[k[:, 0]], q[k[:, 1]]


def pairwise_accuracy(model: RankingModel, ds: RankDataset, batch: int = 64) -> float:
    """Fraction of all same-content QP pairs whose scores are ordered like their QPs."""
    ds.validate()
    C, K = ds.frames.shape[:2]
    flat = ds.frames.reshape(C * K, 1, *ds.frames.shape[2:])
    scores = np.concatenate([model.score(Tensor(flat[i:i + batch])).data[:, 0]
                             for i in range(0, len(flat), batch)]).reshape(C, K)
    q = np.asarray(ds.qps)
    correct = total = 0
    for a in range(K):
        for b in range(a + 1, K):
            if q[a] == q[b]:
                continue
            sign = np.sign(q[b] - q[a])
            correct += int(np.sum(np.sign(scores[:, b] - scores[:, a]) == sign))
            total += C
    return correct / total


@dataclass
class RankReport:
    accuracy: float
    initial_accuracy: float
    losses: list


def train_ranker(model: RankingModel, train: RankDataset, steps: int, rng: np.random.Generator,
                 batch: int = 16, lr: float = 1e-3, val: RankDataset | None = None,
                 margin: float = RANK_MARGIN) -> RankReport:
    train.validate()
    val = train if val is None else val
    initial = pairwise_accuracy(model, val)
    opt = nn.Adam(model.parameters(), lr=lr)
    losses = []
    for step in range(steps):
        c, ka, kb, qa, qb = _sample_pairs(train, batch, rng)
        a = Tensor(train.frames[c, ka][:, None])
        b = Tensor(train.frames[c, kb][:, None])
        with T.Tape() as tape:
            # both branches share the same parameters (Siamese)
            loss = rank_loss(model.score(a), model.score(b), qa, qb, margin)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingFailureError(f"rank loss became {value} at step {step}")
        opt.step(tape.gradient(loss, opt.params))
        losses.append(value)
    return RankReport(pairwise_accuracy(model, val), initial, losses)


# --------------------------------------------------------------------------
# enhancer


class _WeightUNet(nn.Module):
    """Fuses ``f_d`` with the three compression feature levels; zero head gives ``w_q = 1/2``."""

    def __init__(self, rng: np.random.Generator, cd: int, width: int = 16):
        cw = CompressionEncoder.widths
        self.e0 = nn.Conv2d(cd, width, rng)
        self.down = [nn.Conv2d(width + c, width, rng) for c in cw]
        self.up = [nn.Conv2d(2 * width, width, rng) for _ in cw]
        self.head = nn.Conv2d(width, 1, rng, zero=True)

    def __call__(self, f_d: Tensor, f_c: list[Tensor]) -> Tensor:
        act = T.leaky_relu
        h = act(self.e0(f_d))
        skips = []
        for conv, c in zip(self.down, f_c):
            skips.append(h)
            h = act(conv(T.concat([T.avg_pool2x(h), c])))
        for conv, s in zip(self.up, reversed(skips)):
            h = act(conv(T.concat([T.upsample2x(h), s])))
        return self.head(h)


class Enhancer(nn.Module):
    """Aligned-window enhancer with a compression-aware weight map."""

    def __init__(self, rng: np.random.Generator, encoder: CompressionEncoder, radius: int = 1,
                 hidden: int = 16):
        self.radius = radius
        n = 2 * radius + 1
        self.fuse1 = nn.Conv2d(n, hidden, rng)
        self.fuse2 = nn.Conv2d(hidden, hidden, rng)
        self.candidate = nn.Conv2d(hidden, 1, rng, zero=True)
        self.weights = _WeightUNet(rng, hidden)
        # frozen and shared; kept out of this module's parameters
        self._encoder = encoder

    @property
    def encoder(self) -> CompressionEncoder:
        return self._encoder

    def align(self, window: Tensor) -> Tensor:
        """Backward-warp every neighbour of ``window [B,2R+1,H,W]`` onto the centre frame."""
        B, n, H, W = window.shape
        if n % 2 == 0:
            raise InvalidWindowError(f"window length must be odd, got {n}")
        c = n // 2
        out = []
        for k in range(n):
            frame = window[:, k:k + 1]
            if k == c:
                out.append(frame)
                continue
            flows = []
            for b in range(B):
                ctr, nb = window.data[b, c], window.data[b, k]
                # an edge-replicated neighbour equals the centre; its flow is zero
                flows.append(np.zeros((2, H, W)) if np.array_equal(ctr, nb) else flow_toward(ctr, nb))
            out.append(backward_warp(frame, flows))
        return T.concat(out)

    def enhance(self, window: Tensor, f_c: list[Tensor] | None = None, weight=None) -> Tensor:
        """``window [B,2R+1,H,W]`` -> ``I_HQ [B,1,H,W]``.

        ``weight`` overrides the learned weight map (a scalar or array in [0, 1]).
        """
        if window.ndim != 4 or window.shape[1] % 2 == 0:
            raise InvalidWindowError(f"window must be [B, 2R+1, H, W] with odd length, got {window.shape}")
        if window.shape[1] != 2 * self.radius + 1:
            raise InvalidWindowError(f"window length {window.shape[1]} does not match radius {self.radius}")
        c = window.shape[1] // 2
        lq = window[:, c:c + 1]
        aligned = self.align(window)
        f_d = T.leaky_relu(self.fuse2(T.leaky_relu(self.fuse1(aligned))))
        f_q = lq + self.candidate(f_d)
        if weight is None:
            if f_c is None:
                f_c = self._encoder(lq)
            w_q = T.sigmoid(self.weights(f_d, f_c))
        else:
            w_q = Tensor(np.broadcast_to(np.asarray(weight, dtype=lq.data.dtype), lq.shape).copy())
        return w_q * f_q + (1.0 - w_q) * lq

    def __call__(self, clip: Tensor) -> Tensor:
        """Enhance every frame of ``clip [B,N,H,W]`` using edge-replicated windows."""
        B, N, H, W = clip.shape
        r = self.radius
        idx = np.clip(np.arange(N)[:, None] + np.arange(-r, r + 1)[None, :], 0, N - 1)
        # [B, N, 2R+1, H, W] -> [B*N, 2R+1, H, W]
        windows = T.reshape(T.take(clip, (slice(None), idx)), (B * N, 2 * r + 1, H, W))
        out = self.enhance(windows)
        return T.reshape(out, (B, N, H, W))


def same_architecture(a: Enhancer, b: Enhancer) -> bool:
    pa, pb = a.parameters(), b.parameters()
    return len(pa) == len(pb) and all(x.shape == y.shape for x, y in zip(pa, pb)) \
        and not any(x is y for x, y in zip(pa, pb))


# --------------------------------------------------------------------------
# enhancer pre-training


@dataclass
class EnhancerReport:
    qps: tuple
    enhanced_psnr: dict   # qp -> PSNR(I_HQ, clean)
    input_psnr: dict      # qp -> PSNR(I_LQ, clean)
    losses: list


def build_enhancer_pairs(clips, qps) -> list[tuple[np.ndarray, np.ndarray, int]]:
    """(coded clip, clean clip, qp) triples."""
    out = []
    for c in clips:
        clip = c if isinstance(c, VideoClip) else VideoClip(c)
        for qp in qps:
            out.append((codec.encode(clip, qp).reconstruction.data, clip.data, qp))
    return out


def evaluate_enhancer(model: Enhancer, pairs) -> EnhancerReport:
    qps = tuple(sorted({p[2] for p in pairs}))
    enh, inp = {}, {}
    for qp in qps:
        group = [p for p in pairs if p[2] == qp]
        coded = np.stack([g[0] for g in group])
        clean = np.stack([g[1] for g in group])
        out = model(Tensor(coded)).data
        n = coded.shape[2:]
        enh[qp] = psnr(out.reshape(-1, *n), clean.reshape(-1, *n))
        inp[qp] = psnr(coded.reshape(-1, *n), clean.reshape(-1, *n))
    return EnhancerReport(qps, enh, inp, [])


def train_enhancer(model: Enhancer, pairs, steps: int, rng: np.random.Generator, batch: int = 4,
                   lr: float = 1e-3, val_pairs=None) -> EnhancerReport:
    """Minimize ``l1(enhance(coded), clean)``; the compression encoder stays frozen."""
    opt = nn.Adam(model.parameters(), lr=lr)
    losses = []
    for step in range(steps):
        idx = rng.choice(len(pairs), size=min(batch, len(pairs)), replace=False)
        coded = Tensor(np.stack([pairs[i][0] for i in idx]))
        clean = Tensor(np.stack([pairs[i][1] for i in idx]))
        with T.Tape() as tape:
            loss = T.l1(model(coded), clean)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingFailureError(f"enhancer loss became {value} at step {step}")
        opt.step(tape.gradient(loss, opt.params))
        losses.append(value)
    report = evaluate_enhancer(model, val_pairs if val_pairs is not None else pairs)
    report.losses = losses
    return report
