"""Differentiable recurrent imitation of the toy codec.

The first frame goes through a QP-conditioned residual conv stack. Every
later frame is split against the previous *degraded* frame with the
motion-compensated Haar pair, pushed through Q-coupling blocks, degraded
(8-bit rounding of the low branch, learned collapse of the high branch),
pulled back through the inverse blocks and recombined with the motion
compensated previous frame. The surrogate runs free: the previous frame is
always its own output, never the codec's.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import codec, nn
from . import tensor as T
from .coupling import CouplingStack, QCouplingBlock
from .errors import InvalidMetadataError, TrainingFailureError
from .metrics import psnr
from .tensor import Tensor
from .video import VideoClip
from .wavelet import haar_mv_forward, haar_mv_reconstruct

TRAIN_QPS = (17, 22, 27, 32, 37)


class ResidualQPNet(nn.Module):
    """``x + f(x, s(qp))``; the last layer starts at zero so the map starts as the identity."""

    def __init__(self, rng: np.random.Generator, hidden: int = 16, conditioned: bool = True):
        self.body = nn.ConvStack(1, 1, rng, hidden=hidden)
        self.scale = nn.QPScale(hidden, rng) if conditioned else None

    def __call__(self, x: Tensor, qp) -> Tensor:
        s = self.scale(qp) if self.scale is not None else None
        return x + self.body(x, s)


class Surrogate(nn.Module):
    def __init__(self, rng: np.random.Generator, depth: int = 3, hidden: int = 16,
                 gamma: float = 1.0, conditioned: bool = True):
        self.conditioned = conditioned
        self.intra = ResidualQPNet(rng, hidden, conditioned)
        self.blocks = CouplingStack(QCouplingBlock(1, 1, rng, gamma, hidden, conditioned)
                                    for _ in range(depth))
        self.collapse = ResidualQPNet(rng, hidden, conditioned)

    def _qp(self, qp):
        return qp if self.conditioned else None

    def intra_frame(self, y0: Tensor, qp) -> Tensor:
        return self.intra(y0, qp)

    def feature_collapse(self, low: Tensor, high: Tensor, qp) -> tuple[Tensor, Tensor]:
        return T.round_ste(low, 255.0), self.collapse(high, qp)

    def step(self, prev: Tensor, cur: Tensor, mvs, qp, degrade: bool = True) -> Tensor:
        """One P-frame: ``prev, cur [B,1,H,W]`` and one block MV field per batch item."""
        if mvs is None or len(mvs) != cur.shape[0]:
            raise InvalidMetadataError("surrogate step needs one motion field per batch item")
        low, high = haar_mv_forward(prev, cur, mvs)
        q = self._qp(qp)
        low, high = self.blocks.forward(low, high, q)
        if degrade:
            low, high = self.feature_collapse(low, high, qp)
        low, high = self.blocks.inverse(low, high, q)
        # the reverse pass keeps only the high branch; the previous frame is known
        return haar_mv_reconstruct(prev, high, mvs)

    def __call__(self, y: Tensor, metas, qp, degrade: bool = True) -> Tensor:
        """Degrade a batch of clips ``y [B,N,H,W]`` given per-item codec metadata."""
        B, N = y.shape[:2]
        if len(metas) != B or any(m.frame_count != N for m in metas):
            raise InvalidMetadataError("metadata must cover every clip and frame")
        qp = np.broadcast_to(np.asarray(qp), (B,))
        if degrade:
            # the codec's first step is rounding its input to 8 bits
            y = T.round_ste(y, 255.0)
        prev = self.intra_frame(y[:, 0:1], qp) if degrade else y[:, 0:1]
        out = [prev]
        for t in range(1, N):
            prev = self.step(prev, y[:, t:t + 1], [m.mvs[t] for m in metas], qp, degrade)
            out.append(prev)
        return T.concat(out)


# --------------------------------------------------------------------------
# training


@dataclass
class SurrogateSample:
    clip: np.ndarray        # [N, H, W]
    qp: int
    target: np.ndarray      # codec reconstruction [N, H, W]
    meta: codec.CodecMetadata


def build_samples(clips, qps=TRAIN_QPS) -> list[SurrogateSample]:
    out = []
    for c in clips:
        clip = c if isinstance(c, VideoClip) else VideoClip(c)
        for qp in qps:
            coded = codec.encode(clip, qp)
            out.append(SurrogateSample(clip.data, qp, coded.reconstruction.data, coded.metadata))
    return out


def _batch(samples, idx):
    y = np.stack([samples[i].clip for i in idx])
    target = np.stack([samples[i].target for i in idx])
    return (Tensor(y), Tensor(target), [samples[i].meta for i in idx],
            np.array([samples[i].qp for i in idx]))


@dataclass
class FidelityReport:
    qps: tuple
    simulation_psnr: dict      # qp -> PSNR(G(y), H(y))
    copy_psnr: dict            # qp -> PSNR(y, H(y))
    losses: list

    def mean_simulation_psnr(self) -> float:
        return float(np.mean([self.simulation_psnr[q] for q in self.qps]))

    def rows(self):
        return [{"qp": q, "simulation_psnr": self.simulation_psnr[q], "copy_psnr": self.copy_psnr[q]}
                for q in self.qps]


def fidelity(model: Surrogate, samples, qps=None, batch: int = 8) -> tuple[dict, dict]:
    qps = tuple(sorted({s.qp for s in samples})) if qps is None else tuple(qps)
    sim, copy = {}, {}
    for qp in qps:
        group = [s for s in samples if s.qp == qp]
        preds = []
        for i in range(0, len(group), batch):
            y, _, metas, q = _batch(group, range(i, min(i + batch, len(group))))
            preds.append(model(y, metas, q).data)
        pred = np.concatenate(preds)
        target = np.stack([s.target for s in group])
        clean = np.stack([s.clip for s in group])
        sim[qp] = psnr(pred.reshape(-1, *pred.shape[2:]), target.reshape(-1, *target.shape[2:]))
        copy[qp] = psnr(clean.reshape(-1, *clean.shape[2:]), target.reshape(-1, *target.shape[2:]))
    return sim, copy


def surrogate_loss(model: Surrogate, y: Tensor, target: Tensor, metas, qp) -> Tensor:
    return T.l1(model(y, metas, qp), target)


def train_surrogate(model: Surrogate, samples, steps: int, rng: np.random.Generator,
                    batch: int = 4, lr: float = 1e-3, log_every: int = 0,
                    val_samples=None, halvings: int = 3) -> FidelityReport:
    """Minimize ``l1(G(y), H(y))`` over random (clip, qp) samples.

    The learning rate is halved ``halvings`` times at evenly spaced steps.
    """
    opt = nn.Adam(model.parameters(), lr=lr)
    params = opt.params
    losses = []
    period = max(1, steps // (halvings + 1))
    for step in range(steps):
        opt.lr = lr * 0.5 ** min(step // period, halvings)
        idx = rng.choice(len(samples), size=batch, replace=False)
        y, target, metas, qp = _batch(samples, idx)
        with T.Tape() as tape:
            loss = surrogate_loss(model, y, target, metas, qp)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingFailureError(f"surrogate loss became {value} at step {step}")
        grads = tape.gradient(loss, params)
        opt.step(grads)
        losses.append(value)
        if log_every and step % log_every == 0:
            print(f"surrogate step {step}: l1 {value:.5f}")
    sim, copy = fidelity(model, val_samples if val_samples is not None else samples)
    return FidelityReport(tuple(sorted(sim)), sim, copy, losses)
