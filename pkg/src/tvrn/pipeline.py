"""TVRN assembly: invertible downscaling, codec in the loop, compression-aware upscaling.

``downscale`` runs the lifting transform and the coupling stack; ``upscale``
runs enhancer #1, high-frequency synthesis, the inverse coupling stack, the
inverse lifting transform and enhancer #2. Both directions use the same
``P``, ``U`` and coupling objects, so the parameters are tied by construction.

Training alternates between the rescaling parameters (with the codec output
re-assigned onto the surrogate's output so gradients flow through the
surrogate) and the surrogate itself.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import codec, nn
from . import tensor as T
from .coupling import coupling_stack
from .enhancement import CompressionEncoder, Enhancer
from .errors import (InvalidConfigError, InvalidGeometryError, InvalidLengthError, NotComputableError,
                     TrainingFailureError)
from .flow import HFModule, flow_interpolate_np
from .metrics import RdPoint, bd_rate, psnr, ssim
from .surrogate import Surrogate
from .tensor import Tensor
from .video import VideoClip
from .wavelet import FlowPredictor, FrequencyPair, LearnedUpdate, group_sizes, mimo_twt_forward, \
    mimo_twt_inverse, split

GROUP = 7
TRAIN_QP_RANGE = (17, 27)
RD_QPS = (22, 27, 32, 37)


class TvrnModel(nn.Module):
    def __init__(self, rng: np.random.Generator, frames: int = GROUP, hidden: int = 16, depth: int = 3,
                 gamma: float = 1.0, encoder: CompressionEncoder | None = None):
        self.frames = frames
        self.n_even, self.n_odd = group_sizes(frames)
        self.P = FlowPredictor(self.n_even, self.n_odd, rng, hidden)
        self.U = LearnedUpdate(self.n_even, self.n_odd, rng, hidden)
        self.couplings = coupling_stack(self.n_even, self.n_odd, rng, depth, gamma, hidden)
        self.hf = HFModule(rng)
        self.encoder = encoder if encoder is not None else CompressionEncoder(rng)
        self.enh1 = Enhancer(rng, self.encoder)
        self.enh2 = Enhancer(rng, self.encoder)
        self.surrogate = Surrogate(rng, hidden=hidden, gamma=gamma)

    # parameter groups -----------------------------------------------------

    def rescaling_parameters(self) -> list[nn.Parameter]:
        """Theta_sharp (P, U, couplings)."""
        return _params(self.P, self.U, self.couplings)

    def trainable_parameters(self) -> list[nn.Parameter]:
        """Everything updated in the first alternate phase: rescaling, HF synthesis, enhancers."""
        return _params(self.P, self.U, self.couplings, self.hf, self.enh1, self.enh2)

    def surrogate_parameters(self) -> list[nn.Parameter]:
        return self.surrogate.parameters()

    # rescaling ---------------------------------------------------------------

    def _check(self, x: Tensor, n: int) -> None:
        if x.ndim != 4 or x.shape[1] != n:
            raise InvalidLengthError(f"expected [B, {n}, H, W], got {x.shape}")
        if x.shape[2] % 16 or x.shape[3] % 16:
            raise InvalidGeometryError(f"extents must be divisible by 16, got {x.shape[2]}x{x.shape[3]}")

    def downscale(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """``x [B,N,H,W]`` -> ``(y [B,ceil(N/2),H,W], z [B,floor(N/2),H,W])``."""
        self._check(x, self.frames)
        pair = mimo_twt_forward(x, self.P, self.U)
        y, z = self.couplings.forward(pair.low, pair.high)
        return y, z

    def synthesize_high(self, y: Tensor) -> Tensor:
        """Estimate the high branch at every odd position from adjacent low frames."""
        B, n, H, W = y.shape
        k = self.n_odd
        I0 = T.reshape(T.take(y, (slice(None), np.arange(k))), (B * k, 1, H, W))
        I1 = T.reshape(T.take(y, (slice(None), np.minimum(np.arange(k) + 1, n - 1))), (B * k, 1, H, W))
        return T.reshape(self.hf(I0, I1), (B, k, H, W))

    def upscale(self, y: Tensor, z: Tensor | None = None, enhance: bool = True) -> Tensor:
        """``y [B,ceil(N/2),H,W]`` -> ``x_hat [B,N,H,W]``; ``z`` replaces the synthesized high branch."""
        self._check(y, self.n_even)
        if enhance:
            y = self.enh1(y)
        if z is None:
            z = self.synthesize_high(y)
        low, high = self.couplings.inverse(y, z)
        x = mimo_twt_inverse(FrequencyPair(low, high), self.P, self.U)
        return self.enh2(x) if enhance else x


def _params(*modules) -> list[nn.Parameter]:
    out, seen = [], set()
    for m in modules:
        for p in m.parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
    return out


def even_frames(x: Tensor) -> Tensor:
    return split(x)[0]


def basic_loss(x: Tensor, x_hat: Tensor, y: Tensor, x_e: Tensor, lam: float = 10.0,
               guidance: str = "l1") -> Tensor:
    """``l1(x, x_hat) + lam * guidance(y, x_e)``; ``guidance`` is ``l1`` (default) or ``l2``."""
    if guidance not in ("l1", "l2"):
        raise InvalidConfigError(f"guidance must be 'l1' or 'l2', got {guidance!r}")
    g = T.l1(y, x_e) if guidance == "l1" else T.l2(y, x_e)
    return T.l1(x, x_hat) + g * lam


def code_batch(y: np.ndarray, qps) -> tuple[np.ndarray, list[codec.CodecMetadata]]:
    """Run the codec on every clip of ``y [B,N,H,W]``."""
    recon, metas = [], []
    for b in range(y.shape[0]):
        coded = codec.encode(VideoClip(y[b]), int(qps[b]))
        recon.append(coded.reconstruction.data)
        metas.append(coded.metadata)
    return np.stack(recon), metas


# --------------------------------------------------------------------------
# alternate training


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 4
    lam: float = 10.0
    lr: float = 1e-4
    surrogate_lr: float = 1e-4
    halvings: int = 4              # 50k steps halved every 10k, scaled to the budget
    qp_range: tuple = TRAIN_QP_RANGE
    guidance: str = "l1"
    noise_alpha: float = 0.0
    seed: int = 0
    val_every: int = 0
    val_qp: int = 22
    audit: bool = False

    def validate(self) -> None:
        if self.lam <= 0 or self.lr <= 0 or self.surrogate_lr <= 0:
            raise InvalidConfigError("lambda and learning rates must be positive")
        if not 0.0 <= self.noise_alpha <= 1.0:
            raise InvalidConfigError(f"noise alpha must lie in [0, 1], got {self.noise_alpha}")
        if self.steps < 0 or self.batch < 1:
            raise InvalidConfigError("steps must be >= 0 and batch >= 1")


class GradientNoise:
    """``g -> (1 - alpha) g + alpha * rms(g) * xi`` with standard normal ``xi``.

    ``ratios`` records ``rms(rms(g) * xi) / rms(g)`` per call for auditing.
    """

    def __init__(self, alpha: float, rng: np.random.Generator):
        self.alpha = alpha
        self.rng = rng
        self.ratios: list[float] = []

    def __call__(self, g: np.ndarray) -> np.ndarray:
        sigma = float(np.sqrt(np.mean(np.square(g, dtype=np.float64))))
        noise = sigma * self.rng.standard_normal(g.shape)
        if sigma > 0:
            self.ratios.append(float(np.sqrt(np.mean(noise ** 2))) / sigma)
        return ((1.0 - self.alpha) * g + self.alpha * noise).astype(g.dtype)


@dataclass
class TrainResult:
    model: TvrnModel
    curves: list = field(default_factory=list)   # dicts with CURVE_COLUMNS
    noise_ratios: list = field(default_factory=list)
    audits: list = field(default_factory=list)


CURVE_COLUMNS = ("step", "L_basic", "L_surrogate", "val_psnr")


def _stack(clips) -> np.ndarray:
    return np.stack([c.data if isinstance(c, VideoClip) else np.asarray(c) for c in clips])


def train_step_graph(model: TvrnModel, x: Tensor, qps, cfg: TrainConfig, noise=None):
    """Record one alternate step; returns ``(tape, L_basic, L_surrogate, coded)``.

    The codec output replaces the surrogate output's values; the surrogate
    keeps the gradient path back to ``y``.
    """
    tape = T.Tape()
    with tape:
        y, _ = model.downscale(x)
        if not np.all(np.isfinite(y.data)):
            raise TrainingFailureError("non-finite downscaled frames reached the codec")
        coded, metas = code_batch(y.data, qps)
        y_in = T.grad_transform(y, noise) if noise is not None else y
        y_hat = model.surrogate(y_in, metas, qps)
        x_hat = model.upscale(T.reassign(y_hat, coded))
        l_basic = basic_loss(x, x_hat, y, even_frames(x), cfg.lam, cfg.guidance)
        l_sur = T.l1(y_hat, Tensor(coded))
    return tape, l_basic, l_sur, coded


def alternate_train(model: TvrnModel, clips, cfg: TrainConfig, val_clips=None, log=None) -> TrainResult:
    """Alternate optimisation over random batches of 7-frame clips.

    Both phases reuse one recorded forward pass: the rescaling gradient comes
    from ``L_basic`` and the surrogate gradient from ``L_surrogate`` on the
    same ``y``; each phase updates only its own parameter set.
    """
    cfg.validate()
    data = _stack(clips)
    rng = np.random.default_rng(cfg.seed)
    opt_main = nn.Adam(model.trainable_parameters(), lr=cfg.lr)
    opt_sur = nn.Adam(model.surrogate_parameters(), lr=cfg.surrogate_lr)
    noise = GradientNoise(cfg.noise_alpha, np.random.default_rng(cfg.seed + 1)) if cfg.noise_alpha > 0 else None
    period = max(1, cfg.steps // (cfg.halvings + 1))
    result = TrainResult(model)
    lo, hi = cfg.qp_range
    for step in range(cfg.steps):
        scale = 0.5 ** min(step // period, cfg.halvings)
        opt_main.lr, opt_sur.lr = cfg.lr * scale, cfg.surrogate_lr * scale
        idx = rng.choice(len(data), size=min(cfg.batch, len(data)), replace=False)
        qps = rng.integers(lo, hi + 1, size=len(idx))
        try:
            tape, l_basic, l_sur, _ = train_step_graph(model, Tensor(data[idx]), qps, cfg, noise)
        except TrainingFailureError as exc:
            raise TrainingFailureError(f"{exc} at step {step}: qps={qps.tolist()}, clips={idx.tolist()}") from None
        lb, ls = l_basic.item(), l_sur.item()
        g_main, g_sur = tape.gradients([(l_basic, opt_main.params), (l_sur, opt_sur.params)])
        if not (np.isfinite(lb) and np.isfinite(ls) and nn.all_finite(g_main) and nn.all_finite(g_sur)):
            raise TrainingFailureError(
                f"non-finite training state at step {step}: L_basic={lb}, L_surrogate={ls}, "
                f"qps={qps.tolist()}, clips={idx.tolist()}")
        if cfg.audit:
            frozen = (model.surrogate.digest(), model.encoder.digest())
        opt_main.step(g_main)
        if cfg.audit:
            ok1 = frozen == (model.surrogate.digest(), model.encoder.digest())
            frozen = (_digest(opt_main.params), model.encoder.digest())
        opt_sur.step(g_sur)
        if cfg.audit:
            result.audits.append(ok1 and frozen == (_digest(opt_main.params), model.encoder.digest()))
        row = {"step": step, "L_basic": lb, "L_surrogate": ls, "val_psnr": None}
        if val_clips is not None and cfg.val_every and (step % cfg.val_every == 0 or step == cfg.steps - 1):
            row["val_psnr"] = validation_psnr(model, val_clips, cfg.val_qp)
        result.curves.append(row)
        if log is not None:
            log(row)
    if noise is not None:
        result.noise_ratios = noise.ratios
    return result


def upscaler_parameters(model: TvrnModel) -> list[nn.Parameter]:
    """Theta_z and Theta_r: HF synthesis and both enhancers."""
    return _params(model.hf, model.enh1, model.enh2)


def warm_start(model: TvrnModel, clips, steps: int, rng: np.random.Generator, batch: int = 2,
               lr: float = 1e-3, qp_range: tuple = (17, 37)) -> list[float]:
    """Pre-train the upscaler on ``l1(x, upscale(codec(y)))`` with the rescaling frozen.

    The codec output is a constant here, so no surrogate is involved; this
    is the desk-scale stand-in for starting from pre-trained HF and enhancer
    weights. Returns the per-step losses.
    """
    data = _stack(clips)
    params = upscaler_parameters(model)
    opt = nn.Adam(params, lr=lr)
    lo, hi = qp_range
    losses = []
    for step in range(steps):
        idx = rng.choice(len(data), size=min(batch, len(data)), replace=False)
        qps = rng.integers(lo, hi + 1, size=len(idx))
        x = Tensor(data[idx])
        y, _ = model.downscale(x)
        coded, _ = code_batch(y.data, qps)
        with T.Tape() as tape:
            loss = T.l1(x, model.upscale(Tensor(coded)))
        grads = tape.gradient(loss, params)
        if not (np.isfinite(loss.item()) and nn.all_finite(grads)):
            raise TrainingFailureError(f"non-finite warm-start state at step {step}, qps={qps.tolist()}")
        opt.step(grads)
        losses.append(loss.item())
    return losses


def _digest(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def write_curves(path, curves) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for r in curves:
            w.writerow(["" if r[c] is None else (f"{r[c]:.6g}" if isinstance(r[c], float) else r[c])
                        for c in CURVE_COLUMNS])


# --------------------------------------------------------------------------
# inference and evaluation


def rescale(model: TvrnModel, clip: VideoClip, qp: int) -> tuple[VideoClip, codec.CodecMetadata]:
    """Downscale, code and upscale one clip with the real codec."""
    x = Tensor(clip.data[None])
    y, _ = model.downscale(x)
    coded = codec.encode(VideoClip(y.data[0]), qp)
    x_hat = model.upscale(Tensor(coded.reconstruction.data[None]))
    return VideoClip(x_hat.data[0]), coded.metadata


def validation_loss(model: TvrnModel, clips, qp: int, lam: float = 10.0, guidance: str = "l1") -> float:
    """Mean ``L_basic`` with the real codec between downscaling and upscaling."""
    values = []
    for c in clips:
        data = c.data if isinstance(c, VideoClip) else np.asarray(c)
        x = Tensor(data[None])
        y, _ = model.downscale(x)
        coded = codec.encode(VideoClip(y.data[0]), qp)
        x_hat = model.upscale(Tensor(coded.reconstruction.data[None]))
        values.append(basic_loss(x, x_hat, y, even_frames(x), lam, guidance).item())
    return float(np.mean(values))


def validation_psnr(model: TvrnModel, clips, qp: int) -> float:
    out = [rescale(model, c if isinstance(c, VideoClip) else VideoClip(c), qp)[0].data for c in clips]
    ref = [(c.data if isinstance(c, VideoClip) else np.asarray(c)) for c in clips]
    return psnr(np.concatenate(out), np.concatenate(ref))


def frame_skip(clip: VideoClip, qp: int, predictor: str = "flow") -> tuple[VideoClip, codec.CodecMetadata]:
    """Baseline: code the even frames, interpolate the odd ones from the decoded frames."""
    if predictor not in ("average", "flow"):
        raise InvalidConfigError(f"predictor must be 'average' or 'flow', got {predictor!r}")
    even = clip.data[0::2]
    coded = codec.encode(VideoClip(even), qp)
    dec = coded.reconstruction.data
    out = np.empty_like(clip.data)
    out[0::2] = dec
    for k in range(clip.frame_count // 2):
        a, b = dec[k], dec[min(k + 1, len(dec) - 1)]
        out[2 * k + 1] = 0.5 * (a + b) if predictor == "average" else flow_interpolate_np(a, b)
    return VideoClip(out), coded.metadata


METHODS = ("tvrn", "skip-average", "skip-flow")


def _run(method: str, model, clip: VideoClip, qp: int):
    if method == "tvrn":
        return rescale(model, clip, qp)
    return frame_skip(clip, qp, method.split("-")[1])


@dataclass
class RdResult:
    curves: dict          # method -> list[RdPoint], one per qp (averaged over clips)
    rows: list            # per (method, qp, clip) dicts
    bd_rates: dict        # baseline method -> BD-rate of TVRN against it (percent); NaN without overlap


def rd_sweep(model: TvrnModel | None, clips, qps=RD_QPS, methods=METHODS) -> RdResult:
    """RD points per method and QP; BD-rate of TVRN against each frame-skip baseline."""
    curves, rows = {}, []
    for m in methods:
        if m == "tvrn" and model is None:
            continue
        points = []
        for qp in qps:
            per = []
            for i, c in enumerate(clips):
                clip = c if isinstance(c, VideoClip) else VideoClip(c)
                recon, meta = _run(m, model, clip, qp)
                pt = RdPoint(codec.bpp(meta, clip.frame_count, clip.height, clip.width),
                             psnr(recon.data, clip.data), ssim(recon.data, clip.data))
                per.append(pt)
                rows.append({"method": m, "qp": qp, "clip": i, "bpp": pt.bpp, "psnr": pt.psnr, "ssim": pt.ssim})
            points.append(RdPoint(float(np.mean([p.bpp for p in per])), float(np.mean([p.psnr for p in per])),
                                  float(np.mean([p.ssim for p in per]))))
        curves[m] = points
    bd = {}
    if "tvrn" in curves:
        for m in curves:
            if m != "tvrn":
                try:
                    bd[m] = bd_rate(curves[m], curves["tvrn"])
                except NotComputableError:
                    bd[m] = float("nan")
    return RdResult(curves, rows, bd)


# --------------------------------------------------------------------------
# gradient-path audit


def reconstruction_gradient(model: TvrnModel, x: Tensor, qps, through_surrogate: bool = True) -> np.ndarray:
    """``d l1(x, x_hat) / d y`` with the codec between ``y`` and the upscaler.

    With ``through_surrogate`` the codec values are reassigned onto the
    surrogate output; otherwise the upscaler sees the codec output as a
    constant and no gradient can reach ``y``.
    """
    with T.Tape() as tape:
        y, _ = model.downscale(x)
        coded, metas = code_batch(y.data, qps)
        if through_surrogate:
            y_tilde = T.reassign(model.surrogate(y, metas, qps), coded)
        else:
            y_tilde = Tensor(coded)
        x_hat = model.upscale(y_tilde)
        loss = T.l1(x, x_hat)
    return tape.gradient(loss, [y])[0]
