"""Validation experiments: gradient-error envelope, gradient-noise degradation, frequency analysis.

The gradient-bound experiment compares the codec's finite-difference slope
of a scalar functional with the surrogate's tape derivative of the same
functional. The functional is the mean pixel value of the coded clip.
The codec is only ever called on plain arrays; no tape records through it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import codec
from . import tensor as T
from .errors import InvalidEpsError
from .metrics import bd_rate, spectrum_report
from .pipeline import TrainConfig, TvrnModel, alternate_train, rd_sweep
from .surrogate import Surrogate
from .tensor import Tensor
from .video import VideoClip

MIN_EPS = 1e-4
ENVELOPE_BINS = 16
ENVELOPE_QUANTILE = 95.0


# --------------------------------------------------------------------------
# gradient-error envelope


def _codec_outputs(clip: np.ndarray, qp: int) -> codec.CodedClip:
    # the codec is a black box on arrays; a Tensor here would mean a tape reaches it
    assert isinstance(clip, np.ndarray) and not isinstance(clip, Tensor)
    return codec.encode(VideoClip(clip), qp)


def codec_functional(clip: np.ndarray, qp: int) -> float:
    return float(np.mean(_codec_outputs(clip, qp).reconstruction.data, dtype=np.float64))


def random_directions(shape, count: int, rng: np.random.Generator) -> np.ndarray:
    """Gaussian directions normalised to unit RMS, so ``eps`` is a per-pixel step."""
    u = rng.standard_normal((count,) + tuple(shape))
    rms = np.sqrt(np.mean(u.reshape(count, -1) ** 2, axis=1))
    return u / rms.reshape((count,) + (1,) * len(shape))


@dataclass
class Envelope:
    slope: float
    intercept: float
    fit_intercept: float      # least-squares intercept before the coverage adjustment
    coverage: float           # fraction of samples on or under the line
    bin_centres: np.ndarray
    bin_quantiles: np.ndarray


def fit_envelope(d_hat: np.ndarray, dg: np.ndarray, bins: int = ENVELOPE_BINS,
                 quantile: float = ENVELOPE_QUANTILE, target: float = 0.95) -> Envelope:
    """Least-squares line through per-bin quantiles of ``dg`` over ``d_hat`` bins.

    A negative slope is clamped to zero. A line through bin quantiles alone
    need not cover ``target`` of the samples (bins can be sparse), so the
    intercept is raised to the smallest value that does.
    """
    d_hat = np.asarray(d_hat, dtype=np.float64)
    dg = np.asarray(dg, dtype=np.float64)
    lo, hi = d_hat.min(), d_hat.max()
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    which = np.clip(np.searchsorted(edges, d_hat, side="right") - 1, 0, bins - 1)
    centres, quants = [], []
    for k in range(bins):
        sel = which == k
        if np.any(sel):
            centres.append(0.5 * (edges[k] + edges[k + 1]))
            quants.append(np.percentile(dg[sel], quantile))
    centres = np.array(centres)
    quants = np.array(quants)
    slope, b0 = np.polyfit(centres, quants, 1) if len(centres) >= 2 else (0.0, quants[0])
    if slope < 0:
        # an upper bound cannot shrink as the discrepancy grows; fall back to a flat line
        slope, b0 = 0.0, np.mean(quants)
    slope = float(slope)
    b0 = float(b0)
    need = float(np.quantile(dg - slope * d_hat, target, method="higher"))
    b = max(b0, need)
    coverage = float(np.mean(dg <= slope * d_hat + b + 1e-12))
    return Envelope(slope, b, b0, coverage, centres, quants)


@dataclass
class GradBoundReport:
    d_hat: np.ndarray          # one entry per (clip, direction); D_hat repeats within a clip
    delta_g: np.ndarray
    eps: float
    directions: int
    envelope: Envelope
    grad_num: np.ndarray = field(repr=False, default=None)
    grad_surr: np.ndarray = field(repr=False, default=None)

    @property
    def median_delta_g(self) -> float:
        return float(np.median(self.delta_g))

    def rows(self):
        return [{"d_hat": float(d), "delta_g": float(g)} for d, g in zip(self.d_hat, self.delta_g)]


def grad_bound_experiment(surrogate: Surrogate | None, clips, qp: int, eps: float = 1e-2,
                          directions: int = 8, seed: int = 0) -> GradBoundReport:
    """Samples ``(D_hat, delta_g_k)`` for every clip and random direction.

    ``surrogate=None`` runs the oracle self-test: the codec stands in for the
    surrogate, with finite differences on both sides.
    """
    if not eps >= MIN_EPS:
        raise InvalidEpsError(f"eps {eps} is below {MIN_EPS}; the codec would show zero slope")
    rng = np.random.default_rng(seed)
    d_all, g_all, num_all, sur_all = [], [], [], []
    for c in clips:
        x = np.asarray(c.data if isinstance(c, VideoClip) else c, dtype=np.float32)
        u = random_directions(x.shape, directions, rng).astype(np.float32)
        plus = x[None] + eps * u
        minus = x[None] - eps * u
        coded_plus = [_codec_outputs(p, qp) for p in plus]
        j_plus = np.array([np.mean(cp.reconstruction.data, dtype=np.float64) for cp in coded_plus])
        j_minus = np.array([codec_functional(m, qp) for m in minus])
        g_num = (j_plus - j_minus) / (2 * eps)
        if surrogate is None:
            g_sur = g_num.copy()
            s_plus = j_plus.copy()
        else:
            meta = _codec_outputs(x, qp).metadata
            xt = Tensor(x[None])
            with T.Tape() as tape:
                tape.watch(xt)
                j = T.mean(surrogate(xt, [meta], [qp]))
            grad = tape.gradient(j, [xt])[0][0].astype(np.float64)
            g_sur = u.reshape(directions, -1).astype(np.float64) @ grad.ravel()
            # all perturbed clips through the surrogate in one batch, each with its own motion
            out = surrogate(Tensor(plus), [cp.metadata for cp in coded_plus], [qp] * directions).data
            s_plus = out.reshape(directions, -1).astype(np.float64).mean(axis=1)
        d_hat = float(np.max(np.abs(j_plus - s_plus)))
        d_all.extend([d_hat] * directions)
        g_all.extend(np.abs(g_num - g_sur))
        num_all.extend(g_num)
        sur_all.extend(g_sur)
    d_all = np.array(d_all)
    g_all = np.array(g_all)
    return GradBoundReport(d_all, g_all, eps, directions, fit_envelope(d_all, g_all),
                           np.array(num_all), np.array(sur_all))


# --------------------------------------------------------------------------
# gradient-noise degradation


@dataclass
class NoiseRun:
    alpha: float
    curve: list                 # RdPoints of TVRN
    bd_vs_baseline: float       # BD-rate of TVRN against frame-skip + flow interpolation
    bd_vs_clean: float          # BD-rate against the alpha = 0 run
    mean_psnr: float
    noise_ratio: float          # mean rms(noise) / rms(g); NaN when alpha = 0


def grad_noise_experiment(alphas, make_model, clips, test_clips, cfg: TrainConfig,
                          qps=(22, 27, 32, 37), log=None) -> list[NoiseRun]:
    """Retrain from the same initial state for every ``alpha`` and compare RD curves.

    ``make_model()`` must return a fresh model in an identical state each
    call; every run shares the seed and all other settings.
    """
    alphas = list(alphas)
    if 0.0 not in alphas:
        alphas = [0.0] + alphas
    runs = {}
    for a in alphas:
        model = make_model()
        result = alternate_train(model, clips, TrainConfig(**{**cfg.__dict__, "noise_alpha": a}), log=log)
        rd = rd_sweep(model, test_clips, qps, methods=("tvrn", "skip-flow"))
        ratio = float(np.mean(result.noise_ratios)) if result.noise_ratios else float("nan")
        runs[a] = (rd, ratio)
    clean = runs[0.0][0].curves["tvrn"]
    out = []
    for a in alphas:
        rd, ratio = runs[a]
        curve = rd.curves["tvrn"]
        out.append(NoiseRun(a, curve, rd.bd_rates["skip-flow"], 0.0 if a == 0.0 else bd_rate(clean, curve),
                            float(np.mean([p.psnr for p in curve])), ratio))
    return out


# --------------------------------------------------------------------------
# frequency analysis


@dataclass
class FrequencyResult:
    method: str
    overlap: float             # mean overlap ratio against frame-skip, percent
    reports: list


def _lfr_difference(method: str, model, clip: VideoClip, qp: int) -> np.ndarray:
    x_e = clip.data[0::2]
    if method == "frame-skip":
        y = x_e
    else:
        y = model.downscale(Tensor(clip.data[None]))[0].data[0]
    coded = codec.encode(VideoClip(y), qp).reconstruction.data
    # the shared low-frequency content is removed by subtracting the original frames
    return coded.astype(np.float64) - x_e


def freq_analysis(model: TvrnModel | None, clips, qp: int, methods=("frame-skip", "tvrn")) -> dict:
    """Spectral overlap of each method's coded LFR residual against frame-skip's."""
    results = {}
    refs = [_lfr_difference("frame-skip", None, c, qp) for c in clips]
    for m in methods:
        reports = []
        for c, ref in zip(clips, refs):
            diff = ref if m == "frame-skip" else _lfr_difference(m, model, c, qp)
            reports.extend(spectrum_report(d, r) for d, r in zip(diff, ref))
        results[m] = FrequencyResult(m, float(np.mean([r.overlap for r in reports])), reports)
    return results


def rd_table(runs) -> list[dict]:
    return [{"alpha": r.alpha, "bd_vs_baseline": r.bd_vs_baseline, "bd_vs_alpha0": r.bd_vs_clean,
             "mean_psnr": r.mean_psnr, "noise_ratio": r.noise_ratio} for r in runs]

