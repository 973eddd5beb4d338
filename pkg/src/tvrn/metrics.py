"""Quality, rate, temporal-consistency and spectral measurements."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidConfigError, InvalidLengthError, InvalidShapeError, NotComputableError
from .video import VideoClip

PSNR_CAP = 99.0
SSIM_WINDOW = 8
HIST_BINS = 64


@dataclass
class RdPoint:
    bpp: float
    psnr: float
    ssim: float = float("nan")

    def __post_init__(self):
        if self.bpp < 0:
            raise InvalidConfigError("bpp must be non-negative")


def _arrays(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = a.data if isinstance(a, VideoClip) else np.asarray(a)
    b = b.data if isinstance(b, VideoClip) else np.asarray(b)
    if a.ndim == 2:
        a = a[None]
    if b.ndim == 2:
        b = b[None]
    if a.shape != b.shape:
        raise InvalidShapeError(f"geometry mismatch {a.shape} vs {b.shape}")
    return a.astype(np.float64), b.astype(np.float64)


def _to_db(mse, max_val: float):
    mse = np.asarray(mse, dtype=np.float64)
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(max_val ** 2 / mse)
    return np.minimum(np.where(mse > 0, db, PSNR_CAP), PSNR_CAP)


def frame_psnr(a, b, max_val: float = 1.0) -> np.ndarray:
    a, b = _arrays(a, b)
    return _to_db(((a - b) ** 2).mean(axis=(1, 2)), max_val)


def psnr(a, b, mode: str = "avg-log", max_val: float = 1.0) -> float:
    """``avg-log`` averages per-frame dB; ``avg-mse`` converts the mean MSE."""
    a, b = _arrays(a, b)
    mse = ((a - b) ** 2).mean(axis=(1, 2))
    if mode == "avg-log":
        return float(_to_db(mse, max_val).mean())
    if mode == "avg-mse":
        return float(_to_db(mse.mean(), max_val))
    raise InvalidConfigError(f"unknown psnr mode {mode!r}")


def sigma_psnr(a, b, max_val: float = 1.0) -> float:
    """Population standard deviation of per-frame PSNR."""
    return float(np.std(frame_psnr(a, b, max_val)))


def ssim(a, b, max_val: float = 1.0) -> float:
    """Mean SSIM over all 8x8 windows (stride 1) and frames."""
    a, b = _arrays(a, b)
    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2
    win = (min(SSIM_WINDOW, a.shape[1]), min(SSIM_WINDOW, a.shape[2]))
    wa = sliding_window_view(a, win, axis=(1, 2))
    wb = sliding_window_view(b, win, axis=(1, 2))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


# --------------------------------------------------------------------------
# spectra


def log_magnitude_spectrum(frame) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise InvalidShapeError(f"spectrum needs a 2-D frame, got {frame.shape}")
    return np.log1p(np.abs(np.fft.fftshift(np.fft.fft2(frame))))


def paired_histograms(test: np.ndarray, ref: np.ndarray, bins: int = HIST_BINS):
    """Histograms of two spectra over their pooled value range."""
    test = np.asarray(test, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    lo = min(test.min(), ref.min())
    hi = max(test.max(), ref.max())
    if hi <= lo:
        hi = lo + 1.0
    ht, edges = np.histogram(test, bins=bins, range=(lo, hi))
    hr, _ = np.histogram(ref, bins=bins, range=(lo, hi))
    return ht.astype(np.float64), hr.astype(np.float64), edges


def overlap_ratio(test_hist, ref_hist) -> float:
    """``100 * sum(min(t, r)) / sum(r)``; two empty histograms overlap fully."""
    t = np.asarray(test_hist, dtype=np.float64)
    r = np.asarray(ref_hist, dtype=np.float64)
    area = r.sum()
    if area <= 0:
        return 100.0 if t.sum() <= 0 else 0.0
    return float(100.0 * np.minimum(t, r).sum() / area)


@dataclass
class SpectrumReport:
    spectrum: np.ndarray
    histogram: np.ndarray
    reference_histogram: np.ndarray
    overlap: float


def spectrum_report(test_frame, ref_frame, bins: int = HIST_BINS) -> SpectrumReport:
    st = log_magnitude_spectrum(test_frame)
    sr = log_magnitude_spectrum(ref_frame)
    ht, hr, _ = paired_histograms(st, sr, bins)
    return SpectrumReport(st, ht, hr, overlap_ratio(ht, hr))


# --------------------------------------------------------------------------
# temporal consistency


def _default_flow():
    from .flow import block_flow
    return block_flow


def tof(recon, gt, flow_fn=None) -> float:
    """Mean L1 (|dx| + |dy|) between flows of consecutive recon and gt frames."""
    r, g = _arrays(recon, gt)
    if r.shape[0] < 2:
        raise InvalidLengthError("tOF needs at least 2 frames")
    flow_fn = flow_fn or _default_flow()
    total = 0.0
    for t in range(1, r.shape[0]):
        fr = flow_fn(r[t - 1], r[t])[0]
        fg = flow_fn(g[t - 1], g[t])[0]
        total += float(np.abs(fr - fg).sum(axis=0).mean())
    return total / (r.shape[0] - 1)


def warp_psnr(clip, flow_fn=None, max_val: float = 1.0) -> float:
    """PSNR of each frame against its backward-warped predecessor (avg-log)."""
    from .flow import backward_warp_np
    c = clip.data if isinstance(clip, VideoClip) else np.asarray(clip)
    if c.shape[0] < 2:
        raise InvalidLengthError("warp_psnr needs at least 2 frames")
    flow_fn = flow_fn or _default_flow()
    scores = []
    for t in range(1, c.shape[0]):
        _, f10 = flow_fn(c[t - 1], c[t])
        warped = backward_warp_np(c[t - 1], f10)
        scores.append(psnr(warped, c[t], max_val=max_val))
    return float(np.mean(scores))


# --------------------------------------------------------------------------
# Bjontegaard delta rate


def _curve(points) -> tuple[np.ndarray, np.ndarray]:
    pts = sorted(points, key=lambda p: p.psnr)
    rate = np.array([p.bpp for p in pts], dtype=np.float64)
    quality = np.array([p.psnr for p in pts], dtype=np.float64)
    if len(pts) < 4:
        raise NotComputableError(f"BD-rate needs >= 4 points per curve, got {len(pts)}")
    if np.any(rate <= 0):
        raise NotComputableError("BD-rate needs strictly positive rates")
    if np.ptp(quality) <= 0:
        raise NotComputableError("BD-rate needs a non-degenerate quality range")
    return np.log(rate), quality


def _overlap(qa: np.ndarray, qb: np.ndarray) -> tuple[float, float]:
    lo = max(qa.min(), qb.min())
    hi = min(qa.max(), qb.max())
    if hi <= lo:
        raise NotComputableError("insufficient quality overlap between RD curves")
    return lo, hi


def bd_rate(curve_a, curve_b) -> float:
    """Average rate difference of ``b`` versus ``a`` at equal quality, in percent.

    Log-rate is fitted as a cubic in PSNR for both curves and the fits are
    integrated exactly over the shared PSNR interval.
    """
    ra, qa = _curve(curve_a)
    rb, qb = _curve(curve_b)
    lo, hi = _overlap(qa, qb)
    pa = np.polyint(np.polyfit(qa, ra, 3))
    pb = np.polyint(np.polyfit(qb, rb, 3))
    ia = np.polyval(pa, hi) - np.polyval(pa, lo)
    ib = np.polyval(pb, hi) - np.polyval(pb, lo)
    avg = (ib - ia) / (hi - lo)
    return float((np.exp(avg) - 1.0) * 100.0)


# --------------------------------------------------------------------------
# reporting


CSV_COLUMNS = ("sequence", "qp", "bpp", "psnr", "ssim", "sigma_psnr", "tof", "warp_psnr")


def evaluate(recon, ref, flow_fn=None) -> dict:
    r, g = _arrays(recon, ref)
    row = {"psnr": psnr(r, g), "ssim": ssim(r, g), "sigma_psnr": sigma_psnr(r, g)}
    if r.shape[0] >= 2:
        row["tof"] = tof(r, g, flow_fn)
        row["warp_psnr"] = warp_psnr(r, flow_fn)
    return row


def write_csv(path, rows, columns=CSV_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in (asdict(row) if hasattr(row, "__dataclass_fields__") else row).items()})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return v
