import numpy as np
import pytest
from hypothesis import given, strategies as st

from tvrn import metrics as M
from tvrn.errors import InvalidLengthError, InvalidShapeError, NotComputableError
from tvrn.metrics import RdPoint
from tvrn.video import SyntheticSpec, VideoClip, generate_synthetic


def test_identical_clip_cap(rng):
    a = rng.random((3, 8, 8))
    assert M.psnr(a, a) == 99.0
    assert M.sigma_psnr(a, a) == 0.0
    assert M.ssim(a, a) == pytest.approx(1.0)


def test_uniform_error_closed_form(rng):
    a = rng.random((2, 8, 8)) * 0.5
    b = a + 1 / 255
    want = 20 * np.log10(255)
    assert abs(M.psnr(a, b) - want) < 0.01
    assert abs(M.psnr(a, b, "avg-mse") - want) < 0.01
    assert round(want, 2) == 48.13


def test_avg_mse_two_frames():
    m = 1e-3
    a = np.zeros((2, 4, 4))
    b = np.stack([np.full((4, 4), np.sqrt(m)), np.full((4, 4), 2 * np.sqrt(m))])
    assert abs(M.psnr(a, b, "avg-mse") - 10 * np.log10(2 / (5 * m))) < 0.01
    want_log = np.mean([10 * np.log10(1 / m), 10 * np.log10(1 / (4 * m))])
    assert abs(M.psnr(a, b) - want_log) < 0.01


def test_geometry_mismatch():
    with pytest.raises(InvalidShapeError):
        M.psnr(np.zeros((2, 4, 4)), np.zeros((2, 4, 5)))


@given(st.integers(0, 2**31 - 1))
def test_psnr_symmetric(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((2, 2, 6, 6))
    assert M.psnr(a, b) == M.psnr(b, a)
    assert M.ssim(a, a) == pytest.approx(1.0)


def test_constant_spectrum():
    s = M.log_magnitude_spectrum(np.full((8, 8), 0.5))
    assert s[4, 4] > 0
    s[4, 4] = 0
    np.testing.assert_allclose(s, 0, atol=1e-12)


def test_overlap_ratio_cases():
    h = np.array([1.0, 3.0, 2.0])
    assert M.overlap_ratio(h, h) == 100.0
    assert M.overlap_ratio([1, 0, 0], [0, 2, 3]) == 0.0
    assert M.overlap_ratio(h * 7, h * 7) == 100.0


@given(st.lists(st.floats(0, 10), min_size=3, max_size=3), st.lists(st.floats(0.1, 10), min_size=3, max_size=3),
       st.floats(0.1, 100))
def test_overlap_scale_invariant(t, r, k):
    a = M.overlap_ratio(t, r)
    b = M.overlap_ratio(np.array(t) * k, np.array(r) * k)
    assert 0 <= a <= 100
    assert a == pytest.approx(b, abs=1e-9)


def test_spectrum_report_self():
    frame = np.random.default_rng(0).random((16, 16))
    assert M.spectrum_report(frame, frame).overlap == 100.0


def test_tof_trivial(rng):
    g = rng.random((3, 16, 16))
    assert M.tof(g, g) == 0.0
    with pytest.raises(InvalidLengthError):
        M.tof(g[:1], g[:1])


def test_warp_psnr_static_and_translation():
    frame = np.random.default_rng(1).random((16, 16))
    assert M.warp_psnr(np.stack([frame] * 3)) == 99.0
    clip, _ = generate_synthetic(SyntheticSpec(pattern="drifting-sinusoid", velocity=(1, 0), frames=2,
                                               height=32, width=32, noise=0.0, seed=4))
    from tvrn.flow import backward_warp_np, block_flow
    f01, f10 = block_flow(clip.data[0], clip.data[1])
    warped = backward_warp_np(clip.data[0], f10)
    np.testing.assert_allclose(warped[8:-8, 8:-8], clip.data[1][8:-8, 8:-8], atol=1e-6)


def _curve(rates, psnrs):
    return [RdPoint(r, p) for r, p in zip(rates, psnrs)]


def test_bd_rate_cases():
    a = _curve([0.1, 0.2, 0.4, 0.8], [30, 33, 36, 39])
    assert abs(M.bd_rate(a, a)) < 1e-9
    b = _curve([0.2, 0.4, 0.8, 1.6], [30, 33, 36, 39])
    assert M.bd_rate(a, b) == pytest.approx(100.0, abs=1e-6)
    with pytest.raises(NotComputableError):
        M.bd_rate(a[:3], a[:3])
    with pytest.raises(NotComputableError):
        M.bd_rate(a, _curve([0.1, 0.2, 0.4, 0.8], [50, 53, 56, 59]))


@given(st.integers(0, 2**31 - 1))
def test_bd_rate_matches_trapezoid_oracle(seed):
    r = np.random.default_rng(seed)
    q = np.sort(r.uniform(28, 42, 4))
    qa, qb = q, np.sort(q + r.uniform(-1, 1, 4))
    ra = np.exp(np.sort(r.uniform(-3, 0, 4)))
    rb = ra * np.exp(r.uniform(-0.3, 0.3, 4))
    rb = np.sort(rb)
    a, b = _curve(ra, qa), _curve(rb, qb)
    lo, hi = max(qa.min(), qb.min()), min(qa.max(), qb.max())
    if hi - lo < 0.5:
        return
    grid = np.linspace(lo, hi, 20001)
    fa = np.polyval(np.polyfit(qa, np.log(ra), 3), grid)
    fb = np.polyval(np.polyfit(qb, np.log(rb), 3), grid)
    avg = np.trapezoid(fb - fa, grid) / (hi - lo)
    oracle = (np.exp(avg) - 1) * 100
    got = M.bd_rate(a, b)
    assert abs(got - oracle) <= 1e-3 * max(1.0, abs(oracle))


def test_rdpoint_rejects_negative_rate():
    with pytest.raises(ValueError):
        RdPoint(-1.0, 30.0)


def test_evaluate_and_csv(tmp_path, rng):
    a = rng.random((3, 16, 16))
    row = M.evaluate(a, a)
    assert row["psnr"] == 99.0 and row["tof"] == 0.0
    M.write_csv(tmp_path / "m.csv", [{"sequence": "s", "qp": 22, **row}])
    text = (tmp_path / "m.csv").read_text().splitlines()
    assert text[0] == ",".join(M.CSV_COLUMNS)
    assert text[1].startswith("s,22,")


def test_psnr_accepts_clips(rng):
    a = VideoClip(rng.random((2, 8, 8)))
    assert M.psnr(a, a) == 99.0
