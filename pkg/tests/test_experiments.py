import numpy as np
import pytest

from tvrn import codec
from tvrn import experiments as ex
from tvrn.errors import InvalidEpsError
from tvrn.experiments import (MIN_EPS, codec_functional, fit_envelope, freq_analysis, grad_bound_experiment,
                              grad_noise_experiment, random_directions, rd_table)
from tvrn.pipeline import TrainConfig, TvrnModel
from tvrn.surrogate import Surrogate
from tvrn.tensor import Tensor
from tvrn.video import VideoClip, make_corpus


@pytest.fixture(scope="module")
def small_clips():
    return [c.data[:3] for c in make_corpus(3, 9, frames=3, size=16)]


def test_random_directions_unit_rms(rng):
    u = random_directions((3, 8, 8), 5, rng)
    assert u.shape == (5, 3, 8, 8)
    np.testing.assert_allclose(np.sqrt(np.mean(u.reshape(5, -1) ** 2, axis=1)), 1.0)


def test_codec_functional_is_mean_output(small_clips):
    c = small_clips[0]
    ref = codec.encode(VideoClip(c), 27).reconstruction.data.mean(dtype=np.float64)
    assert codec_functional(c, 27) == pytest.approx(ref)


def test_eps_floor(small_clips):
    with pytest.raises(InvalidEpsError):
        grad_bound_experiment(None, small_clips, 27, eps=MIN_EPS / 2)


def test_oracle_self_test(small_clips):
    rep = grad_bound_experiment(None, small_clips, 32, directions=3)
    assert rep.d_hat.shape == rep.delta_g.shape == (9,)
    assert np.all(rep.d_hat == 0) and np.all(rep.delta_g == 0)
    assert rep.envelope.coverage == 1.0


def test_surrogate_run_never_tapes_the_codec(small_clips, monkeypatch):
    seen = []
    real = codec.encode

    def spy(clip, qp):
        seen.append(type(clip.data))
        return real(clip, qp)

    monkeypatch.setattr(codec, "encode", spy)
    rep = grad_bound_experiment(Surrogate(np.random.default_rng(0)), small_clips[:2], 32, directions=2)
    assert seen and all(t is np.ndarray for t in seen)
    assert np.all(rep.d_hat >= 0) and np.all(rep.delta_g >= 0)
    assert len(rep.rows()) == 4
    with pytest.raises(AssertionError):
        ex._codec_outputs(Tensor(small_clips[0]), 32)


def test_grad_bound_deterministic(small_clips):
    s = Surrogate(np.random.default_rng(0))
    a = grad_bound_experiment(s, small_clips[:2], 32, directions=2, seed=4)
    b = grad_bound_experiment(s, small_clips[:2], 32, directions=2, seed=4)
    assert a.rows() == b.rows()


def test_envelope_covers(rng):
    d = rng.random(400)
    g = 0.5 * d + rng.exponential(0.1, 400)
    env = fit_envelope(d, g)
    assert env.coverage >= 0.95
    assert env.slope > 0
    assert len(env.bin_centres) == len(env.bin_quantiles) <= 16


def test_envelope_degenerate_inputs(rng):
    # a single distinct discrepancy collapses to one bin and a flat line
    env = fit_envelope(np.zeros(50), rng.random(50))
    assert env.slope == 0.0 and env.coverage >= 0.95
    # decreasing quantiles clamp the slope at zero
    d = np.linspace(0, 1, 200)
    env = fit_envelope(d, 1.0 - d)
    assert env.slope == 0.0 and env.coverage >= 0.95


def test_freq_analysis_trivial_cases():
    clips = make_corpus(2, 3, frames=7, size=16)
    res = freq_analysis(TvrnModel(np.random.default_rng(0)), clips, 27)
    assert res["frame-skip"].overlap == pytest.approx(100.0)
    # a fresh model downscales to the even frames, i.e. frame-skip
    assert res["tvrn"].overlap == pytest.approx(100.0)
    assert len(res["tvrn"].reports) == 2 * 4


def test_grad_noise_experiment_smoke():
    clips = make_corpus(3, 4, frames=7, size=16)
    snapshot = TvrnModel(np.random.default_rng(0)).state()

    def make_model():
        m = TvrnModel(np.random.default_rng(0))
        m.load_state(snapshot)
        return m

    runs = grad_noise_experiment([0.4], make_model, clips[:2], clips[2:], TrainConfig(steps=1, batch=2))
    assert [r.alpha for r in runs] == [0.0, 0.4]
    assert runs[0].bd_vs_clean == 0.0
    assert np.isnan(runs[0].noise_ratio) and abs(runs[1].noise_ratio - 1.0) < 0.05
    rows = rd_table(runs)
    assert set(rows[0]) == {"alpha", "bd_vs_baseline", "bd_vs_alpha0", "mean_psnr", "noise_ratio"}
