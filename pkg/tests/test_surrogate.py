import numpy as np
import pytest

from helpers import directional_error, smooth_leaky_relu, to64
from tvrn import codec
from tvrn import tensor as T
from tvrn.coupling import randomize
from tvrn.errors import InvalidMetadataError
from tvrn.surrogate import Surrogate, build_samples, train_surrogate
from tvrn.tensor import Tensor
from tvrn.video import VideoClip, make_corpus


@pytest.fixture
def clip():
    return make_corpus(1, 21, frames=4, size=16)[0]


def test_intra_identity_at_init(rng):
    s = Surrogate(rng)
    y0 = Tensor(rng.random((2, 1, 16, 16)))
    np.testing.assert_array_equal(s.intra_frame(y0, [22, 37]).data, y0.data)


def test_feature_collapse_contracts(rng):
    s = Surrogate(rng)
    low = Tensor(np.round(rng.random((1, 1, 8, 8)) * 255) / 255)
    high = Tensor(rng.standard_normal((1, 1, 8, 8)))
    ql, qh = s.feature_collapse(low, high, [27])
    np.testing.assert_array_equal(ql.data, low.data)
    np.testing.assert_array_equal(qh.data, high.data)
    x = Tensor(rng.random((1, 1, 8, 8)))
    with T.Tape() as tape:
        tape.watch(x)
        total = T.sum_all(s.feature_collapse(x, high, [27])[0])
    np.testing.assert_array_equal(tape.gradient(total, [x])[0], 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_degradation_free_step_is_identity(seed, clip):
    r = np.random.default_rng(seed)
    s = Surrogate(r)
    randomize(s, r)
    meta = codec.encode(clip, 27).metadata
    y = Tensor(clip.data[None])
    out = s(y, [meta], [27], degrade=False)
    assert np.max(np.abs(out.data - y.data)) < 1e-5


def test_missing_metadata(rng, clip):
    s = Surrogate(rng)
    meta = codec.encode(clip, 27).metadata
    with pytest.raises(InvalidMetadataError):
        s(Tensor(clip.data[None]), [], [27])
    with pytest.raises(InvalidMetadataError):
        s(Tensor(clip.data[None, :3]), [meta], [27])
    with pytest.raises(InvalidMetadataError):
        s.step(Tensor(clip.data[None, :1]), Tensor(clip.data[None, 1:2]), None, [27])


def test_causal(rng, clip):
    s = Surrogate(rng)
    randomize(s, rng, 0.5)
    meta = codec.encode(clip, 27).metadata
    y = clip.data[None].copy()
    a = s(Tensor(y), [meta], [27]).data
    y[0, 3] = 1 - y[0, 3]
    b = s(Tensor(y), [meta], [27]).data
    np.testing.assert_array_equal(a[:, :3], b[:, :3])
    assert np.abs(a[:, 3] - b[:, 3]).max() > 0


def test_deterministic(rng, clip):
    s = Surrogate(rng)
    meta = codec.encode(clip, 32).metadata
    a = s(Tensor(clip.data[None]), [meta], [32]).data
    b = s(Tensor(clip.data[None]), [meta], [32]).data
    assert a.tobytes() == b.tobytes()


def test_surrogate_gradient_against_fd(monkeypatch, rng, clip):
    """FD oracle on the straight-through relaxation: rounding is the identity in both passes.

    Leaky ReLU is smoothed as well: with thousands of hidden units some always sit
    within eps of the kink, which leaves a 1e-4 level FD bias unrelated to the tape.
    """
    monkeypatch.setattr(T, "round_ste", lambda a, scale=255.0: a)
    monkeypatch.setattr(T, "leaky_relu", smooth_leaky_relu)
    with T.default_dtype(np.float64):
        s = to64(Surrogate(rng))
        randomize(s, rng)
    meta = codec.encode(clip, 27).metadata
    # a smooth readout; an l1 target would put kinks under the finite differences
    w = Tensor(rng.standard_normal((1,) + clip.data.shape))

    def f(y):
        return T.sum_all(T.mul(s(y, [meta], [27]), w))

    assert directional_error(f, [clip.data[None].astype(np.float64)], rng, eps=1e-6) < 1e-4


def test_short_training_reduces_loss():
    clips = [c[:3] for c in make_corpus(6, 8, frames=3, size=16)]
    samples = build_samples(clips, qps=(22, 37))
    s = Surrogate(np.random.default_rng(0))
    report = train_surrogate(s, samples, 40, np.random.default_rng(1), batch=4, lr=2e-3)
    assert np.mean(report.losses[-10:]) < np.mean(report.losses[:10])
    assert set(report.simulation_psnr) == {22, 37}
    assert [r["qp"] for r in report.rows()] == [22, 37]


def test_build_samples(clip):
    samples = build_samples([clip], qps=(17, 37))
    assert [s.qp for s in samples] == [17, 37]
    assert samples[0].target.shape == clip.data.shape
    assert samples[1].meta.qp == 37
