import numpy as np
import pytest

from tvrn import codec
from tvrn.errors import FormatError, InvalidGeometryError, InvalidQPError
from tvrn.metrics import psnr
from tvrn.video import VideoClip, make_corpus


def test_qstep_values():
    assert codec.qstep(4) == 1.0
    assert codec.qstep(10) == 2.0
    assert codec.qstep(22) == 8.0
    for bad in (-1, 52, 3.5):
        with pytest.raises(InvalidQPError):
            codec.qstep(bad)


def test_geometry_error():
    with pytest.raises(InvalidGeometryError):
        codec.encode(VideoClip(np.zeros((2, 12, 16))), 22)


def test_determinism():
    clip = make_corpus(1, 3, frames=4, size=32)[0]
    a = codec.encode(clip, 27)
    b = codec.encode(clip, 27)
    assert a.reconstruction.data.tobytes() == b.reconstruction.data.tobytes()
    assert np.array_equal(a.metadata.mvs, b.metadata.mvs)
    assert np.array_equal(a.metadata.frame_bits, b.metadata.frame_bits)


def test_static_clip_below_quantizer_threshold(rng):
    # dark enough that every DCT coefficient of frame 0 lies under qstep/2
    frame = rng.random((16, 16)) * 0.05
    clip = VideoClip(np.stack([frame] * 4))
    for qp in (46, 51):
        assert codec.qstep(qp) > 2 * np.abs(codec.block_dct(np.round(frame * 255))).max()
        coded = codec.encode(clip, qp)
        assert not coded.metadata.mvs.any()
        rec = coded.reconstruction.data
        for t in range(1, 4):
            np.testing.assert_array_equal(rec[t], rec[0])
        assert coded.metadata.frame_bits[1] == 64 * 4 + codec.MV_BITS * 4


def test_static_clip_any_qp(rng):
    frame = rng.random((16, 16))
    clip = VideoClip(np.stack([frame] * 4))
    floor = 64 * 4 + codec.MV_BITS * 4
    for qp in range(0, 52, 5):
        coded = codec.encode(clip, qp)
        assert not coded.metadata.mvs.any()
        # the P residual is the intra error, which re-quantizes to zero except near ties
        assert all(b <= 1.15 * floor for b in coded.metadata.frame_bits[1:])


def test_near_lossless_at_qp0():
    clip = make_corpus(1, 4, frames=4, size=32)[0]
    coded = codec.encode(clip, 0)
    step = codec.qstep(0)
    err = np.abs(coded.reconstruction.data * 255 - np.round(clip.data * 255))
    # orthonormal 8x8 DCT: each coefficient error <= step/2 and each basis value <= 1/4
    assert err.max() <= 64 * 0.25 * step / 2 + 0.5
    assert np.sqrt(np.mean(err ** 2)) <= step / 2 + 0.5
    assert psnr(coded.reconstruction, clip.quantized()) > 45


def test_rate_distortion_monotone():
    clip = make_corpus(1, 5, frames=4, size=32)[0]
    qps = [12, 17, 22, 27, 32, 37]
    coded = [codec.encode(clip, q) for q in qps]
    bits = [c.metadata.bits for c in coded]
    mse = [np.mean((c.reconstruction.data.astype(np.float64) - clip.data) ** 2) for c in coded]
    assert all(b1 >= b2 for b1, b2 in zip(bits, bits[1:]))
    assert all(m1 <= m2 for m1, m2 in zip(mse, mse[1:]))


def test_motion_search_cases(rng):
    ref = rng.random((32, 32)) * 255
    assert not codec.motion_search(ref, ref).any()
    cur = np.roll(ref, 2, axis=1)  # content moves +2 in x
    mv = codec.motion_search(ref, cur)
    assert np.all(mv[:, 1:-1] == [2, 0])
    far = np.roll(ref, 10, axis=1)
    mv = codec.motion_search(ref, far)
    assert np.abs(mv).max() <= codec.SEARCH


def test_compensate_inverts_shift(rng):
    ref = rng.random((16, 16))
    mv = np.zeros((2, 2, 2), dtype=np.int64)
    mv[..., 0] = 1
    pred = codec.compensate(ref, mv)
    np.testing.assert_array_equal(pred[:, 1:], ref[:, :-1])


def test_block_dct_roundtrip(rng):
    f = rng.random((16, 24))
    np.testing.assert_allclose(codec.block_idct(codec.block_dct(f)), f, atol=1e-12)


def test_bits_formula():
    q = np.array([0, 1, -3, 4])
    assert codec.coefficient_bits(q) == 1 + 2 + 3 + 4


def test_metadata_shape_and_bpp():
    clip = make_corpus(1, 6, frames=4, size=16)[0]
    meta = codec.encode(clip, 22).metadata
    assert meta.frame_count == 4 and meta.mvs.shape == (4, 2, 2, 2)
    assert not meta.mvs[0].any()
    np.testing.assert_array_equal(meta.mv_backward(1), -meta.mv_forward(1))
    assert codec.bpp(meta, 7, 16, 16) == meta.bits / (7 * 16 * 16)


def test_metadata_file_roundtrip(tmp_path):
    meta = codec.encode(make_corpus(1, 7, frames=3, size=16)[0], 27).metadata
    path = tmp_path / "m.bin"
    codec.save_metadata(meta, path)
    back = codec.load_metadata(path)
    assert back.qp == meta.qp and back.bits == meta.bits
    np.testing.assert_array_equal(back.mvs, meta.mvs)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(FormatError):
        codec.load_metadata(path)
