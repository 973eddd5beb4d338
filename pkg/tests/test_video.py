import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tvrn.errors import FormatError, InvalidLengthError, InvalidShapeError, InvalidSpecError
from tvrn.video import (PATTERNS, SyntheticSpec, VideoClip, generate_synthetic, load_clip, make_corpus,
                        merge_even_odd, pad_to_group, save_clip, split_even_odd)


def test_clip_clamps_and_shapes():
    c = VideoClip(np.array([[[-1.0, 2.0]]]))
    np.testing.assert_array_equal(c.data, [[[0, 1]]])
    assert (c.frame_count, c.height, c.width) == (1, 1, 2)
    assert c.frames[0].shape == (1, 1, 2)
    with pytest.raises(InvalidShapeError):
        VideoClip(np.zeros((0, 4, 4)))


def test_roundtrip_value_identical(tmp_path, rng):
    clip = VideoClip(rng.random((4, 16, 16))).quantized()
    path = tmp_path / "a.tvc"
    save_clip(clip, path)
    back = load_clip(path)
    np.testing.assert_array_equal(back.data, clip.data)
    save_clip(back, tmp_path / "b.tvc")
    assert (tmp_path / "b.tvc").read_bytes() == path.read_bytes()


def test_quantization_error_half_quantum(rng):
    clip = VideoClip(rng.random((2, 8, 8)))
    assert np.max(np.abs(clip.quantized().data - clip.data)) <= 1 / 510 + 1e-7


def test_format_errors(tmp_path):
    path = tmp_path / "bad.tvc"
    path.write_bytes(b"TVC1" + struct.pack("<HHHB", 4, 4, 0, 8))
    with pytest.raises(FormatError):
        load_clip(path)
    path.write_bytes(b"NOPE" + struct.pack("<HHHB", 4, 4, 1, 8) + bytes(16))
    with pytest.raises(FormatError):
        load_clip(path)
    path.write_bytes(b"TVC1" + struct.pack("<HHHB", 4, 4, 1, 8) + bytes(10))
    with pytest.raises(FormatError):
        load_clip(path)


def test_static_synthetic_is_constant():
    clip, flows = generate_synthetic(SyntheticSpec(pattern="translating-rectangle", velocity=(0, 0),
                                                   frames=5, height=16, width=16, noise=0.0, seed=3))
    for t in range(1, 5):
        np.testing.assert_array_equal(clip.data[t], clip.data[0])
    assert all(not f.any() for f in flows)


@pytest.mark.parametrize("pattern", PATTERNS)
def test_integer_shift(pattern):
    clip, flows = generate_synthetic(SyntheticSpec(pattern=pattern, velocity=(1, 0), frames=3,
                                                   height=24, width=24, noise=0.0, seed=1))
    if pattern == "two-layer-parallax":
        # only the foreground moves by a whole pixel
        assert np.isclose(flows[0][0].max(), 1.0)
        return
    np.testing.assert_allclose(clip.data[1][:, 1:], clip.data[0][:, :-1], atol=1e-6)
    np.testing.assert_allclose(flows[0][0], 1.0)


def test_sinusoid_half_pixel_drift():
    clip, _ = generate_synthetic(SyntheticSpec(pattern="drifting-sinusoid", velocity=(0.5, 0), frames=3,
                                               height=16, width=16, noise=0.0, seed=2))
    np.testing.assert_allclose(clip.data[2][:, 1:], clip.data[0][:, :-1], atol=1e-6)


def test_spec_validation():
    with pytest.raises(InvalidSpecError):
        SyntheticSpec(height=4, width=4).validate()
    with pytest.raises(InvalidSpecError):
        SyntheticSpec(velocity=(8, 0)).validate()
    with pytest.raises(InvalidSpecError):
        SyntheticSpec(pattern="checker").validate()


def test_generation_deterministic():
    spec = SyntheticSpec(pattern="two-layer-parallax", velocity=(1.5, -0.5), frames=4, noise=0.02, seed=9)
    a, _ = generate_synthetic(spec)
    b, _ = generate_synthetic(spec)
    assert a.data.tobytes() == b.data.tobytes()
    c1 = make_corpus(3, 5, frames=3, size=16)
    c2 = make_corpus(3, 5, frames=3, size=16)
    assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(c1, c2))


def test_split_counts():
    e, o = split_even_odd(VideoClip(np.zeros((7, 4, 4))))
    assert (e.frame_count, o.frame_count) == (4, 3)
    e, o = split_even_odd(VideoClip(np.zeros((2, 4, 4))))
    assert (e.frame_count, o.frame_count) == (1, 1)
    with pytest.raises(InvalidLengthError):
        split_even_odd(VideoClip(np.zeros((1, 4, 4))))


@given(st.integers(2, 9), st.integers(0, 2**31 - 1))
def test_split_merge_bijection(n, seed):
    clip = VideoClip(np.random.default_rng(seed).random((n, 3, 5)))
    e, o = split_even_odd(clip)
    assert e.frame_count == (n + 1) // 2 and o.frame_count == n // 2
    assert merge_even_odd(e, o).data.tobytes() == clip.data.tobytes()


def test_pad_to_group():
    clip = VideoClip(np.arange(5)[:, None, None] * np.ones((5, 2, 2)) / 10)
    padded, valid = pad_to_group(clip, 7)
    assert padded.frame_count == 7 and valid == 5
    np.testing.assert_array_equal(padded.data[5], clip.data[4])
    same, valid = pad_to_group(VideoClip(np.zeros((7, 2, 2))), 7)
    assert same.frame_count == 7 and valid == 7
