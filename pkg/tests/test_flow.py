import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import directional_error, grad_errors, to64
from tvrn import tensor as T
from tvrn.coupling import randomize
from tvrn.errors import InvalidGeometryError, InvalidShapeError, InvalidTimeError
from tvrn.flow import (LEVELS, ContextExtractor, HFModule, HFUNet, backward_warp, backward_warp_np, block_flow,
                       combine, downscale_flow, forward_warp, forward_warp_np, hf_initial, hf_synthesize,
                       scale_flow)
from tvrn.tensor import Tensor
from tvrn.video import SyntheticSpec, generate_synthetic


def _shifted(rng, dx, size=32):
    a = rng.random((size, size))
    return a, np.roll(a, dx, axis=1)


def test_block_flow_identical(rng):
    a = rng.random((16, 16))
    f01, f10 = block_flow(a, a)
    assert not f01.any() and not f10.any()


def test_block_flow_integer_shift(rng):
    a, b = _shifted(rng, 3)
    f01, f10 = block_flow(a, b)
    np.testing.assert_allclose(f01[0][:, 8:-8], 3)
    np.testing.assert_allclose(f10[0][:, 8:-8], -3)
    np.testing.assert_allclose(f01[1], 0)


def test_block_flow_bounded_on_noise(rng):
    f01, f10 = block_flow(rng.random((32, 32)), rng.random((32, 32)))
    assert np.abs(f01).max() <= 7 and np.abs(f10).max() <= 7


def test_scale_flow():
    F = np.zeros((2, 4, 4))
    F[0] = 2
    a, b = scale_flow(F, -F, 0.5)
    np.testing.assert_array_equal(a[0], 1)
    z = np.zeros_like(F)
    assert not any(x.any() for x in scale_flow(z, z, 0.3))
    _, b = scale_flow(F, -F, 1 - 1e-12)
    assert np.abs(b).max() < 1e-9
    for t in (0.0, 1.0, -0.5):
        with pytest.raises(InvalidTimeError):
            scale_flow(F, F, t)
    t = 0.37
    np.testing.assert_array_equal(scale_flow(F, F, t)[0], t * F)


def test_zero_flow_identity(rng):
    img = rng.random((8, 8))
    z = np.zeros((2, 8, 8))
    np.testing.assert_allclose(backward_warp_np(img, z), img)
    out, holes = forward_warp_np(img, z)
    np.testing.assert_allclose(out, img)
    assert not holes.any()


def test_forward_warp_integer_shift(rng):
    img = rng.random((8, 8))
    flow = np.zeros((2, 8, 8))
    flow[0] = 2
    out, holes = forward_warp_np(img, flow)
    np.testing.assert_allclose(out[:, 2:], img[:, :-2])
    assert holes[:, :2].all() and not holes[:, 2:].any()
    np.testing.assert_array_equal(out[:, :2], 0)


@given(st.integers(0, 2**31 - 1))
def test_warps_are_linear(seed):
    r = np.random.default_rng(seed)
    flow = r.uniform(-3, 3, (2, 8, 8))
    x, y = r.random((2, 8, 8))
    a, b = r.uniform(-2, 2, 2)
    np.testing.assert_allclose(backward_warp_np(a * x + b * y, flow),
                               a * backward_warp_np(x, flow) + b * backward_warp_np(y, flow), atol=1e-10)
    np.testing.assert_allclose(forward_warp_np(a * x + b * y, flow)[0],
                               a * forward_warp_np(x, flow)[0] + b * forward_warp_np(y, flow)[0], atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_warp_gradients(seed):
    r = np.random.default_rng(seed)
    flows = [r.uniform(-2.5, 2.5, (2, 6, 6))]
    w = r.standard_normal((1, 1, 6, 6))
    x = r.random((1, 1, 6, 6))
    assert grad_errors(lambda t: T.sum_all(T.mul(backward_warp(t, flows), Tensor(w))), [x])[0] < 1e-4
    assert grad_errors(lambda t: T.sum_all(T.mul(forward_warp(t, flows)[0], Tensor(w))), [x])[0] < 1e-4


def test_downscale_flow_levels():
    F = np.full((2, 16, 16), 4.0)
    pyr = downscale_flow(F)
    assert [p.shape[1] for p in pyr] == [16, 8, 4, 2]
    assert [p[0, 0, 0] for p in pyr] == [4, 2, 1, 0.5]
    with pytest.raises(InvalidGeometryError):
        downscale_flow(np.zeros((2, 6, 6)))


def test_hf_initial_static_and_symmetric(rng):
    a = rng.random((16, 16))
    z, h0, h1 = hf_initial(a, a)
    assert not z.any()
    # identical frames with a nonzero flow estimate still cancel
    flow = np.zeros((2, 16, 16))
    flow[0] = 1.5
    np.testing.assert_allclose(forward_warp_np(a, flow)[0] - forward_warp_np(a, flow)[0], 0)


def test_hf_initial_translating_rectangle():
    clip, _ = generate_synthetic(SyntheticSpec(pattern="translating-rectangle", velocity=(2, 0), frames=3,
                                               height=32, width=32, noise=0.0, seed=11))
    z, h0, h1 = hf_initial(clip.data[0], clip.data[2])
    holes = (h0 + h1) > 0
    # away from holes the two half-way warps agree closely
    assert np.abs(z[~holes]).mean() < 0.25 * np.abs(clip.data[2] - clip.data[0]).mean() + 1e-3


def test_combine_algebra(rng):
    z = Tensor(rng.standard_normal((1, 1, 4, 4)))
    zero = Tensor(np.zeros((1, 1, 4, 4)))
    np.testing.assert_allclose(combine(z, zero, zero).data, 0.5 * z.data, atol=1e-7)
    big = Tensor(np.full((1, 1, 4, 4), 80.0))
    np.testing.assert_allclose(combine(z, big, zero).data, z.data, atol=1e-6)
    m, r = rng.standard_normal((2, 1, 1, 4, 4))
    mp = 1 / (1 + np.exp(-m))
    rp = 2 / (1 + np.exp(-r)) - 1
    np.testing.assert_allclose(combine(z, Tensor(m), Tensor(r)).data, z.data * mp + rp * (1 - mp), atol=1e-6)


def _pyramid(rng, B=1, H=16, dtype=np.float32):
    widths = ContextExtractor.widths
    return [Tensor(rng.standard_normal((B, widths[j], H >> j, H >> j)).astype(dtype)) for j in range(LEVELS)]


def test_hf_synthesize_init_is_half(rng):
    unet = HFUNet(rng)
    z = Tensor(rng.standard_normal((1, 1, 16, 16)))
    holes = (np.zeros((1, 1, 16, 16)), np.zeros((1, 1, 16, 16)))
    out = hf_synthesize(unet, z, holes, _pyramid(rng), _pyramid(rng))
    np.testing.assert_allclose(out.data, 0.5 * z.data, atol=1e-7)


def test_hf_synthesize_shape_checks(rng):
    unet = HFUNet(rng)
    z = Tensor(np.zeros((1, 1, 16, 16)))
    holes = (np.zeros((1, 1, 16, 16)),) * 2
    with pytest.raises(InvalidShapeError):
        hf_synthesize(unet, z, holes, _pyramid(rng)[:3], _pyramid(rng)[:3])
    with pytest.raises(InvalidShapeError):
        hf_synthesize(unet, z, holes, _pyramid(rng, H=32), _pyramid(rng, H=32))


def test_hf_module_geometry(rng):
    hf = HFModule(rng)
    with pytest.raises(InvalidGeometryError):
        hf(Tensor(np.zeros((1, 1, 24, 24))), Tensor(np.zeros((1, 1, 24, 24))))
    a = Tensor(rng.random((2, 1, 16, 16)))
    z, z_init = hf(a, a, return_init=True)
    assert z.shape == (2, 1, 16, 16) and not z_init.data.any()


def test_hf_synthesis_gradient(rng):
    with T.default_dtype(np.float64):
        unet = to64(HFUNet(rng))
        randomize(unet, rng)
    holes = (np.zeros((1, 1, 16, 16)), (rng.random((1, 1, 16, 16)) > 0.8).astype(float))
    c0 = [c.data for c in _pyramid(rng, dtype=np.float64)]
    c1 = [c.data for c in _pyramid(rng, dtype=np.float64)]
    w = rng.standard_normal((1, 1, 16, 16))

    def f(z, *ctx):
        out = hf_synthesize(unet, z, holes, list(ctx[:LEVELS]), list(ctx[LEVELS:]))
        return T.sum_all(T.mul(out, Tensor(w)))

    assert directional_error(f, [rng.standard_normal((1, 1, 16, 16))] + c0 + c1, rng, eps=1e-6) < 1e-4
