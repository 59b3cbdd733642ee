import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import smooth_field, smooth_image
from defcor.fields import (
    ShapeError, compose_flows, epe, flow_to_color, invert_flow, make_colorwheel, ncc,
    scale_flow_down, scale_flow_up, warp, wheel_position)

finite = st.floats(-50, 50, allow_nan=False, width=64)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 9), st.integers(2, 9)),
              elements=st.floats(0, 255)))
def test_zero_flow_is_exact_identity(img):
    out = warp(img, np.zeros(img.shape + (2,)))
    assert np.array_equal(out, img)


def test_half_pixel_bilinear_sample():
    img = np.array([[0.0, 10.0], [0.0, 10.0]])
    flow = np.zeros((2, 2, 2))
    flow[0, 0] = (0.5, 0.0)
    assert warp(img, flow)[0, 0] == pytest.approx(5.0)


def test_integer_shift_is_exact_in_interior(rng):
    img = rng.uniform(0, 255, (12, 10))
    flow = np.zeros((12, 10, 2))
    flow[..., 0], flow[..., 1] = 2, -1
    out = warp(img, flow)
    assert np.array_equal(out[1:, :-2], img[:-1, 2:])


def test_out_of_range_samples_clamp_to_border():
    img = np.arange(12.0).reshape(3, 4)
    flow = np.zeros((3, 4, 2))
    flow[..., 0] = 100.0
    assert np.array_equal(warp(img, flow), np.repeat(img[:, -1:], 4, axis=1))


def test_warp_rejects_mismatched_shapes():
    with pytest.raises(ShapeError):
        warp(np.zeros((4, 4)), np.zeros((4, 5, 2)))


def test_warp_multichannel_matches_per_channel(rng):
    img = rng.uniform(0, 1, (6, 7, 3))
    flow = smooth_field(rng, 6, 7, 2.0)
    out = warp(img, flow)
    for c in range(3):
        assert np.allclose(out[..., c], warp(img[..., c], flow))


def test_compose_trivial_cases(rng):
    zero = np.zeros((8, 8, 2))
    assert np.array_equal(compose_flows(zero, zero), zero)
    f = smooth_field(rng, 8, 8, 3.0)
    assert np.allclose(compose_flows(zero, f), f)
    assert np.allclose(compose_flows(f, zero), f)
    a, b = zero.copy(), zero.copy()
    a[..., 1], b[..., 1] = 1.5, -0.25
    assert np.allclose(compose_flows(a, b)[..., 1], 1.25)


def test_compose_matches_sequential_warps(rng):
    # image as smooth as the fields; rougher content adds double-resampling blur
    img = smooth_image(rng, 16, 16, sigma=3.0) / 255.0
    f1 = smooth_field(rng, 16, 16, 1.5)
    f2 = smooth_field(rng, 16, 16, 1.5)
    seq = warp(warp(img, f2), f1)
    once = warp(img, compose_flows(f1, f2))
    assert np.mean(np.abs(seq - once)) <= 2 / 255


def test_compose_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        compose_flows(np.zeros((4, 4, 2)), np.zeros((4, 6, 2)))


def test_scale_up_constant_and_zero():
    f = np.zeros((4, 5, 2))
    f[..., 0], f[..., 1] = 1.0, -2.0
    up = scale_flow_up(f, 2)
    assert up.shape == (8, 10, 2)
    assert np.allclose(up[..., 0], 2.0) and np.allclose(up[..., 1], -4.0)
    assert np.array_equal(scale_flow_up(np.zeros((4, 4, 2)), 2), np.zeros((8, 8, 2)))


def test_scale_down_constant_and_errors():
    f = np.zeros((8, 6, 2))
    f[..., 0], f[..., 1] = 4.0, 8.0
    down = scale_flow_down(f, 2)
    assert down.shape == (4, 3, 2)
    assert np.allclose(down[..., 0], 2.0) and np.allclose(down[..., 1], 4.0)
    with pytest.raises(ShapeError):
        scale_flow_down(np.zeros((9, 6, 2)), 2)
    with pytest.raises(ValueError):
        scale_flow_up(f, 1)


def test_linear_ramp_roundtrip_interior():
    ys, xs = np.mgrid[0:16, 0:12].astype(np.float64)
    f = np.stack([0.3 * xs - 0.1 * ys + 1, 0.2 * ys + 0.05 * xs], axis=2)
    back = scale_flow_down(scale_flow_up(f, 2), 2)
    assert np.max(np.abs(back - f)[1:-1, 1:-1]) <= 1e-6


def test_invert_flow_cancels(rng):
    img = smooth_image(rng, 32, 32, sigma=5.0)
    f = smooth_field(rng, 32, 32, 3.0, sigma=5.0)
    v = invert_flow(f)
    assert np.abs(compose_flows(v, f)).max() <= 0.05
    back = warp(warp(img, v), f)
    assert np.mean(np.abs(back - img)[4:-4, 4:-4]) < 1.0


def test_epe_oracles():
    gt = np.zeros((5, 6, 2))
    err, stats = epe(gt, gt)
    assert np.all(err == 0) and stats.mean == 0
    pred = gt.copy()
    pred[..., 0], pred[..., 1] = 3.0, 4.0
    err, stats = epe(pred, gt)
    assert np.all(err == 5.0) and stats.mean == 5.0 and stats.per10 == 0.0


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (4, 5, 2), elements=finite), arrays(np.float64, (4, 5, 2), elements=finite))
def test_epe_symmetric_and_ordered(a, b):
    ea, sa = epe(a, b)
    eb, sb = epe(b, a)
    assert np.array_equal(ea, eb)
    assert sa.per10 >= sa.per15 >= sa.per20
    assert sa.mean <= sa.max + 1e-12
    assert epe(a, a)[1].mean == 0


def test_ncc_oracles(rng):
    a = rng.uniform(0, 255, (10, 10))
    assert ncc(a, a) == pytest.approx(1.0)
    assert ncc(a, 255 - a) == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        ncc(np.full((4, 4), 3.0), a[:4, :4])


def test_flow_color_zero_is_white():
    assert np.all(flow_to_color(np.zeros((5, 5, 2))) == 255)


def test_flow_color_constant_is_uniform():
    f = np.zeros((4, 4, 2))
    f[..., 0] = 2.0
    img = flow_to_color(f)
    assert np.all(img == img[0, 0]) and not np.all(img[0, 0] == 255)


@settings(max_examples=40, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10))
def test_opposite_vectors_sit_half_a_wheel_apart(dx, dy):
    if np.hypot(dx, dy) < 1e-3:
        return
    f = np.zeros((2, 2, 2))
    f[..., 0], f[..., 1] = dx, dy
    n = make_colorwheel().shape[0] - 1
    diff = (wheel_position(f) - wheel_position(-f)) % n
    assert np.allclose(np.minimum(diff, n - diff), n / 2)
