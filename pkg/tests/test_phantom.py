import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import smooth_field, smooth_image
from defcor.fields import compose_flows, ncc, warp
from defcor.phantom import (
    Inclusion, Layer, PhantomSpec, SubjectSampler, augment, build_gt_flow, compression_field,
    make_axial_ramp_field, make_elastic_field, render_phantom, simulate_compression)
from defcor import io


def layered_spec(**kw):
    layers = (Layer(0.1, 0.02, 150, 0.2), Layer(0.4, 0.1, 60, 0.3),
              Layer(0.7, 0.03, 120, 0.3), Layer(1.0, 0.02, 90, 0.3))
    args = dict(width=64, height=96, layers=layers, inclusion=Inclusion(32, 70, 8), rng_seed=5)
    args.update(kw)
    return PhantomSpec(**args)


def test_ramp_field_values():
    assert np.array_equal(make_axial_ramp_field(5, 6, 0), np.zeros((6, 5, 2)))
    f = make_axial_ramp_field(320, 385, 70)
    assert np.all(f[..., 0] == 0)
    assert f[-1, 0, 1] == pytest.approx(70) and f[0, 0, 1] == 0
    assert f[192, 0, 1] == pytest.approx(35)


def test_elastic_field_determinism_and_scale():
    assert np.array_equal(make_elastic_field(20, 30, 0, 4, 1), np.zeros((30, 20, 2)))
    a = make_elastic_field(40, 50, 8, 10, 3)
    assert np.array_equal(a, make_elastic_field(40, 50, 8, 10, 3))
    assert not np.array_equal(a, make_elastic_field(40, 50, 8, 10, 4))
    assert np.abs(a).max() == pytest.approx(8)


def test_render_is_deterministic():
    a = render_phantom(layered_spec())
    b = render_phantom(layered_spec())
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert 0 <= a[0].min() and a[0].max() <= 255


def test_zero_speckle_gives_piecewise_constant_layers():
    layers = tuple(Layer(d, 0.05, i, 0.0) for d, i in ((0.3, 100), (0.6, 50), (1.0, 200)))
    spec = PhantomSpec(32, 48, layers, interface_gain=0.0, attenuation=0.0)
    img, mask, lines = render_phantom(spec)
    assert set(np.unique(img)) == {100.0, 50.0, 200.0}
    assert not mask.any() and len(lines) == 2


def test_mask_area_matches_disk():
    spec = layered_spec(inclusion=Inclusion(32, 60, 12.3))
    _, mask, _ = render_phantom(spec)
    assert abs(mask.sum() - np.pi * 12.3**2) <= 0.02 * np.pi * 12.3**2


def test_invalid_specs_rejected():
    with pytest.raises(ValueError):
        layered_spec(inclusion=Inclusion(3, 50, 8))
    with pytest.raises(ValueError):
        PhantomSpec(10, 10, (Layer(0.6, 0.1, 1, 0), Layer(0.5, 0.1, 1, 0)))
    with pytest.raises(ValueError):
        PhantomSpec(10, 10, (Layer(1.0, -0.1, 1, 0),))


def test_zero_force_is_exact_identity():
    spec = layered_spec()
    img, _, _ = render_phantom(spec)
    deformed, gt = simulate_compression(spec, img, 0.0)
    assert np.array_equal(deformed, img) and not gt.any()
    with pytest.raises(ValueError):
        simulate_compression(spec, img, -1.0)


def test_displacement_grows_with_force():
    spec = layered_spec()
    means = [np.abs(compression_field(spec, f)[..., 1]).mean() for f in range(1, 7)]
    assert all(b > a for a, b in zip(means, means[1:]))


def test_rigid_inclusion_moves_as_one_per_column():
    spec = layered_spec()
    _, mask, _ = render_phantom(spec)
    dy = compression_field(spec, 5.0)[..., 1]
    for x in np.nonzero(mask.any(axis=0))[0]:
        assert np.ptp(dy[mask[:, x], x]) == 0.0


def test_skin_line_stays_fixed():
    gt = compression_field(layered_spec(), 6.0)
    assert np.all(gt[0, :, 1] == 0)
    assert np.all(gt[..., 1] <= 0)


@pytest.mark.parametrize("seed", range(4))
def test_generated_samples_are_self_consistent(seed):
    spec = SubjectSampler().draw(0.78, seed)
    img, _, _ = render_phantom(spec)
    deformed, gt = simulate_compression(spec, img, 6.0)
    assert ncc(warp(deformed, gt), img) >= 0.95


def test_augment_flip_and_crop():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 255, (384, 320))
    flow = rng.normal(size=(384, 320, 2))
    a, b = augment(img, flow, 320, True, 0)
    a2, b2 = augment(a, b, 320, True, 0)
    assert np.array_equal(a2, img) and np.array_equal(b2, flow)
    ci, cf = augment(img, flow, 256, False, 3)
    assert ci.shape == (384, 256) and cf.shape == (384, 256, 2)
    axial = np.zeros_like(flow)
    axial[..., 1] = rng.normal(size=(384, 320))
    _, fa = augment(img, axial, 320, True, 0)
    assert np.all(fa[..., 0] == 0) and np.array_equal(fa[..., 1], axial[:, ::-1, 1])
    with pytest.raises(ValueError):
        augment(img, flow, 321, False, 0)


@settings(max_examples=10, deadline=None)
@given(st.booleans(), st.integers(16, 48), st.integers(0, 1000))
def test_augment_preserves_warp_relation(flip, crop, seed):
    rng = np.random.default_rng(seed)
    original = smooth_image(rng, 32, 48)
    flow = smooth_field(rng, 32, 48, 2.0, sigma=4.0)
    deformed = warp(original, -flow)
    aug_def, aug_flow = augment(deformed, flow, crop, flip, seed)
    aug_orig, _ = augment(original, flow, crop, flip, seed)
    ref, _ = augment(warp(deformed, flow), flow, crop, flip, seed)
    recovered = warp(aug_def, aug_flow)
    inner = (slice(3, -3), slice(3, -3))
    assert np.mean(np.abs(recovered - ref)[inner]) <= 2.0
    assert aug_orig.shape == recovered.shape


def test_build_gt_flow(tmp_path):
    rng = np.random.default_rng(2)
    f = smooth_field(rng, 16, 16, 2.0)
    assert np.array_equal(build_gt_flow([f]), f)
    assert not build_gt_flow([np.zeros((8, 8, 2))] * 3).any()
    a, b = make_axial_ramp_field(16, 32, 3.0), make_axial_ramp_field(16, 32, 2.0)
    io.write_flow(tmp_path / "a.dff", a)
    io.write_flow(tmp_path / "b.dff", b)
    out = build_gt_flow([tmp_path / "a.dff", tmp_path / "b.dff"])
    assert np.allclose(out, compose_flows(a, b), atol=1e-5)
    assert np.allclose(out[2:-8], (a + b)[2:-8], atol=0.25)
    with pytest.raises(ValueError):
        build_gt_flow([np.zeros((4, 4, 2)), np.zeros((4, 5, 2))])
