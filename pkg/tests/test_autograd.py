"""Analytic gradients against float64 central differences."""
import numpy as np
import pytest

from defcor import autograd as ag

STEP = 1e-5
TOL = 1e-3


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def _smooth_here(f_minus, f_0, f_plus):
    """False when the stencil straddles a kink (one-sided slopes disagree).

    Uses function values only, so it cannot mask a wrong analytic gradient.
    """
    fwd, bwd = (f_plus - f_0) / STEP, (f_0 - f_minus) / STEP
    return abs(fwd - bwd) <= TOL * max(abs(fwd), abs(bwd), 1e-6)


def grad_check(fn, inputs, rng, coords=40):
    """Compare d sum(R * fn(*inputs)) / d input against central differences.

    Checks a random subset of coordinates of every input plus one random
    direction through all of them. Probes whose stencil crosses a
    non-differentiable point (LeakyReLU at 0, bilinear cell edges, pooling
    ties) are replaced by fresh ones; at most a quarter may be replaced.
    """
    tensors = [ag.Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*tensors)
    weights = rng.standard_normal(out.shape)
    ag.total(out * weights).backward()

    def loss(arrays):
        return float(np.sum(fn(*[ag.Tensor(a) for a in arrays]).data * weights))

    f_0 = loss(inputs)
    worst, skipped, probes = 0.0, 0, 0
    for i, x in enumerate(inputs):
        analytic = tensors[i].grad
        assert analytic.shape == x.shape
        want = min(coords, x.size)
        kept, numeric = [], []
        for k in rng.permutation(x.size):
            if len(kept) == want:
                break
            plus, minus = [a.copy() for a in inputs], [a.copy() for a in inputs]
            plus[i].flat[k] += STEP
            minus[i].flat[k] -= STEP
            f_p, f_m = loss(plus), loss(minus)
            probes += 1
            if not _smooth_here(f_m, f_0, f_p):
                skipped += 1
                continue
            kept.append(k)
            numeric.append((f_p - f_m) / (2 * STEP))
        worst = max(worst, rel_err(analytic.ravel()[kept], np.array(numeric)))
    for _ in range(8):
        dirs = [rng.standard_normal(x.shape) for x in inputs]
        f_p = loss([x + STEP * d for x, d in zip(inputs, dirs)])
        f_m = loss([x - STEP * d for x, d in zip(inputs, dirs)])
        probes += 1
        if _smooth_here(f_m, f_0, f_p):
            break
        skipped += 1
    else:
        raise AssertionError("no smooth random direction found")
    numeric = (f_p - f_m) / (2 * STEP)
    analytic = sum(float(np.sum(t.grad * d)) for t, d in zip(tensors, dirs))
    worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12))
    assert skipped <= probes // 4, f"{skipped} of {probes} probes straddled a kink"
    return worst


def img(rng, *shape):
    return rng.standard_normal(shape)


CASES = {
    "add_broadcast": (lambda a, b: a + b, lambda r: [img(r, 2, 3, 4, 6), img(r, 1, 3, 1, 1)]),
    "mul_broadcast": (lambda a, b: a * b, lambda r: [img(r, 2, 3, 4, 6), img(r, 3, 1, 1)]),
    "neg_sub": (lambda a, b: a - b, lambda r: [img(r, 4, 6), img(r, 4, 6)]),
    "absolute": (ag.absolute, lambda r: [img(r, 4, 6)]),
    "charbonnier": (lambda a: ag.charbonnier(a, 1e-3), lambda r: [img(r, 4, 6)]),
    "leaky_relu": (ag.leaky_relu, lambda r: [img(r, 4, 6)]),
    "getitem": (lambda a: a[:, :, 1:, :-2], lambda r: [img(r, 1, 2, 4, 6)]),
    "mean": (lambda a: ag.mean(a) * 1.0, lambda r: [img(r, 4, 6)]),
    "concat": (lambda a, b: ag.concat([a, b], axis=1), lambda r: [img(r, 1, 2, 4, 6), img(r, 1, 1, 4, 6)]),
    "conv2d": (ag.conv2d, lambda r: [img(r, 2, 2, 4, 6), img(r, 3, 2, 3, 3), img(r, 3)]),
    "conv1x1": (ag.conv2d, lambda r: [img(r, 1, 3, 4, 6), img(r, 2, 3, 1, 1), img(r, 2)]),
    "max_pool2x": (ag.max_pool2x, lambda r: [img(r, 1, 2, 4, 6)]),
    "upsample2x": (ag.upsample2x, lambda r: [img(r, 1, 2, 4, 6)]),
    "resize_down": (lambda a: ag.resize_bilinear(a, 2, 3), lambda r: [img(r, 1, 2, 4, 6)]),
    "warp": (ag.warp, lambda r: [img(r, 1, 2, 4, 6), 0.7 * img(r, 1, 2, 4, 6)]),
    "poly_quadratic": (lambda h, c: ag.polynomial_field(h, np.array([1.5, 0.7]), c),
                       lambda r: [img(r, 2, 1, 4, 6), img(r, 2, 3)]),
    "poly_linear": (lambda h, c: ag.polynomial_field(h, np.array([2.0]), c),
                    lambda r: [img(r, 1, 1, 4, 6), img(r, 2, 2)]),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradients(name):
    fn, make = CASES[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(2):
        assert grad_check(fn, make(rng), rng) <= TOL


def test_leaky_relu_values():
    out = ag.leaky_relu(ag.Tensor(np.array([0.0, -1.0, 2.0]))).data
    assert out.tolist() == [0.0, -0.01, 2.0]


def test_dtype_is_preserved():
    x = ag.Tensor(np.ones((1, 1, 4, 4), np.float32), requires_grad=True)
    w = ag.Tensor(np.ones((1, 1, 3, 3), np.float32), requires_grad=True)
    out = ag.total(ag.conv2d(x, w))
    out.backward()
    assert out.dtype == np.float32 and x.grad.dtype == np.float32


def test_gradient_accumulates_over_shared_use():
    a = ag.Tensor(np.array([2.0, 3.0]), requires_grad=True)
    ag.total(a * a + a).backward()
    assert a.grad.tolist() == [5.0, 7.0]


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        (ag.Tensor(np.ones(3), requires_grad=True) * 2.0).backward()


def test_shape_errors():
    with pytest.raises(ValueError):
        ag.warp(ag.Tensor(np.zeros((1, 1, 4, 4))), ag.Tensor(np.zeros((1, 2, 4, 5))))
    with pytest.raises(ValueError):
        ag.conv2d(ag.Tensor(np.zeros((1, 2, 4, 4))), ag.Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        ag.polynomial_field(ag.Tensor(np.zeros((1, 2, 4, 4))), [1.0], ag.Tensor(np.zeros((2, 2))))
