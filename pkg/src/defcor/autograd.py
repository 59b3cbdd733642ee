"""A small reverse-mode differentiation engine over numpy arrays.

Only the operations the deformation network needs are provided. Every
operation keeps the dtype of its inputs, so the same graph can run in
float32 for training and float64 for gradient checks.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .fields import bilinear_sample, resize_matrix

LEAKY_SLOPE = 0.01


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, parents=parents if req else (),
                  backward=backward if req else None)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise -----------------------------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def absolute(a):
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def charbonnier(a, eps):
    """``sqrt(a**2 + eps**2)``, a smooth stand-in for ``|a|``."""
    out = np.sqrt(a.data * a.data + a.dtype.type(eps) ** 2)
    return _make(out, (a,), lambda g: (g * a.data / out,))


def leaky_relu(a, slope=LEAKY_SLOPE):
    slope = a.dtype.type(slope)
    scale = np.where(a.data > 0, a.dtype.type(1), slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


def getitem(a, key):
    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _make(a.data[key], (a,), backward)


def total(a):
    return _make(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a):
    n = a.data.size
    return _make(a.data.mean(), (a,),
                 lambda g: (np.broadcast_to(g / a.dtype.type(n), a.shape).copy(),))


def concat(tensors, axis=1):
    tensors = [_wrap(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# spatial ---------------------------------------------------------------------

def conv2d(x, w, b=None, padding=None):
    """2-D cross-correlation of ``x`` (N, C, H, W) with ``w`` (O, C, kh, kw).

    Zero padding defaults to ``kh // 2`` so 'same'-sized outputs result for
    odd kernels.
    """
    x, w = _wrap(x), _wrap(w)
    o, c, kh, kw = w.shape
    if x.shape[1] != c:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, kernel expects {c}")
    p = kh // 2 if padding is None else padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    n, _, hp, wp = xp.shape
    h, wd = hp - kh + 1, wp - kw + 1
    # columns laid out (C, kh, kw, N, H, W) so copies run along contiguous rows
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3)).transpose(1, 4, 5, 0, 2, 3)
    cols = np.ascontiguousarray(cols).reshape(c * kh * kw, n * h * wd)
    wmat = w.data.reshape(o, c * kh * kw)
    out = (wmat @ cols).reshape(o, n, h, wd)
    parents = (x, w)
    if b is not None:
        b = _wrap(b)
        out = out + b.data[:, None, None, None]
        parents = (x, w, b)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * h * wd)
        gw = (gmat @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gmat).reshape(c, kh, kw, n, h, wd)
            gxp = np.zeros((c, n, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + h, j:j + wd] += dcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, p:p + x.shape[2], p:p + x.shape[3]] if p else gxp
            gx = np.ascontiguousarray(gx)
        grads = (gx, gw)
        if b is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    return _make(out, parents, backward)


def max_pool2x(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2x needs even spatial size, got {(h, w)}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        onehot = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        gx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return _make(out, (x,), backward)


def resize_bilinear(x, height, width):
    """Align-corners bilinear resize of (N, C, H, W) to ``(height, width)``."""
    ry = resize_matrix(x.shape[2], height, x.dtype)
    rx = resize_matrix(x.shape[3], width, x.dtype)
    out = ry @ x.data @ rx.T
    return _make(out, (x,), lambda g: (ry.T @ g @ rx,))


def upsample2x(x):
    return resize_bilinear(x, 2 * x.shape[2], 2 * x.shape[3])


def warp(x, flow):
    """Backward bilinear warp of ``x`` (N, C, H, W) by ``flow`` (N, 2, H, W).

    Differentiable in both the image and the flow; sample positions are
    clamped to the border, where the flow gradient is zero.
    """
    x, flow = _wrap(x), _wrap(flow)
    n, c, h, w = x.shape
    if flow.shape != (n, 2, h, w):
        raise ValueError(f"warp: flow shape {flow.shape} does not match image {x.shape}")
    ys, xs = np.mgrid[0:h, 0:w]
    sx = xs + flow.data[:, 0]
    sy = ys + flow.data[:, 1]
    out, st = bilinear_sample(x.data, sx, sy)

    def backward(g):
        v00, v01, v10, v11 = st["corners"]
        wx, wy = st["wx"][:, None], st["wy"][:, None]
        gflow = None
        if flow.requires_grad:
            dsx = ((1 - wy) * (v01 - v00) + wy * (v11 - v10))
            dsy = ((1 - wx) * (v10 - v00) + wx * (v11 - v01))
            gflow = np.stack([(g * dsx).sum(axis=1) * st["inside_x"],
                              (g * dsy).sum(axis=1) * st["inside_y"]], axis=1).astype(g.dtype)
        gx = None
        if x.requires_grad:
            base = (st["y0"] * w + st["x0"])[:, None]  # N, 1, H, W
            chan = (np.arange(n)[:, None] * c + np.arange(c)[None, :]) * (h * w)
            base = base + chan[:, :, None, None]
            size = n * c * h * w
            acc = np.zeros(size, dtype=np.float64)
            for offset, weight in ((0, (1 - wx) * (1 - wy)), (1, wx * (1 - wy)),
                                   (w, (1 - wx) * wy), (w + 1, wx * wy)):
                acc += np.bincount((base + offset).ravel(), weights=(g * weight).ravel(),
                                   minlength=size)
            gx = acc.reshape(x.shape).astype(g.dtype)
        return gx, gflow

    return _make(out, (x, flow), backward)


def polynomial_field(h, force, coeffs):
    """Force-scaled polynomial displacement regression.

    ``h`` is a (N, 1, H, W) stiffness map, ``force`` a length-N array and
    ``coeffs`` a (2, p) tensor whose rows hold the lateral and axial
    coefficients for the basis ``[h**(p-1), ..., h, 1]``. Returns the
    (N, 2, H, W) field ``force * coeffs @ basis(h)``.
    """
    h, coeffs = _wrap(h), _wrap(coeffs)
    if h.data.ndim != 4 or h.shape[1] != 1:
        raise ValueError(f"stiffness map must be (N, 1, H, W), got {h.shape}")
    if coeffs.data.ndim != 2 or coeffs.shape[0] != 2:
        raise ValueError(f"coefficients must be (2, p), got {coeffs.shape}")
    p = coeffs.shape[1]
    hv = h.data
    basis = np.stack([hv ** (p - 1 - j) for j in range(p)], axis=0)  # p, N, 1, H, W
    fscale = np.asarray(force, dtype=hv.dtype).reshape(-1, 1, 1, 1)
    poly = np.tensordot(coeffs.data, basis, axes=(1, 0))  # 2, N, 1, H, W
    out = np.ascontiguousarray((fscale[None] * poly)[:, :, 0].transpose(1, 0, 2, 3))

    def backward(g):
        gf = g * fscale  # N, 2, H, W
        gcoef = np.einsum("nihw,pnhw->ip", gf, basis[:, :, 0]) if coeffs.requires_grad else None
        gh = None
        if h.requires_grad:
            dbasis = np.stack([(p - 1 - j) * hv ** max(p - 2 - j, 0) if j < p - 1
                               else np.zeros_like(hv) for j in range(p)], axis=0)
            dpoly = np.tensordot(coeffs.data, dbasis, axes=(1, 0))[:, :, 0]  # 2, N, H, W
            gh = (gf * dpoly.transpose(1, 0, 2, 3)).sum(axis=1, keepdims=True)
        return gh, gcoef

    return _make(out, (h, coeffs), backward)
