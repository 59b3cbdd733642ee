"""Flow-field algebra on dense 2-D displacement maps.

Conventions used throughout the package:

* images are ``(H, W)`` float arrays (rows = depth/axial, cols = lateral),
  optionally with a trailing channel axis ``(H, W, C)``;
* flow fields are ``(H, W, 2)`` float arrays holding ``(dx, dy)`` in pixels;
* ``warp(image, flow)[P] = image[P + flow[P]]`` (backward sampling), so a field
  that maps a deformed frame back to the reference frame recovers the
  reference image;
* resampling uses the align-corners convention: corner pixel centres map to
  corner pixel centres.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_SPACING_MM = 45.0 / 384.0
EPE_THRESHOLDS_PX = (10.0, 15.0, 20.0)


class ShapeError(ValueError):
    """Raised when arrays that must agree in size do not."""


@dataclass(frozen=True)
class EpeStats:
    mean: float
    sd: float
    max: float
    per10: float
    per15: float
    per20: float


def check_flow(flow: np.ndarray) -> np.ndarray:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ShapeError(f"flow must have shape (H, W, 2), got {flow.shape}")
    if flow.shape[0] < 2 or flow.shape[1] < 2:
        raise ShapeError(f"flow must be at least 2x2, got {flow.shape[:2]}")
    return flow


def _same_grid(a: np.ndarray, b: np.ndarray, what: str = "arrays") -> None:
    if a.shape[:2] != b.shape[:2]:
        raise ShapeError(f"{what} differ in size: {a.shape[:2]} vs {b.shape[:2]}")


def bilinear_sample(src, sx, sy):
    """Sample ``src`` (N, C, H, W) at absolute coordinates ``sx, sy`` (N, H', W').

    Coordinates are clamped to the image border. Returns the samples
    ``(N, C, H', W')`` together with the interpolation state needed for
    gradients: integer corners, fractional weights and in-range masks.
    """
    n, c, h, w = src.shape
    cx = np.clip(sx, 0.0, w - 1.0)
    cy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(cx), w - 2).astype(np.intp)
    y0 = np.minimum(np.floor(cy), h - 2).astype(np.intp)
    wx = (cx - x0).astype(src.dtype)
    wy = (cy - y0).astype(src.dtype)

    bidx = np.arange(n)[:, None, None]
    flat = src.reshape(n, c, h * w)
    base = y0 * w + x0

    def gather(offset):
        idx = (base + offset).reshape(n, -1)
        vals = np.take_along_axis(flat, idx[:, None, :], axis=2)
        return vals.reshape((n, c) + sx.shape[1:])

    v00, v01, v10, v11 = gather(0), gather(1), gather(w), gather(w + 1)
    wx_ = wx[:, None]
    wy_ = wy[:, None]
    out = (1 - wy_) * ((1 - wx_) * v00 + wx_ * v01) + wy_ * ((1 - wx_) * v10 + wx_ * v11)
    state = {
        "x0": x0,
        "y0": y0,
        "wx": wx,
        "wy": wy,
        "corners": (v00, v01, v10, v11),
        "inside_x": (sx > 0.0) & (sx < w - 1.0),
        "inside_y": (sy > 0.0) & (sy < h - 1.0),
        "bidx": bidx,
    }
    return out, state


def _as_nchw(image: np.ndarray) -> tuple[np.ndarray, bool]:
    if image.ndim == 2:
        return image[None, None], True
    if image.ndim == 3:
        return np.moveaxis(image, 2, 0)[None], False
    raise ShapeError(f"image must be (H, W) or (H, W, C), got {image.shape}")


def warp(image: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Backward-warp ``image`` by ``flow`` with bilinear sampling.

    ``out[y, x] = image(x + dx[y, x], y + dy[y, x])``; sample positions that
    leave the image are clamped to the border.
    """
    flow = check_flow(flow)
    image = np.asarray(image)
    _same_grid(image, flow, "image and flow")
    dtype = np.result_type(image.dtype, np.float32)
    src, single = _as_nchw(image.astype(dtype, copy=False))
    h, w = flow.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    out, _ = bilinear_sample(src, (xs + flow[..., 0])[None], (ys + flow[..., 1])[None])
    if single:
        return out[0, 0]
    return np.moveaxis(out[0], 0, 2)


def compose_flows(f_1m: np.ndarray, f_m2: np.ndarray) -> np.ndarray:
    """Chain two fields: ``f_1m + warp(f_m2, f_1m)``."""
    f_1m = check_flow(f_1m)
    f_m2 = check_flow(f_m2)
    _same_grid(f_1m, f_m2, "flows")
    return f_1m + warp(f_m2, f_1m)


def resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Align-corners linear interpolation matrix of shape (n_out, n_in)."""
    mat = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        mat[:, 0] = 1.0
        return mat
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(np.floor(pos).astype(np.intp), n_in - 2)
    frac = pos - i0
    rows = np.arange(n_out)
    mat[rows, i0] += 1.0 - frac
    mat[rows, i0 + 1] += frac
    return mat


def resize(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear (align-corners) resize of an (H, W) or (H, W, C) array."""
    arr = np.asarray(arr)
    dtype = np.result_type(arr.dtype, np.float32)
    ry = resize_matrix(arr.shape[0], height, dtype)
    rx = resize_matrix(arr.shape[1], width, dtype)
    if arr.ndim == 2:
        return ry @ arr.astype(dtype) @ rx.T
    planes = [ry @ arr[..., c].astype(dtype) @ rx.T for c in range(arr.shape[2])]
    return np.stack(planes, axis=2)


def scale_flow_up(flow: np.ndarray, c_s: int) -> np.ndarray:
    """Upsample a field by integer factor ``c_s`` and multiply vectors by ``c_s``."""
    flow = check_flow(flow)
    if int(c_s) != c_s or c_s < 2:
        raise ValueError(f"scale factor must be an integer >= 2, got {c_s}")
    h, w = flow.shape[:2]
    return resize(flow, h * c_s, w * c_s) * c_s


def scale_flow_down(flow: np.ndarray, factor: int) -> np.ndarray:
    """Downsample a field by ``factor`` with vectors rescaled to the new grid."""
    flow = check_flow(flow)
    h, w = flow.shape[:2]
    if factor < 1 or h % factor or w % factor:
        raise ShapeError(f"factor {factor} does not divide flow size {(h, w)}")
    if factor == 1:
        return flow.copy()
    return resize(flow, h // factor, w // factor) / factor


def invert_flow(flow: np.ndarray, iterations: int = 20, tol: float = 0.05) -> np.ndarray:
    """Fixed-point inverse of a backward-warp field.

    Returns ``v`` with ``v(Q) + flow(Q + v(Q)) ~= 0``, so that
    ``warp(warp(img, v), flow) ~= img`` wherever the composition stays in bounds.
    Iteration stops after ``iterations`` steps or once the update is below
    ``tol`` pixels everywhere.
    """
    flow = check_flow(flow)
    inv = -flow.copy()
    for _ in range(iterations):
        new = -warp(flow, inv)
        step = np.max(np.abs(new - inv)) if new.size else 0.0
        inv = new
        if step < tol:
            break
    return inv


def epe(pred: np.ndarray, gt: np.ndarray, thresholds=EPE_THRESHOLDS_PX):
    """Per-pixel end-point error map and its summary statistics.

    ``thresholds`` are the three pixel distances behind ``per10``, ``per15``
    and ``per20`` (fractions of pixels whose error exceeds each one).
    """
    pred = check_flow(pred)
    gt = check_flow(gt)
    _same_grid(pred, gt, "flows")
    err = np.sqrt(np.sum((np.asarray(pred, np.float64) - gt) ** 2, axis=2))
    t10, t15, t20 = thresholds
    stats = EpeStats(
        mean=float(err.mean()),
        sd=float(err.std()),
        max=float(err.max()),
        per10=float(np.mean(err > t10)),
        per15=float(np.mean(err > t15)),
        per20=float(np.mean(err > t20)),
    )
    return err, stats


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Zero-mean normalised cross-correlation of two equally sized images."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"images differ in size: {a.shape} vs {b.shape}")
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt(np.sum(da * da) * np.sum(db * db))
    if denom == 0.0:
        raise ValueError("correlation undefined for a constant image")
    return float(np.clip(np.sum(da * db) / denom, -1.0, 1.0))


def make_colorwheel() -> np.ndarray:
    """Middlebury colour wheel, (55, 3) RGB rows in [0, 255]."""
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((ry + yg + gc + cb + bm + mr, 3))
    col = 0
    wheel[col:col + ry, 0] = 255
    wheel[col:col + ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col:col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col:col + yg, 1] = 255
    col += yg
    wheel[col:col + gc, 1] = 255
    wheel[col:col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col:col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col:col + cb, 2] = 255
    col += cb
    wheel[col:col + bm, 2] = 255
    wheel[col:col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col:col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col:col + mr, 0] = 255
    return wheel


def wheel_position(flow: np.ndarray) -> np.ndarray:
    """Fractional colour-wheel index in [0, ncols - 1] for every vector."""
    ncols = make_colorwheel().shape[0]
    angle = np.arctan2(-flow[..., 1], -flow[..., 0]) / np.pi
    return (angle + 1) / 2 * (ncols - 1)


def flow_to_color(flow: np.ndarray, max_magnitude: float | None = None) -> np.ndarray:
    """Encode a field as an RGB uint8 image with the Middlebury colour wheel.

    Hue follows the vector direction, saturation the magnitude relative to
    ``max_magnitude`` (default: the field's own maximum). Zero vectors are white.
    """
    flow = check_flow(flow).astype(np.float64)
    mag = np.sqrt(np.sum(flow ** 2, axis=2))
    if max_magnitude is None:
        max_magnitude = float(mag.max())
    rad = mag / max_magnitude if max_magnitude > 0 else np.zeros_like(mag)

    wheel = make_colorwheel()
    ncols = wheel.shape[0]
    fk = wheel_position(flow)
    k0 = np.floor(fk).astype(np.intp)
    k1 = (k0 + 1) % ncols
    f = fk - k0

    img = np.empty(flow.shape[:2] + (3,), dtype=np.uint8)
    for i in range(3):
        col = ((1 - f) * wheel[k0, i] + f * wheel[k1, i]) / 255.0
        inside = rad <= 1
        col = np.where(inside, 1 - rad * (1 - col), col * 0.75)
        img[..., i] = np.floor(255 * col).astype(np.uint8)
    return img
