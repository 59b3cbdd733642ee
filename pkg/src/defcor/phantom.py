"""Synthetic B-mode phantoms and force-parameterised ground-truth fields.

A phantom is a stack of tissue layers with (optionally wavy) interfaces and
an optional rigid circular inclusion standing in for bone. Compression is
modelled per column: tissue at depth ``y`` moves towards the probe by the
force times the compliance accumulated above it, so rigid pixels (zero
compliance) share one displacement per column.

Every generator is deterministic given its seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, gaussian_filter1d

from .fields import check_flow, invert_flow, warp


@dataclass(frozen=True)
class Layer:
    depth: float  # lower boundary as a fraction of the image height
    compliance: float  # px of axial displacement per N per row
    intensity: float
    speckle: float
    wave_amp: float = 0.0  # px
    wave_phase: float = 0.0


@dataclass(frozen=True)
class Inclusion:
    cx: float
    cy: float
    radius: float
    intensity: float = 70.0
    rim_intensity: float = 235.0
    compliance: float = 0.0
    shadow: float = 0.3  # multiplicative darkening of the column below


@dataclass(frozen=True)
class PhantomSpec:
    width: int
    height: int
    layers: tuple
    inclusion: Inclusion | None = None
    rng_seed: int = 0
    lateral_coupling: float = 0.1
    attenuation: float = 0.5
    interface_gain: float = 60.0
    lateral_blur: float = 2.0

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise ValueError("phantom must be at least 2x2 pixels")
        if not self.layers:
            raise ValueError("phantom needs at least one layer")
        depths = [layer.depth for layer in self.layers]
        if any(b <= a for a, b in zip(depths, depths[1:])) or not 0 < depths[0] or depths[-1] > 1:
            raise ValueError(f"layer depths must increase strictly within (0, 1], got {depths}")
        if any(layer.compliance < 0 for layer in self.layers):
            raise ValueError("compliances must be non-negative")
        inc = self.inclusion
        if inc is not None:
            if inc.radius <= 0:
                raise ValueError("inclusion radius must be positive")
            if (inc.cx - inc.radius < 0 or inc.cx + inc.radius > self.width - 1
                    or inc.cy - inc.radius < 0 or inc.cy + inc.radius > self.height - 1):
                raise ValueError("inclusion does not fit inside the image")


def make_axial_ramp_field(width: int, height: int, max_disp_px: float) -> np.ndarray:
    """Purely axial field growing linearly from 0 (top row) to ``max_disp_px``."""
    if max_disp_px < 0:
        raise ValueError("max_disp_px must be non-negative")
    flow = np.zeros((height, width, 2))
    flow[..., 1] = (max_disp_px * np.arange(height) / (height - 1))[:, None]
    return flow


def make_elastic_field(width: int, height: int, alpha: float, sigma: float, seed) -> np.ndarray:
    """Random smooth elastic distortion.

    Uniform noise in [-1, 1] per channel is Gaussian-smoothed with std
    ``sigma`` and rescaled so that ``alpha`` is the peak displacement in px.
    """
    if alpha < 0 or sigma <= 0:
        raise ValueError("need alpha >= 0 and sigma > 0")
    rng = np.random.default_rng(seed)
    flow = np.zeros((height, width, 2))
    if alpha == 0:
        return flow
    for ch in range(2):
        smooth = gaussian_filter(rng.uniform(-1.0, 1.0, (height, width)), sigma)
        flow[..., ch] = alpha * smooth / np.max(np.abs(smooth))
    return flow


def interface_rows(spec: PhantomSpec) -> list[np.ndarray]:
    """Row coordinate of every internal layer boundary for each column."""
    x = np.arange(spec.width)
    rows = []
    for layer in spec.layers:
        if layer.depth >= 1.0:
            continue
        y = layer.depth * (spec.height - 1) + layer.wave_amp * np.sin(
            2 * np.pi * x / spec.width + layer.wave_phase)
        rows.append(y)
    return rows


def _label_map(spec: PhantomSpec) -> np.ndarray:
    ys = np.arange(spec.height)[:, None]
    labels = np.zeros((spec.height, spec.width), dtype=np.intp)
    for boundary in interface_rows(spec):
        labels += ys > boundary[None, :]
    return np.minimum(labels, len(spec.layers) - 1)


def inclusion_mask(spec: PhantomSpec) -> np.ndarray:
    mask = np.zeros((spec.height, spec.width), dtype=bool)
    inc = spec.inclusion
    if inc is None:
        return mask
    ys, xs = np.mgrid[0:spec.height, 0:spec.width]
    return (xs - inc.cx) ** 2 + (ys - inc.cy) ** 2 <= inc.radius ** 2


def render_phantom(spec: PhantomSpec):
    """Render ``(image, inclusion mask, interface polylines)`` for ``spec``.

    The image is float64 in [0, 255]; polylines are ``(n, 2)`` arrays of
    ``(x, y)`` points, one per internal layer boundary.
    """
    h, w = spec.height, spec.width
    rng = np.random.default_rng(spec.rng_seed)
    labels = _label_map(spec)
    base = np.array([layer.intensity for layer in spec.layers])[labels]
    amp = np.array([layer.speckle for layer in spec.layers])[labels]

    noise = gaussian_filter(rng.uniform(-1.0, 1.0, (h, w)), 1.0)
    noise /= max(noise.std(), 1e-12)
    img = base * (1.0 + amp * noise)

    ys = np.arange(h)[:, None].astype(np.float64)
    for boundary in interface_rows(spec):
        img += spec.interface_gain * np.exp(-0.5 * (ys - boundary[None, :]) ** 2)

    mask = inclusion_mask(spec)
    inc = spec.inclusion
    if inc is not None:
        xs = np.arange(w)[None, :].astype(np.float64)
        dist = np.sqrt((xs - inc.cx) ** 2 + (ys - inc.cy) ** 2)
        img = np.where(mask, inc.intensity * (1.0 + 0.2 * noise), img)
        rim = mask & (dist >= inc.radius - 2.0) & (ys <= inc.cy)
        img = np.where(rim, inc.rim_intensity, img)
        half = np.sqrt(np.clip(inc.radius ** 2 - (xs - inc.cx) ** 2, 0, None))
        below = (np.abs(xs - inc.cx) < inc.radius) & (ys > inc.cy + half)
        img = np.where(below, img * inc.shadow, img)

    img *= np.exp(-spec.attenuation * ys / h)
    img = np.clip(img, 0.0, 255.0)

    polylines = []
    x = np.arange(2, w - 2, dtype=np.float64)
    for boundary in interface_rows(spec):
        polylines.append(np.stack([x, boundary[2:w - 2]], axis=1))
    return img, mask, polylines


def compliance_map(spec: PhantomSpec) -> np.ndarray:
    """Per-pixel axial compliance (px / N / row), zero inside the inclusion."""
    comp = np.array([layer.compliance for layer in spec.layers], dtype=np.float64)[_label_map(spec)]
    if spec.lateral_blur > 0:
        comp = gaussian_filter1d(comp, spec.lateral_blur, axis=1, mode="nearest")
    if spec.inclusion is not None:
        comp[inclusion_mask(spec)] = spec.inclusion.compliance
    return comp


def compression_field(spec: PhantomSpec, force_n: float) -> np.ndarray:
    """Tissue displacement under ``force_n`` on the uncompressed grid.

    This is the correction field: ``warp(deformed, field) ~= original``.
    """
    comp = compliance_map(spec)
    # compliance strictly above each row, so the skin line stays put
    above = np.zeros_like(comp)
    above[1:] = np.cumsum(comp[:-1], axis=0)
    flow = np.zeros((spec.height, spec.width, 2))
    flow[..., 1] = -force_n * above
    if spec.lateral_coupling:
        xc = (spec.width - 1) / 2.0
        strain = force_n * comp
        bulge = spec.lateral_coupling * strain * (np.arange(spec.width)[None, :] - xc)
        flow[..., 0] = gaussian_filter(bulge, 2.0, mode="nearest")
    return flow


def simulate_compression(spec: PhantomSpec, image: np.ndarray, force_n: float):
    """Deform ``image`` by ``force_n`` N; return ``(deformed, gt correction field)``."""
    if force_n < 0:
        raise ValueError("force must be non-negative")
    image = np.asarray(image, dtype=np.float64)
    if force_n == 0:
        return image.copy(), np.zeros(image.shape + (2,))
    gt = compression_field(spec, force_n)
    deformed = warp(image, invert_flow(gt))
    return deformed, gt


def augment(image: np.ndarray, flow: np.ndarray, crop_width: int, flip: bool, seed):
    """Optional horizontal flip, then a random full-height crop of ``crop_width``."""
    flow = check_flow(flow)
    h, w = flow.shape[:2]
    if image.shape[:2] != (h, w):
        raise ValueError("image and flow differ in size")
    if not 0 < crop_width <= w:
        raise ValueError(f"crop width {crop_width} must be in (0, {w}]")
    rng = np.random.default_rng(seed)
    if flip:
        image = image[:, ::-1]
        flow = flow[:, ::-1].copy()
        flow[..., 0] = -flow[..., 0]
    x0 = int(rng.integers(0, w - crop_width + 1))
    return (np.ascontiguousarray(image[:, x0:x0 + crop_width]),
            np.ascontiguousarray(flow[:, x0:x0 + crop_width]))


def build_gt_flow(chain) -> np.ndarray:
    """Left fold of flow composition over ``chain`` (arrays or DFF1 paths)."""
    from .fields import compose_flows
    from .io import read_flow

    fields = [read_flow(f) if not isinstance(f, np.ndarray) else f for f in chain]
    if not fields:
        raise ValueError("need at least one flow field")
    out = check_flow(fields[0]).astype(np.float64)
    for f in fields[1:]:
        out = compose_flows(out, f)
    return out


@dataclass
class SubjectSampler:
    """Draws anatomically plausible random phantoms for one image size.

    Layer roles (skin, fat, muscle, deep tissue) keep a fixed intensity and
    relative compliance ordering; their depths, undulation and the position
    of the bone-like inclusion vary per draw. Compliances are scaled so the
    whole compressible column (the image covers ``image_fraction`` of it)
    matches the subject's global stiffness.
    """

    width: int = 96
    height: int = 128
    spacing_mm: float = 45.0 / 128
    image_fraction: float = 0.6
    lateral_coupling: float = 0.1
    relative_compliance: tuple = (0.5, 3.0, 0.8, 0.6)
    intensities: tuple = (150.0, 55.0, 120.0, 95.0)
    speckle: tuple = (0.25, 0.35, 0.3, 0.3)
    radius_range: tuple = field(default=(0.08, 0.11))  # fraction of width

    def draw(self, k_g: float, seed) -> PhantomSpec:
        rng = np.random.default_rng(seed)
        skin = rng.uniform(0.05, 0.08)
        fat = rng.uniform(0.22, 0.36)
        muscle = rng.uniform(0.55, 0.68)
        depths = (skin, fat, muscle, 1.0)
        amps = (0.0, rng.uniform(0.0, 0.03), rng.uniform(0.0, 0.04), 0.0)
        phases = rng.uniform(0, 2 * np.pi, 4)
        thickness = np.diff((0.0,) + depths)
        column = float(np.dot(thickness, self.relative_compliance)) * self.height
        target = self.image_fraction / (k_g * self.spacing_mm)
        scale = target / column
        layers = tuple(
            Layer(depth=d, compliance=rc * scale, intensity=i, speckle=s,
                  wave_amp=a * self.height, wave_phase=p)
            for d, rc, i, s, a, p in zip(depths, self.relative_compliance, self.intensities,
                                         self.speckle, amps, phases))
        r = rng.uniform(*self.radius_range) * self.width
        cx = rng.uniform(r + 2, self.width - 1 - r - 2)
        cy = rng.uniform(muscle * self.height + 0.2 * r, 0.86 * self.height - r)
        cy = min(cy, self.height - 2 - r)
        inclusion = Inclusion(cx=cx, cy=cy, radius=r)
        return PhantomSpec(width=self.width, height=self.height, layers=layers,
                           inclusion=inclusion, rng_seed=int(rng.integers(2**31)),
                           lateral_coupling=self.lateral_coupling)


def make_palpation_trace(k_g: float, seed, f_max: float = 15.0, n: int = 300,
                         noise_n: float = 0.6, duration_s: float = 30.0):
    """One press-release cycle; returns ``(t_s, lambda_z_mm, force_n)``."""
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, duration_s, n)
    profile = 1.0 - np.abs(2.0 * t / duration_s - 1.0)
    intercept = rng.uniform(-0.3, 0.3)
    lam = profile * (f_max - intercept) / k_g
    force = np.clip(k_g * lam + intercept + rng.normal(0.0, noise_n, n), 0.0, None)
    return t, lam, force
