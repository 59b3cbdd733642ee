"""Coarse-to-fine deformation-correction network.

Three pyramid layers (quarter, half and full resolution) share one U-shape
stiffness extractor. Each layer turns its stiffness map into a patient-specific
map using the normalised global stiffness, then regresses a displacement
field that is proportional to the contact force: quadratic in the stiffness
on the coarsest layer, linear on the two refinement layers.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .calib import StiffnessPopulation, zscore
from .fields import warp as warp_image

CHECKPOINT_MAGIC = b"DCK1"
CHECKPOINT_VERSION = 1


@dataclass
class NetConfig:
    widths: tuple = (8, 16, 32)
    leaky_slope: float = ag.LEAKY_SLOPE
    intensity_scale: float = 1.0 / 255.0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 3:
            raise ValueError("the U-shape extractor has exactly three levels")


@dataclass
class ForwardResult:
    f11: ag.Tensor  # quarter resolution, quadratic layer
    f22: ag.Tensor  # half resolution, upsampled f11 plus residual
    f32: ag.Tensor  # full resolution output
    stiffness: list = field(default_factory=list)  # patient-specific maps per layer


def _ushape_specs(widths):
    w0, w1, w2 = widths
    return [
        ("enc0.0", 1, w0, 3), ("enc0.1", w0, w0, 3),
        ("enc1.0", w0, w1, 3), ("enc1.1", w1, w1, 3),
        ("enc2.0", w1, w2, 3), ("enc2.1", w2, w2, 3),
        ("dec1.0", w2 + w1, w1, 3), ("dec1.1", w1, w1, 3),
        ("dec0.0", w1 + w0, w0, 3), ("dec0.1", w0, w0, 3),
        ("head", w0, 1, 1),
    ]


def init_params(config: NetConfig, seed=0, dtype=np.float32) -> dict:
    """Fresh parameters: He-uniform convolutions, identity-leaning updates, zero regressions."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, cin, cout, k in _ushape_specs(config.widths):
        bound = np.sqrt(6.0 / (cin * k * k))
        params[f"ushape.{name}.w"] = rng.uniform(-bound, bound, (cout, cin, k, k)).astype(dtype)
        params[f"ushape.{name}.b"] = np.zeros(cout, dtype=dtype)
    for layer in (1, 2, 3):
        params[f"update{layer}"] = np.array([1.0, 0.1, 0.0], dtype=dtype)
        order = 3 if layer == 1 else 2
        params[f"dfm{layer}"] = np.zeros((2, order), dtype=dtype)
    return params


class DefCorNet:
    """Parameter container plus forward pass.

    ``params`` maps names to leaf tensors. The single ``ushape.*`` set is
    used by all three layers, so changing it changes every layer.
    """

    def __init__(self, config: NetConfig | None = None, params: dict | None = None,
                 population: StiffnessPopulation | None = None, seed=0):
        self.config = config or NetConfig()
        arrays = params if params is not None else init_params(self.config, seed)
        self.params = {k: ag.Tensor(np.asarray(v), requires_grad=True) for k, v in arrays.items()}
        self.population = population

    # parameters ---------------------------------------------------------------
    def arrays(self) -> dict:
        return {k: t.data for k, t in self.params.items()}

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def astype(self, dtype) -> "DefCorNet":
        return DefCorNet(self.config, {k: v.astype(dtype) for k, v in self.arrays().items()},
                         self.population)

    # building blocks --------------------------------------------------------------
    def _conv(self, x, name, act=True):
        out = ag.conv2d(x, self.params[f"ushape.{name}.w"], self.params[f"ushape.{name}.b"])
        return ag.leaky_relu(out, self.config.leaky_slope) if act else out

    def ushape(self, image):
        """U-shape extractor: (N, 1, H, W) -> (N, 1, H, W); H, W divisible by 4."""
        h, w = image.shape[2:]
        if h % 4 or w % 4:
            raise ValueError(f"U-shape input size {(h, w)} must be divisible by 4")
        e0 = self._conv(self._conv(image, "enc0.0"), "enc0.1")
        e1 = self._conv(self._conv(ag.max_pool2x(e0), "enc1.0"), "enc1.1")
        e2 = self._conv(self._conv(ag.max_pool2x(e1), "enc2.0"), "enc2.1")
        d1 = ag.concat([ag.upsample2x(e2), e1], axis=1)
        d1 = self._conv(self._conv(d1, "dec1.0"), "dec1.1")
        d0 = ag.concat([ag.upsample2x(d1), e0], axis=1)
        d0 = self._conv(self._conv(d0, "dec0.0"), "dec0.1")
        return self._conv(d0, "head", act=False)

    def stiffness_map(self, image):
        """Image-based stiffness: LeakyReLU of the U-shape output."""
        return ag.leaky_relu(self.ushape(image), self.config.leaky_slope)

    def stiffness_update(self, k_us, k_g_n, layer):
        """Patient-specific map ``LeakyReLU(c1 * k_us + c2 * k_g_n + c3)``."""
        c = self.params[f"update{layer}"]
        kgn = np.asarray(k_g_n, dtype=k_us.dtype).reshape(-1, 1, 1, 1)
        return ag.leaky_relu(c[0] * k_us + c[1] * kgn + c[2], self.config.leaky_slope)

    def dfm(self, k_map, force, layer):
        return ag.polynomial_field(k_map, force, self.params[f"dfm{layer}"])

    def _layer(self, image, force, k_g_n, layer, stiffness):
        k = self.stiffness_update(self.stiffness_map(image), k_g_n, layer)
        stiffness.append(k)
        return self.dfm(k, force, layer)

    # forward ----------------------------------------------------------------------
    def forward(self, images, force, k_g_n) -> ForwardResult:
        """Run the three layers on a batch.

        ``images`` is (N, 1, H, W) or (N, H, W) with raw intensities in
        [0, 255]; ``force`` and ``k_g_n`` are length-N sequences. H and W
        must be divisible by 16 (two pyramid halvings, then two poolings).
        """
        dtype = next(iter(self.params.values())).dtype
        images = np.asarray(images, dtype=dtype)
        if images.ndim == 3:
            images = images[:, None]
        n, _, h, w = images.shape
        if h % 16 or w % 16:
            raise ValueError(f"image size {(h, w)} must be divisible by 16")
        force = np.broadcast_to(np.asarray(force, dtype=dtype), (n,))
        k_g_n = np.broadcast_to(np.asarray(k_g_n, dtype=dtype), (n,))

        full = images * dtype.type(self.config.intensity_scale)
        half = ag.resize_bilinear(ag.Tensor(full), h // 2, w // 2)
        quarter = ag.resize_bilinear(ag.Tensor(full), h // 4, w // 4)
        stiffness = []

        f11 = self._layer(quarter, force, k_g_n, 1, stiffness)
        f12 = ag.upsample2x(f11) * dtype.type(2)
        f21 = self._layer(ag.warp(half, f12), force, k_g_n, 2, stiffness)
        f22 = f12 + f21
        f23 = ag.upsample2x(f22) * dtype.type(2)
        f31 = self._layer(ag.warp(ag.Tensor(full), f23), force, k_g_n, 3, stiffness)
        f32 = f23 + f31
        return ForwardResult(f11=f11, f22=f22, f32=f32, stiffness=stiffness)

    def normalized_stiffness(self, k_g: float) -> float:
        if self.population is None:
            raise ValueError("model has no stiffness population; cannot normalise K_g")
        return zscore(k_g, self.population)

    def predict(self, image: np.ndarray, force_n: float, k_g: float) -> np.ndarray:
        """Full-resolution correction field (H, W, 2) for one image."""
        res = self.forward(np.asarray(image)[None], [force_n], [self.normalized_stiffness(k_g)])
        return np.moveaxis(res.f32.data[0], 0, 2).astype(np.float64)

    def correct(self, image: np.ndarray, force_n: float, k_g: float) -> np.ndarray:
        """Warp ``image`` with the predicted field; same dtype as the input."""
        image = np.asarray(image)
        flow = self.predict(image, force_n, k_g)
        out = warp_image(image.astype(np.float64), flow)
        if image.dtype == np.uint8:
            return np.clip(np.rint(out), 0, 255).astype(np.uint8)
        return out.astype(image.dtype)


# checkpoints ----------------------------------------------------------------------

def save_checkpoint(path, net: DefCorNet, train_state: dict | None = None,
                    extra_blobs: dict | None = None) -> None:
    """Write JSON header plus named f32 LE blobs.

    Layout: ``DCK1``, u32 LE header length, UTF-8 JSON header, then the blobs
    back to back in header order.
    """
    blobs = {f"param/{k}": v for k, v in net.arrays().items()}
    blobs.update(extra_blobs or {})
    table, offset, payload = [], 0, []
    for name, arr in blobs.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        payload.append(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "architecture": {"name": "defcor", "leaky_slope": net.config.leaky_slope,
                         "intensity_scale": net.config.intensity_scale},
        "channel_widths": list(net.config.widths),
        "stiffness_population": net.population.to_dict() if net.population else None,
        "num_parameters": net.num_parameters(),
        "train_state": train_state,
        "blobs": table,
    }
    head = json.dumps(header, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for raw in payload:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path):
    """Return ``(net, train_state, extra_blobs)``; shapes are validated."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + hlen])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    body = data[8 + hlen:]
    arch = header["architecture"]
    config = NetConfig(widths=tuple(header["channel_widths"]), leaky_slope=arch["leaky_slope"],
                       intensity_scale=arch["intensity_scale"])
    expected = {k: v.shape for k, v in init_params(config).items()}
    params, extra = {}, {}
    for entry in header["blobs"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if start + 4 * count > len(body):
            raise ValueError(f"{path}: blob {entry['name']} is truncated")
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=start).reshape(shape)
        arr = arr.astype(np.float32)
        name = entry["name"]
        if name.startswith("param/"):
            key = name[len("param/"):]
            if key not in expected or expected[key] != shape:
                raise ValueError(f"{path}: parameter {key} has unexpected shape {shape}")
            params[key] = arr
        else:
            extra[name] = arr
    missing = set(expected) - set(params)
    if missing:
        raise ValueError(f"{path}: missing parameters {sorted(missing)}")
    pop = header.get("stiffness_population")
    population = StiffnessPopulation(**pop) if pop else None
    net = DefCorNet(config, {k: params[k] for k in expected}, population)
    return net, header.get("train_state"), extra


def config_dict(config: NetConfig) -> dict:
    return asdict(config)
