"""Synthetic datasets on disk: sample files plus a JSON manifest."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .calib import PalpationTrace, fit_global_stiffness
from .phantom import SubjectSampler, make_palpation_trace, render_phantom, simulate_compression

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
REFERENCE_SPLIT = (51, 8, 13)  # train / val / test image sets out of 72
FOREARM_STIFFNESS = (1.80, 0.48)  # N/mm, mean and SD
UPPER_ARM_STIFFNESS = (0.78, 0.03)


@dataclass
class SampleRecord:
    id: str
    image_path: str
    flow_gt_path: str
    force_n: float
    global_stiffness_n_per_mm: float
    split: str = "train"
    reference_path: str | None = None
    mask_path: str | None = None
    interfaces_path: str | None = None
    palpation_path: str | None = None

    @property
    def force_bin(self) -> int:
        return int(np.floor(self.force_n + 0.5))


@dataclass
class DatasetManifest:
    records: list
    width: int
    height: int
    spacing_mm_per_px: float
    root: Path | None = field(default=None, compare=False, repr=False)

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def path(self, rel: str | None) -> Path | None:
        if rel is None:
            return None
        return (self.root or Path(".")) / rel

    def save(self, directory) -> Path:
        directory = Path(directory)
        records = sorted(self.records, key=lambda r: r.id)
        doc = {
            "version": MANIFEST_VERSION,
            "width": self.width,
            "height": self.height,
            "spacing_mm_per_px": self.spacing_mm_per_px,
            "records": [asdict(r) for r in records],
        }
        out = directory / MANIFEST_NAME
        out.write_text(json.dumps(doc, indent=1) + "\n")
        return out

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        doc = json.loads(path.read_text())
        if doc.get("version") != MANIFEST_VERSION:
            raise ValueError(f"{path}: unsupported manifest version {doc.get('version')}")
        records = [SampleRecord(**r) for r in doc["records"]]
        ids = [r.id for r in records]
        if len(set(ids)) != len(ids):
            raise ValueError(f"{path}: duplicate record ids")
        return cls(records=records, width=doc["width"], height=doc["height"],
                   spacing_mm_per_px=doc["spacing_mm_per_px"], root=path.parent)


@dataclass
class Sample:
    """A record with its arrays loaded."""

    record: SampleRecord
    image: np.ndarray
    flow_gt: np.ndarray
    reference: np.ndarray | None = None
    mask: np.ndarray | None = None
    interfaces: list | None = None


def load_sample(manifest: DatasetManifest, record: SampleRecord) -> Sample:
    try:
        image = io.read_pgm(manifest.path(record.image_path))
        flow = io.read_flow(manifest.path(record.flow_gt_path))
        ref = io.read_pgm(manifest.path(record.reference_path)) if record.reference_path else None
        mask = io.read_pgm(manifest.path(record.mask_path)) > 127 if record.mask_path else None
        inter = (io.read_interfaces(manifest.path(record.interfaces_path))
                 if record.interfaces_path else None)
    except (OSError, ValueError) as exc:
        raise IOError(f"sample {record.id}: {exc}") from exc
    if flow.shape[:2] != image.shape:
        raise ValueError(f"sample {record.id}: image {image.shape} and flow {flow.shape[:2]} differ")
    return Sample(record, image, flow, ref, mask, inter)


def assign_splits(force_bins, counts, seed) -> list:
    """Disjoint train/val/test labels, stratified over force bins.

    ``counts`` gives (train, val, test) sizes. Test and validation slots are
    dealt round-robin across bins so every bin is represented.
    """
    n = len(force_bins)
    n_train, n_val, n_test = counts
    if n_train + n_val + n_test != n:
        raise ValueError("split counts must add up to the number of samples")
    rng = np.random.default_rng(seed)
    by_bin = {}
    for i, b in enumerate(force_bins):
        by_bin.setdefault(b, []).append(i)
    queues = [list(rng.permutation(idx)) for _, idx in sorted(by_bin.items())]
    labels = ["train"] * n
    order = []
    while any(queues):
        for q in queues:
            if q:
                order.append(q.pop(0))
    for i in order[:n_test]:
        labels[i] = "test"
    for i in order[n_test:n_test + n_val]:
        labels[i] = "val"
    return labels


def split_counts(n: int) -> tuple:
    n_train = int(round(n * REFERENCE_SPLIT[0] / sum(REFERENCE_SPLIT)))
    n_val = int(round(n * REFERENCE_SPLIT[1] / sum(REFERENCE_SPLIT)))
    return n_train, n_val, n - n_train - n_val


def _draw_stiffness(rng, index):
    mean, sd = FOREARM_STIFFNESS if index % 2 == 0 else UPPER_ARM_STIFFNESS
    return float(np.clip(rng.normal(mean, sd), 0.6, 3.0))


def _make_sample(args):
    index, out_dir, cfg = args
    rng = np.random.default_rng([cfg["seed"], index])
    sampler = SubjectSampler(width=cfg["width"], height=cfg["height"],
                             spacing_mm=cfg["depth_mm"] / cfg["height"],
                             image_fraction=cfg["image_fraction"],
                             lateral_coupling=cfg["lateral_coupling"])
    k_true = _draw_stiffness(rng, index)
    spec = sampler.draw(k_true, rng.integers(2**31))
    image, mask, polylines = render_phantom(spec)
    image = np.rint(image)
    n_bins = int(round(cfg["force_max_n"]))
    force_bin = 1 + index % n_bins
    force = float(np.clip(force_bin + rng.uniform(-0.45, 0.45), 0.05, cfg["force_max_n"] + 0.45))
    deformed, gt = simulate_compression(spec, image, force)
    t, lam, f = make_palpation_trace(k_true, rng.integers(2**31), noise_n=cfg["palpation_noise_n"])
    k_fit = fit_global_stiffness(PalpationTrace(lam, f)).c2_slope

    sid = f"s{index:04d}"
    names = {k: f"samples/{sid}_{k}" for k in ("image", "reference", "flow", "mask", "interfaces",
                                               "palpation")}
    d = Path(out_dir)
    io.write_pgm(d / f"{names['image']}.pgm", deformed)
    io.write_pgm(d / f"{names['reference']}.pgm", image)
    io.write_flow(d / f"{names['flow']}.dff", gt)
    io.write_pgm(d / f"{names['mask']}.pgm", mask.astype(np.uint8) * 255)
    io.write_interfaces(d / f"{names['interfaces']}.csv", polylines)
    io.write_palpation(d / f"{names['palpation']}.csv", t, lam, f)
    return SampleRecord(
        id=sid, image_path=f"{names['image']}.pgm", flow_gt_path=f"{names['flow']}.dff",
        force_n=force, global_stiffness_n_per_mm=float(k_fit),
        reference_path=f"{names['reference']}.pgm", mask_path=f"{names['mask']}.pgm",
        interfaces_path=f"{names['interfaces']}.csv", palpation_path=f"{names['palpation']}.csv")


def synthesize_dataset(out_dir, cfg: dict, jobs: int = 1) -> DatasetManifest:
    """Generate ``cfg['n_samples']`` samples under ``out_dir`` and write the manifest.

    ``cfg`` holds the ``synth`` section of a run configuration. Output is
    byte-identical for a fixed seed regardless of ``jobs``.
    """
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    tasks = [(i, str(out), cfg) for i in range(cfg["n_samples"])]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_make_sample, tasks))
    else:
        records = [_make_sample(t) for t in tasks]
    records.sort(key=lambda r: r.id)
    labels = assign_splits([r.force_bin for r in records], split_counts(len(records)), cfg["seed"])
    for r, label in zip(records, labels):
        r.split = label
    manifest = DatasetManifest(records=records, width=cfg["width"], height=cfg["height"],
                               spacing_mm_per_px=cfg["depth_mm"] / cfg["height"], root=out)
    manifest.save(out)
    log.info("wrote %d samples to %s", len(records), out)
    return manifest
