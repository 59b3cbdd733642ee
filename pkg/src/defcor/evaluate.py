"""Evaluation: Dice, target localisation accuracy, EPE reports, histogram
consistency of stiffness maps and the non-learned baselines."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from . import io
from .config import EvalConfig
from .dataset import DatasetManifest, load_sample
from .fields import bilinear_sample, epe, invert_flow, ncc, warp
from .phantom import make_axial_ramp_field, simulate_compression

log = logging.getLogger(__name__)

REPORT_HEADER = ["force_bin", "metric", "mean", "sd", "n"]
TLA_STEP_PX = 5


class DegenerateMapError(ValueError):
    """Raised when a stiffness map has no spread to fit a Gaussian to."""


# masks ----------------------------------------------------------------------------

def dice(gt_mask: np.ndarray, other_mask: np.ndarray) -> float:
    """Overlap score in [0, 100]."""
    g = np.asarray(gt_mask, dtype=bool)
    s = np.asarray(other_mask, dtype=bool)
    if g.shape != s.shape:
        raise ValueError(f"masks differ in size: {g.shape} vs {s.shape}")
    ng, ns = int(g.sum()), int(s.sum())
    if ng == 0 or ns == 0:
        raise ValueError("dice needs two non-empty masks")
    return 100.0 * 2.0 * np.count_nonzero(g & s) / (ng + ns)


def deform_mask(mask: np.ndarray, gt_flow: np.ndarray) -> np.ndarray:
    """Carry a reference-frame mask into the deformed frame."""
    return warp(np.asarray(mask, np.float64), invert_flow(gt_flow)) > 0.5


def correct_mask(deformed_mask: np.ndarray, flow: np.ndarray) -> np.ndarray:
    return warp(np.asarray(deformed_mask, np.float64), flow) > 0.5


# interfaces -----------------------------------------------------------------------

def sample_flow(flow: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Bilinear lookup of ``flow`` at (n, 2) sub-pixel points (x, y)."""
    src = np.moveaxis(np.asarray(flow, np.float64), 2, 0)[None]
    pts = np.asarray(points, np.float64)
    out, _ = bilinear_sample(src, pts[None, None, :, 0], pts[None, None, :, 1])
    return out[0, :, 0, :].T


def deform_points(points: np.ndarray, gt_flow: np.ndarray) -> np.ndarray:
    """Reference-frame points -> deformed frame (``P + gt(P)``)."""
    return points + sample_flow(gt_flow, points)


def correct_points(points: np.ndarray, flow: np.ndarray, iterations: int = 30) -> np.ndarray:
    """Deformed-frame points -> corrected frame: solve ``Q + flow(Q) = D``."""
    q = np.array(points, np.float64)
    for _ in range(iterations):
        q = points - sample_flow(flow, q)
    return q


@dataclass
class TlaResult:
    ha: np.ndarray  # per sampled point, pooled over interfaces
    va: np.ndarray
    per_interface: list  # (ha_mean, va_mean) per polyline

    @property
    def ha_mean(self) -> float:
        return float(self.ha.mean()) if self.ha.size else float("nan")

    @property
    def va_mean(self) -> float:
        return float(self.va.mean()) if self.va.size else float("nan")


def _axis_accuracy(measured, truth):
    keep = truth != 0
    return np.maximum(0.0, 1.0 - np.abs(measured[keep] - truth[keep]) / np.abs(truth[keep]))


def tla(gt_interfaces, other_interfaces, step: float = TLA_STEP_PX) -> TlaResult:
    """Horizontal and vertical localisation accuracy along matching polylines.

    Each ground-truth polyline is sampled every ``step`` pixels in x. The
    matching point on the other polyline sits at the same fractional vertex
    index, so the two sets must be vertex-aligned (as produced by
    transporting one set through a field). Per point and axis the accuracy is
    ``max(0, 1 - |L - L_gt| / L_gt)``; points with ``L_gt = 0`` are skipped.
    """
    if len(gt_interfaces) != len(other_interfaces):
        raise ValueError(f"{len(gt_interfaces)} ground-truth polylines but "
                         f"{len(other_interfaces)} to compare")
    ha, va, per = [], [], []
    for g, o in zip(gt_interfaces, other_interfaces):
        g = np.asarray(g, np.float64)
        o = np.asarray(o, np.float64)
        if g.shape != o.shape or len(g) < 2:
            raise ValueError("polylines must have matching vertex counts of at least 2")
        if np.any(np.diff(g[:, 0]) <= 0):
            raise ValueError("ground-truth polyline x must be strictly increasing")
        xs = np.arange(g[0, 0], g[-1, 0] + 1e-9, step)
        idx = np.interp(xs, g[:, 0], np.arange(len(g)))
        gp = np.stack([np.interp(idx, np.arange(len(g)), g[:, k]) for k in (0, 1)], axis=1)
        op = np.stack([np.interp(idx, np.arange(len(o)), o[:, k]) for k in (0, 1)], axis=1)
        h = _axis_accuracy(op[:, 0], gp[:, 0])
        v = _axis_accuracy(op[:, 1], gp[:, 1])
        ha.append(h)
        va.append(v)
        per.append((float(h.mean()) if h.size else float("nan"),
                    float(v.mean()) if v.size else float("nan")))
    return TlaResult(np.concatenate(ha), np.concatenate(va), per)


# stiffness-map histograms ------------------------------------------------------------

@dataclass
class GaussianFit:
    mean: float
    sd: float
    counts: np.ndarray = field(repr=False)
    edges: np.ndarray = field(repr=False)


def fit_histogram(values: np.ndarray, bins: int = 1000) -> GaussianFit:
    """1000-bin histogram of a map plus a Gaussian fitted by sample moments."""
    v = np.asarray(values, np.float64).ravel()
    sd = float(v.std())
    if not np.isfinite(sd) or sd <= 0:
        raise DegenerateMapError("map has zero variance")
    counts, edges = np.histogram(v, bins=bins, range=(v.min(), v.max()))
    return GaussianFit(float(v.mean()), sd, counts, edges)


def gaussian_overlap(mu1: float, sd1: float, mu2: float, sd2: float) -> float:
    """Area under min(N(mu1, sd1), N(mu2, sd2)) from the densities' crossing points."""
    a = 0.5 / sd2**2 - 0.5 / sd1**2
    b = mu1 / sd1**2 - mu2 / sd2**2
    c = 0.5 * mu2**2 / sd2**2 - 0.5 * mu1**2 / sd1**2 + np.log(sd2 / sd1)
    scale = max(abs(a), abs(b), abs(c), 1e-300)
    if abs(a) / scale < 1e-12:
        if abs(b) / scale < 1e-12:
            return 1.0  # identical densities
        roots = [-c / b]
    else:
        disc = b * b - 4 * a * c
        roots = [] if disc < 0 else sorted({(-b - np.sqrt(disc)) / (2 * a),
                                             (-b + np.sqrt(disc)) / (2 * a)})
    cuts = [-np.inf] + list(roots) + [np.inf]
    span = max(sd1, sd2)
    total = 0.0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        if np.isinf(lo) and np.isinf(hi):
            probe = 0.5 * (mu1 + mu2)
        elif np.isinf(lo):
            probe = hi - span
        elif np.isinf(hi):
            probe = lo + span
        else:
            probe = 0.5 * (lo + hi)
        # log densities: far-tail probes would underflow to a 0 == 0 tie
        if norm.logpdf(probe, mu1, sd1) <= norm.logpdf(probe, mu2, sd2):
            total += norm.cdf(hi, mu1, sd1) - norm.cdf(lo, mu1, sd1)
        else:
            total += norm.cdf(hi, mu2, sd2) - norm.cdf(lo, mu2, sd2)
    return float(min(max(total, 0.0), 1.0))


def consistency_score(fit_a: GaussianFit, fit_b: GaussianFit) -> float:
    return 1.0 - gaussian_overlap(fit_a.mean, fit_a.sd, fit_b.mean, fit_b.sd)


def histogram_consistency(maps) -> list:
    """``1 - overlap`` of the fitted Gaussians for each consecutive pair of maps."""
    maps = [np.asarray(m) for m in maps]
    if len(maps) < 2:
        raise ValueError("need at least two maps")
    if any(m.shape != maps[0].shape for m in maps):
        raise ValueError("maps differ in size")
    fits = [fit_histogram(m) for m in maps]
    return [consistency_score(a, b) for a, b in zip(fits[:-1], fits[1:])]


@dataclass
class SweepConsistency:
    gaps: np.ndarray
    scores: np.ndarray  # mean score over all frame pairs at each gap
    adjacent: np.ndarray  # score of every adjacent pair
    slope: float  # least-squares slope of scores against log2(gap)


def sweep_consistency(net, spec, image, forces, k_g: float, gaps=None,
                      layer: int = 1) -> SweepConsistency:
    """Stiffness-map consistency over a simulated press with rising force.

    Each frame is the phantom compressed by one entry of ``forces``; the
    patient-specific map of ``layer`` is fitted for every frame and frames
    ``gap`` apart are compared.
    """
    kgn = net.normalized_stiffness(k_g)
    fits = []
    for f in forces:
        frame, _ = simulate_compression(spec, image, float(f))
        res = net.forward(np.rint(frame)[None], [float(f)], [kgn])
        fits.append(fit_histogram(res.stiffness[layer - 1].data[0, 0]))
    n = len(fits)
    if gaps is None:
        gaps = [2**k for k in range(int(np.log2(n - 1)) + 1)]
    gaps = np.asarray(gaps)
    scores = np.array([np.mean([consistency_score(fits[i], fits[i + g]) for i in range(n - g)])
                       for g in gaps])
    adjacent = np.array([consistency_score(a, b) for a, b in zip(fits[:-1], fits[1:])])
    slope = float(np.polyfit(np.log2(gaps), scores, 1)[0]) if len(gaps) > 1 else 0.0
    return SweepConsistency(gaps, scores, adjacent, slope)


# baselines and predictors -------------------------------------------------------------

def ramp_depth_from_gt(gt_flow: np.ndarray) -> float:
    """Axial compression of the deepest row, read off a correction field."""
    return float(-np.mean(gt_flow[-1, :, 1]))


def linear_scaling_baseline(image: np.ndarray, max_disp_px: float) -> np.ndarray:
    """Undo compression assumed to grow linearly with depth.

    ``max_disp_px`` is the compression at the deepest row; the skin line is
    left in place.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    return warp(image.astype(np.float64), linear_scaling_field(w, h, max_disp_px))


def linear_scaling_field(width: int, height: int, max_disp_px: float) -> np.ndarray:
    return -make_axial_ramp_field(width, height, max_disp_px)


def model_predictor(net):
    def predict(sample):
        r = sample.record
        return net.predict(sample.image, r.force_n, r.global_stiffness_n_per_mm)
    return predict


def oracle_predictor(sample):
    return sample.flow_gt.astype(np.float64)


def identity_predictor(sample):
    return np.zeros(sample.flow_gt.shape, np.float64)


def baseline_predictor(sample):
    h, w = sample.image.shape
    return linear_scaling_field(w, h, ramp_depth_from_gt(sample.flow_gt))


PREDICTORS = {"oracle": oracle_predictor, "identity": identity_predictor,
              "linear": baseline_predictor}


# reports --------------------------------------------------------------------------

def error_colormap(err: np.ndarray, scale: float) -> np.ndarray:
    """Blue (0) -> cyan -> yellow -> red (>= scale) RGB uint8 map of an error field."""
    t = np.clip(np.asarray(err, np.float64) / scale, 0.0, 1.0)
    anchors = np.linspace(0, 1, 5)
    r = np.interp(t, anchors, [0, 0, 0.5, 1, 1])
    g = np.interp(t, anchors, [0, 0.8, 1, 0.8, 0])
    b = np.interp(t, anchors, [0.6, 1, 0.5, 0, 0])
    return np.rint(255 * np.stack([r, g, b], axis=2)).astype(np.uint8)


def sample_metrics(sample, flow: np.ndarray, thresholds_px) -> dict:
    """Every metric available for one sample given a predicted correction field."""
    r = sample.record
    gt = sample.flow_gt.astype(np.float64)
    out = {}
    _, stats = epe(flow, gt, thresholds_px)
    out.update(epe_mean=stats.mean, epe_sd=stats.sd, epe_max=stats.max,
               per10=stats.per10, per15=stats.per15, per20=stats.per20)
    if sample.reference is not None:
        out["ncc_deformed"] = ncc(sample.image, sample.reference)
        out["ncc_corrected"] = ncc(warp(sample.image.astype(np.float64), flow), sample.reference)
    else:
        log.warning("sample %s has no reference image; skipping NCC", r.id)
    if sample.mask is not None and sample.mask.any():
        deformed = deform_mask(sample.mask, gt)
        corrected = correct_mask(deformed, flow)
        out["dice_deformed"] = dice(sample.mask, deformed) if deformed.any() else 0.0
        if corrected.any():
            out["dice_corrected"] = dice(sample.mask, corrected)
        else:
            log.warning("sample %s: corrected mask is empty; Dice recorded as 0", r.id)
            out["dice_corrected"] = 0.0
    else:
        log.warning("sample %s has no mask; skipping Dice", r.id)
    if sample.interfaces:
        ref = sample.interfaces
        moved = [deform_points(p, gt) for p in ref]
        fixed = [correct_points(p, flow) for p in moved]
        t_def, t_cor = tla(ref, moved), tla(ref, fixed)
        out.update(ha_deformed=t_def.ha_mean, va_deformed=t_def.va_mean,
                   ha_corrected=t_cor.ha_mean, va_corrected=t_cor.va_mean)
    else:
        log.warning("sample %s has no interfaces; skipping TLA", r.id)
    return out


@dataclass
class EvalReport:
    rows: list  # per sample: id, force_n, force_bin and metrics
    summary: dict  # (force_bin, metric) -> (mean, sd, n)

    def get(self, force_bin, metric) -> tuple:
        return self.summary[(force_bin, metric)]

    def bins(self) -> list:
        return sorted({b for b, _ in self.summary if b != "all"})


def summarize(rows) -> dict:
    metrics = sorted({k for r in rows for k in r} - {"id", "force_n", "force_bin"})
    summary = {}
    groups = {"all": rows}
    for r in rows:
        groups.setdefault(r["force_bin"], []).append(r)
    for b, members in groups.items():
        for m in metrics:
            vals = np.array([r[m] for r in members if m in r], np.float64)
            if vals.size:
                summary[(b, m)] = (float(vals.mean()), float(vals.std()), int(vals.size))
    return summary


def write_report(path, summary: dict) -> None:
    keys = sorted(summary, key=lambda k: (k[0] == "all", str(k[0]).zfill(4), k[1]))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for b, m in keys:
            mean, sd, n = summary[(b, m)]
            writer.writerow([b, m, repr(mean), repr(sd), n])


def evaluate_run(manifest: DatasetManifest, predictor, cfg: EvalConfig | None = None,
                 out_dir=None, split: str | None = None) -> EvalReport:
    """Evaluate ``predictor(sample) -> (H, W, 2)`` field on one split.

    Metrics are aggregated per integer force bin and over the whole split.
    With ``out_dir`` set, writes ``report.csv``, ``samples.csv`` and one
    error-map PPM per sample under ``error_maps/``.
    """
    cfg = cfg or EvalConfig()
    split = split or cfg.split
    records = sorted(manifest.split(split), key=lambda r: r.id)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    thresholds = tuple(t / manifest.spacing_mm_per_px for t in cfg.epe_thresholds_mm)
    if out_dir is not None:
        out = Path(out_dir)
        (out / "error_maps").mkdir(parents=True, exist_ok=True)
    rows = []
    for rec in records:
        sample = load_sample(manifest, rec)
        flow = np.asarray(predictor(sample), np.float64)
        row = {"id": rec.id, "force_n": rec.force_n, "force_bin": rec.force_bin}
        row.update(sample_metrics(sample, flow, thresholds))
        rows.append(row)
        if out_dir is not None:
            err, _ = epe(flow, sample.flow_gt)
            io.write_ppm(out / "error_maps" / f"{rec.id}.ppm",
                         error_colormap(err, cfg.error_map_scale))
    summary = summarize(rows)
    if out_dir is not None:
        write_report(out / "report.csv", summary)
        columns = ["id", "force_n", "force_bin"] + sorted({k for r in rows for k in r} -
                                                           {"id", "force_n", "force_bin"})
        with open(out / "samples.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    return EvalReport(rows, summary)
