"""Losses, Adam and the training loop."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .calib import StiffnessPopulation, zscore
from .config import LossConfig, TrainConfig
from .dataset import DatasetManifest, load_sample
from .fields import epe, scale_flow_down
from .net import DefCorNet, NetConfig, load_checkpoint, save_checkpoint
from .phantom import augment

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "train_loss", "l1", "smooth", "val_epe"]


# losses -------------------------------------------------------------------------

def rescale_gt(gt: np.ndarray, height: int, width: int) -> np.ndarray:
    """Ground truth batch (N, H, W, 2) -> (N, 2, height, width) at that resolution."""
    factor = gt.shape[1] // height
    if factor * height != gt.shape[1] or factor * width != gt.shape[2]:
        raise ValueError(f"cannot rescale {gt.shape[1:3]} to {(height, width)}")
    out = np.stack([scale_flow_down(g, factor) for g in gt])
    return np.ascontiguousarray(np.moveaxis(out, 3, 1))


def l1_multiscale(preds, gt: np.ndarray) -> ag.Tensor:
    """Sum over scales of the mean per-pixel L1 distance to the rescaled ground truth."""
    total = None
    for pred in preds:
        n, _, h, w = pred.shape
        target = rescale_gt(gt, h, w).astype(pred.dtype)
        term = ag.total(ag.absolute(pred - target)) * pred.dtype.type(1.0 / (n * h * w))
        total = term if total is None else total + term
    return total


def _edge_terms(flow, image, axis, lam1, lam2, eps):
    """First- and second-order edge-aware smoothness along one spatial axis."""
    def sl(a, b):
        key = [slice(None)] * 4
        key[axis] = slice(a, b)
        return tuple(key)

    d1 = flow[sl(1, None)] - flow[sl(None, -1)]
    g1 = np.diff(image, axis=axis)
    w1 = np.exp(-lam1 * g1 ** 2).astype(flow.dtype)
    d2 = flow[sl(2, None)] - flow[sl(1, -1)] * flow.dtype.type(2) + flow[sl(None, -2)]
    g2 = 0.5 * (image[sl(2, None)] - image[sl(None, -2)])
    w2 = np.exp(-lam2 * g2 ** 2).astype(flow.dtype)
    return ag.mean(ag.charbonnier(d1, eps) * w1), ag.mean(ag.charbonnier(d2, eps) * w2)


def smoothness(flow: ag.Tensor, images: np.ndarray, cfg: LossConfig) -> ag.Tensor:
    """Edge-aware smoothness of a (N, 2, H, W) field.

    Image gradients are taken on intensities scaled to [0, 1]; each of the
    four (order, axis) terms is a mean over pixels and flow channels.
    """
    img = np.asarray(images, dtype=np.float64) / 255.0
    if img.ndim == 3:
        img = img[:, None]
    if img.shape[2:] != flow.shape[2:]:
        raise ValueError("image and flow differ in size")
    x1, x2 = _edge_terms(flow, img, 3, cfg.edge_lambda_x[0], cfg.edge_lambda_x[1], cfg.epsilon)
    y1, y2 = _edge_terms(flow, img, 2, cfg.edge_lambda_y[0], cfg.edge_lambda_y[1], cfg.epsilon)
    return x1 + x2 + y1 + y2


def total_loss(result, gt: np.ndarray, images: np.ndarray, cfg: LossConfig):
    """Weighted L1 + smoothness; returns ``(loss tensor, {'l1', 'smooth'})``."""
    l1 = l1_multiscale([result.f11, result.f22, result.f32], gt)
    sm = smoothness(result.f32, images, cfg)
    dt = l1.dtype.type
    loss = l1 * dt(cfg.lambda1) + sm * dt(cfg.lambda2)
    return loss, {"l1": float(l1.data), "smooth": float(sm.data)}


# optimiser ------------------------------------------------------------------------

@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        dt = p.dtype.type
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = dt(beta1) * m + dt(1 - beta1) * g
        v = dt(beta2) * v + dt(1 - beta2) * g * g
        m_hat = m / dt(1 - beta1 ** t)
        v_hat = v / dt(1 - beta2 ** t)
        new_p[name] = (p - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))).astype(p.dtype)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(t=t, m=new_m, v=new_v)


# training loop --------------------------------------------------------------------

@dataclass
class TrainResult:
    steps: int
    best_val_epe: float
    initial_val_epe: float
    best_step: int
    checkpoint_dir: Path


def effective_crop(width: int, crop_width: int) -> int:
    crop = min(crop_width, width)
    crop -= crop % 16
    if crop != crop_width:
        log.warning("crop width %d adjusted to %d for %d-px wide images", crop_width, crop, width)
    if crop <= 0:
        raise ValueError(f"images {width} px wide are too narrow to crop")
    return crop


def make_batch(samples, step: int, cfg: TrainConfig, crop: int, population):
    """Deterministic augmented batch for ``step`` (depends only on seed and step)."""
    rng = np.random.default_rng([cfg.seed, step])
    idx = rng.choice(len(samples), size=min(cfg.batch_size, len(samples)), replace=False)
    images, flows, forces, kgn = [], [], [], []
    for i in idx:
        s = samples[i]
        flip = bool(rng.random() < 0.5)
        img, flow = augment(s.image, s.flow_gt, crop, flip, int(rng.integers(2**31)))
        images.append(img)
        flows.append(flow)
        forces.append(s.record.force_n)
        kgn.append(zscore(s.record.global_stiffness_n_per_mm, population))
    return (np.stack(images).astype(np.float32), np.stack(flows), np.array(forces),
            np.array(kgn))


def validation_epe(net: DefCorNet, samples) -> float:
    if not samples:
        return float("nan")
    errs = []
    for s in samples:
        pred = net.predict(s.image, s.record.force_n, s.record.global_stiffness_n_per_mm)
        errs.append(epe(pred, s.flow_gt)[1].mean)
    return float(np.mean(errs))


def _adam_blobs(state: AdamState) -> dict:
    blobs = {f"adam_m/{k}": v for k, v in state.m.items()}
    blobs.update({f"adam_v/{k}": v for k, v in state.v.items()})
    return blobs


def _adam_from_blobs(t: int, blobs: dict) -> AdamState:
    m = {k[len("adam_m/"):]: v for k, v in blobs.items() if k.startswith("adam_m/")}
    v = {k[len("adam_v/"):]: v for k, v in blobs.items() if k.startswith("adam_v/")}
    return AdamState(t=t, m=m, v=v)


def _rewrite_metrics(path: Path, keep_until: int) -> None:
    rows = []
    if path.exists():
        with open(path, newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if int(r["step"]) <= keep_until]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_HEADER, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def train_loop(manifest: DatasetManifest, train_cfg: TrainConfig, loss_cfg: LossConfig,
               out_dir, resume=None, stop_after: int | None = None) -> TrainResult:
    """Train on the manifest's ``train`` split, validating on ``val``.

    Writes ``last.ckpt`` every ``checkpoint_interval`` steps and at the end,
    ``best.ckpt`` whenever validation EPE improves (the untrained model is
    the first candidate) and appends to ``metrics.csv``. ``resume`` names a
    checkpoint to continue from; ``stop_after`` ends the run early after that
    many total steps (used to test resumption).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_records = manifest.split("train")
    if not train_records:
        raise ValueError("training split is empty")
    train = [load_sample(manifest, r) for r in train_records]
    val = [load_sample(manifest, r) for r in manifest.split("val")]
    crop = effective_crop(manifest.width, train_cfg.crop_width)
    metrics = out / "metrics.csv"

    if resume is not None:
        net, state, blobs = load_checkpoint(resume)
        start = int(state["step"])
        adam = _adam_from_blobs(int(state["adam_t"]), blobs)
        best, best_step = float(state["best_val_epe"]), int(state["best_step"])
        initial = float(state["initial_val_epe"])
        _rewrite_metrics(metrics, start)
    else:
        population = StiffnessPopulation.from_values(
            [r.global_stiffness_n_per_mm for r in train_records])
        net = DefCorNet(NetConfig(widths=train_cfg.widths), population=population,
                        seed=train_cfg.seed)
        start, adam = 0, AdamState()
        initial = best = validation_epe(net, val)
        best_step = 0
        _rewrite_metrics(metrics, -1)

    def state_dict(step):
        return {"step": step, "adam_t": adam.t, "best_val_epe": best, "best_step": best_step,
                "initial_val_epe": initial, "train_config": asdict(train_cfg),
                "loss_config": asdict(loss_cfg)}

    if resume is None:
        save_checkpoint(out / "best.ckpt", net, state_dict(0))

    end = train_cfg.steps if stop_after is None else min(stop_after, train_cfg.steps)
    tick = time.perf_counter()
    with open(metrics, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for step in range(start, end):
            images, flows, forces, kgn = make_batch(train, step, train_cfg, crop, net.population)
            result = net.forward(images, forces, kgn)
            loss, parts = total_loss(result, flows, images, loss_cfg)
            net.zero_grad()
            loss.backward()
            grads = {k: t.grad for k, t in net.params.items() if t.grad is not None}
            new_params, adam = adam_step(net.arrays(), grads, adam, train_cfg.learning_rate)
            for k, arr in new_params.items():
                net.params[k].data = arr

            done = step + 1
            val_epe = ""
            if done % train_cfg.val_interval == 0 or done == train_cfg.steps:
                val_epe = validation_epe(net, val)
                if val_epe < best:
                    best, best_step = val_epe, done
                    save_checkpoint(out / "best.ckpt", net, state_dict(done))
                log.info("step %d loss %.4f val_epe %.3f (%.1fs)", done, float(loss.data), val_epe,
                         time.perf_counter() - tick)
            writer.writerow([done, repr(float(loss.data)), repr(parts["l1"]),
                             repr(parts["smooth"]), "" if val_epe == "" else repr(val_epe)])
            if done % train_cfg.checkpoint_interval == 0 or done == end:
                fh.flush()
                save_checkpoint(out / "last.ckpt", net, state_dict(done), _adam_blobs(adam))
    return TrainResult(steps=end, best_val_epe=best, initial_val_epe=initial,
                       best_step=best_step, checkpoint_dir=out)
