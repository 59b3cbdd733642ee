"""Short training run on a fresh dataset, compared with the linear baseline.

Uses configs/smoke.json (200 steps, a few minutes on one core). The full
desk-scale run is configs/desk.json.
"""
import logging
import tempfile
from pathlib import Path

from defcor.config import load_config
from defcor.dataset import synthesize_dataset
from defcor.evaluate import baseline_predictor, evaluate_run, model_predictor
from defcor.net import load_checkpoint
from defcor.train import train_loop

logging.basicConfig(level=logging.INFO, format="%(message)s")
cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "smoke.json")

with tempfile.TemporaryDirectory() as tmp:
    manifest = synthesize_dataset(Path(tmp) / "data", cfg.synth.__dict__)
    result = train_loop(manifest, cfg.train, cfg.loss, Path(tmp) / "run")
    print(f"validation EPE {result.initial_val_epe:.2f} -> {result.best_val_epe:.2f} px")
    net, _, _ = load_checkpoint(Path(tmp) / "run" / "best.ckpt")
    model = evaluate_run(manifest, model_predictor(net), cfg.eval, split="test")
    linear = evaluate_run(manifest, baseline_predictor, cfg.eval, split="test")

print("bin  EPE(model)  Dice deformed  Dice model  Dice linear")
for b in model.bins():
    print(f"{b!s:>4}  {model.get(b, 'epe_mean')[0]:9.2f}  {model.get(b, 'dice_deformed')[0]:13.1f}"
          f"  {model.get(b, 'dice_corrected')[0]:10.1f}  {linear.get(b, 'dice_corrected')[0]:11.1f}")
