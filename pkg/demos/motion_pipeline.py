"""
Synthetic motion, end to end
============================

Generates the synthetic motion classes, fits the VQ autoencoder, trains the
conditional drift network on the quantised latents and samples with both
the one-step and the diversity sampler. Prints the metric report for each.

The quick config runs in seconds and gives rough samples; pass ``--full``
for the reference-scale run (500 VQ epochs, about four minutes)::

    python3 demos/motion_pipeline.py [--full] [--out runs/demo]
"""
import argparse
from pathlib import Path

from dsdfm import pipeline

here = Path(__file__).resolve().parent.parent
parser = argparse.ArgumentParser()
parser.add_argument("--full", action="store_true")
parser.add_argument("--out", type=Path, default=Path("runs/demo"))
args = parser.parse_args()

cfg = pipeline.ExperimentConfig.load(here / "configs" / ("motion.json" if args.full else "motion-quick.json"))

vq_res = pipeline.train_vq_stage(cfg, args.out)
print(f"VQ: held-out MSE {vq_res['test_mse']:.4f}, code usage {vq_res['test_usage']:.0%}")

drift = pipeline.train_drift_stage(cfg, args.out)
print(f"drift: held-out J_drift {drift['held_out']['J_drift']:.4f}, J_CL {drift['held_out']['J_CL']:.4f}")

for mode in ("derode-1", "divsde"):
    res = pipeline.sample_stage(cfg, args.out, mode)
    rep = pipeline.eval_stage(args.out / "real.dsdf", res["path"], cfg=cfg)
    print(f"{mode:>8}: FID {rep.fid:.3f}  accuracy {rep.accuracy:.3f}  diversity {rep.diversity:.3f} "
          f"(real {rep.diversity_real:.3f})  {1e6 * res['seconds'] / res['count']:.1f} us/sample")
