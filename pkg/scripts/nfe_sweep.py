"""Distortion vs number of network evaluations for a trained checkpoint.

    python3 scripts/nfe_sweep.py runs/desk/run/best.ckpt --data runs/desk/data --nfe 1 2 5 10 20

Both ODE and SDE sampling are reported; the SDE rows average several seeds.
"""

import argparse
from pathlib import Path

import numpy as np

from dbcr.checkpoint import load_checkpoint
from dbcr.data import read_dataset
from dbcr.inference import InferenceConfig, run_inference
from dbcr.metrics import image_metrics


def evaluate(ck, scenes, icfg):
    rows = [image_metrics(run_inference(t.y, t.z, ck, icfg).clamp(0, 1).numpy(), t.x0) for t in scenes]
    return {k: float(np.nanmean([r[k] for r in rows])) for k in rows[0]}


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("checkpoint", type=Path)
    ap.add_argument("--data", type=Path, required=True)
    ap.add_argument("--split", default="test")
    ap.add_argument("--nfe", type=int, nargs="+", default=[1, 2, 5, 10])
    ap.add_argument("--sde-seeds", type=int, default=3)
    ap.add_argument("--limit", type=int, default=None, help="evaluate only the first K scenes")
    args = ap.parse_args()

    ck = load_checkpoint(args.checkpoint)
    scenes = read_dataset(args.data).load(args.split)[:args.limit]
    print(f"{len(scenes)} scenes, T={ck.schedule.T}")
    print(f"{'mode':<5}{'N':>4}{'PSNR':>9}{'SSIM':>8}{'MAE':>8}{'SAM':>8}")
    for n in args.nfe:
        if ck.schedule.T % n:
            print(f"skip N={n}: does not divide T")
            continue
        m = evaluate(ck, scenes, InferenceConfig(N=n))
        print(f"{'ode':<5}{n:>4}{m['psnr']:>9.3f}{m['ssim']:>8.4f}{m['mae']:>8.4f}{m['sam']:>8.3f}")
        runs = [evaluate(ck, scenes, InferenceConfig(N=n, mode="sde", seed=s)) for s in range(args.sde_seeds)]
        m = {k: np.mean([r[k] for r in runs]) for k in runs[0]}
        print(f"{'sde':<5}{n:>4}{m['psnr']:>9.3f}{m['ssim']:>8.4f}{m['mae']:>8.4f}{m['sam']:>8.3f}")


if __name__ == "__main__":
    main()
