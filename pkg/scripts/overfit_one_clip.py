"""Overfit the tiny model on one noise-free synthetic clip and record the loss trace.

    python scripts/overfit_one_clip.py --steps 300 --out results/overfit
"""
import argparse
from pathlib import Path

from vitalformer import model as M
from vitalformer.synth import ClipRecord, constant_rate_clip
from vitalformer.training import LossConfig, TrainConfig, build_windows, train, train_step_loss


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--bpm", type=float, default=72.0)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--fps", type=float, default=8.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="results/overfit")
    args = ap.parse_args()

    cfg = M.tiny_config(32, 12)
    sc = constant_rate_clip(args.bpm, duration_s=30.0, fs=args.fps, h=12, w=12)
    rec = ClipRecord("one", sc.clip, sc.pulse, sc.rate_gt, sc.skin, "train")
    res = train([rec], cfg, TrainConfig(steps=args.steps, seed=args.seed, wall_clock=False), out_dir=args.out)
    _, _, loss = train_step_loss(res.params, build_windows([rec], cfg), LossConfig())
    summary = f"final mean loss over all windows: {float(loss.values):.4f}\n"
    Path(args.out, "summary.txt").write_text(summary)
    print(summary, end="")


if __name__ == "__main__":
    main()
