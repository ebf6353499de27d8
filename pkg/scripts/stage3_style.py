"""Stylize the background of a stage-1 checkpoint and track feature statistics.

Prints the style loss and the distance between the render's channel mean/std
feature statistics and the style's, both averaged over 50-step blocks.

    python scripts/stage3_style.py runs/stage1 --steps 500 [--style image.png]
"""

import argparse
import logging
from pathlib import Path

import numpy as np

from dvne.config import load_config, override
from dvne.features import RandomConvFeatures
from dvne.io import read_png
from dvne.synth import load_dataset
from dvne.training import load_model, stage3_edit_background


def stripes(size=64):
    yy, xx = np.mgrid[0:size, 0:size] / size
    return np.stack([0.5 + 0.5 * np.sin(12 * xx), 0.3 + 0.3 * np.cos(9 * yy), 0.8 * (xx > 0.5)], -1)


def main():
    p = argparse.ArgumentParser()
    p.add_argument("stage1_dir")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--style", help="PNG style image (default: procedural stripes)")
    p.add_argument("--w-content", type=float, default=0.5)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    root, res = Path(args.stage1_dir), args.resolution
    data = load_dataset(root / "data")
    cfg = override(load_config(root / "checkpoint" / "model.toml"),
                   **{"optim.lr": 5e-3, "optim.warmup": 10, "stage3.steps": args.steps,
                      "stage3.resolution": [res, res], "stage3.chunk": 512, "stage3.w_content": args.w_content,
                      "stage3.log_every": 50})
    style = read_png(args.style) if args.style else stripes()
    out = stage3_edit_background(load_model(root / "checkpoint"), style, RandomConvFeatures(seed=cfg.seed), cfg,
                                 data.cameras, data.poses)
    block = 50
    n = len(out.losses) // block * block
    print("style loss    ", np.round(np.asarray(out.losses[:n]).reshape(-1, block).mean(1), 4).tolist())
    print("stat distance ", np.round(np.asarray(out.statistics[:n]).reshape(-1, block).mean(1), 4).tolist())


if __name__ == "__main__":
    main()
