"""Edit the human of a stage-1 checkpoint toward a solid colour with the analytic mock priors.

Runs the reference-only schedule and the full three-branch schedule from the
same checkpoint and prints reference-view MSE and per-view subject colour.

    python scripts/stage2_mock_priors.py runs/stage1 --steps 300
"""

import argparse
import dataclasses
import logging
from pathlib import Path

import numpy as np

from dvne.config import load_config, override
from dvne.synth import SceneSpec, build_scene, load_dataset
from dvne.rendering import render_image
from dvne.training import (CameraSphere, load_model, mock_priors, reference_camera, stage2_edit_foreground,
                           subject_color, synthetic_reference)

SCHEDULES = {"reference-only": (1.0, 0.0, 0.0), "three-branch": (0.2, 0.4, 0.4)}


def main():
    p = argparse.ArgumentParser()
    p.add_argument("stage1_dir", help="output directory of stage1_synthetic.py")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--resolution", type=int, default=32)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    root, res = Path(args.stage1_dir), args.resolution
    data = load_dataset(root / "data")
    base = override(load_config(root / "checkpoint" / "model.toml"),
                    **{"optim.lr": 1e-2, "optim.warmup": 20, "stage2.steps": args.steps,
                       "stage2.resolution": [res, res], "stage2.log_every": 100})
    scene = build_scene(SceneSpec.from_dict(data.meta["spec"]), data.meta["seed"])
    bundle = synthetic_reference(scene, reference_camera(scene.rig, base.stage2, res, res), base.stage2.mock_target)
    sphere = CameraSphere((0.0, 0.0, 0.0), width=res, height=res)
    target = np.asarray(base.stage2.mock_target)
    for name, probs in SCHEDULES.items():
        cfg = override(base, **{"stage2.branch_probs": probs})
        model = load_model(root / "checkpoint")
        human = dataclasses.replace(cfg.render, include_scene=False)

        def ref_mse():
            img = render_image(bundle.camera, model, bundle.pose, cfg=human, background=np.zeros(3))["color"]
            return float(np.mean((img - bundle.image) ** 2))

        before = ref_mse()
        stage2_edit_foreground(model, bundle, mock_priors(cfg.stage2, res, res), cfg, data.poses)
        print(f"{name}: reference MSE {before:.5f} -> {ref_mse():.5f}")
        for az in (45.0, 135.0, 225.0, 315.0):
            c = subject_color(model, sphere.camera(az, 10.0), bundle.pose, cfg.render)
            print(f"  azimuth {az:5.1f}: colour {np.round(c, 3).tolist()} distance {np.linalg.norm(c - target):.4f}")


if __name__ == "__main__":
    main()
