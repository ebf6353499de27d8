import dataclasses

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import stats

from dvne.deformation import pose_from_rotations, toy_rig
from dvne.features import RandomConvFeatures
from dvne.guidance import RecordingPrior
from dvne.rendering import look_at
from dvne.synth import SceneSpec, build_scene, load_dataset
from dvne.training import (VIEWS, ZOOM_REGIONS, BranchKind, CameraSphere, MetricsWriter, ZoomConstraintError,
                           load_model, make_branches, mock_priors, read_reference, reference_camera, render_video,
                           sample_branch, sample_zoom_camera, save_model, stage1_reconstruct,
                           stage2_edit_foreground, stage3_edit_background, synthetic_reference, write_reference)

from .conftest import tiny_config, tiny_model

RIG = toy_rig()
REF_CAM = look_at((0.0, 0.0, 2.6), (0.0, 0.0, 0.0), 8, 8)
SPHERE = CameraSphere((0.0, 0.0, 0.0), width=8, height=8)
POSES = [pose_from_rotations(RIG, np.random.default_rng(k).normal(scale=0.3, size=(4, 3)), frame_index=k)
         for k in range(30)]


def test_branch_frequencies_chi_square():
    probs = (0.2, 0.4, 0.4)
    branches = make_branches(probs)
    rng = np.random.default_rng(0)
    kinds = [sample_branch(branches, rng, REF_CAM, RIG.rest_pose(), POSES, SPHERE).branch.kind
             for _ in range(10_000)]
    counts = [sum(k is kind for k in kinds) for kind in BranchKind]
    assert stats.chisquare(counts, np.array(probs) * 10_000).pvalue > 0.01


def test_reference_only_branch():
    rest = RIG.rest_pose()
    rng = np.random.default_rng(1)
    for _ in range(200):
        draw = sample_branch(make_branches((1, 0, 0)), rng, REF_CAM, rest, POSES, SPHERE)
        assert draw.camera is REF_CAM and draw.pose is rest


def test_frame_pose_branch_covers_all_frames():
    rng = np.random.default_rng(2)
    seen = {sample_branch(make_branches((0, 0, 1)), rng, REF_CAM, RIG.rest_pose(), POSES, SPHERE).frame_index
            for _ in range(2000)}
    assert seen == set(range(30))


def test_branch_errors():
    with pytest.raises(ValueError):
        sample_branch(make_branches((0.2, 0.4, 0.4)), np.random.default_rng(0), REF_CAM, RIG.rest_pose(), [], SPHERE)
    with pytest.raises(ValueError):
        make_branches((0.5, 0.5, 0.5))


def test_zoom_prompts_distinct():
    prompts = {f"a person, {r.suffix}, {v} view" for r in ZOOM_REGIONS.values() for v in VIEWS}
    assert len(ZOOM_REGIONS) == 7 and len(prompts) == 21


def test_head_zoom_camera_aims_at_anchor():
    model = tiny_model(0, perturb_deform=False)
    rest = RIG.rest_pose()
    rng = np.random.default_rng(4)
    for view in VIEWS:
        cam, prompt = sample_zoom_camera("head", view, rng, model, rest, 8, 8)
        assert prompt.endswith(f"head, {view} view")
        anchor = ZOOM_REGIONS["head"].anchor_point(RIG)
        to_anchor = anchor - cam.center
        # the anchor lies on the optical axis
        assert np.linalg.norm(np.cross(to_anchor / np.linalg.norm(to_anchor), cam.forward)) < 1e-9
        assert to_anchor @ cam.forward > 0


def test_arm_zoom_requires_rest_pose():
    model = tiny_model(0, perturb_deform=False)
    with pytest.raises(ZoomConstraintError):
        sample_zoom_camera("left arm", "front", np.random.default_rng(0), model, POSES[3])
    sample_zoom_camera("left arm", "front", np.random.default_rng(0), model, RIG.rest_pose())


def stage2_setup(probs, steps=6, seed=0):
    cfg = tiny_config(**{"stage2.steps": steps, "stage2.branch_probs": probs, "stage2.resolution": [6, 6],
                         "stage2.log_every": 0, "seed": seed})
    scene = build_scene(SceneSpec(frames=3, width=6, height=6))
    bundle = synthetic_reference(scene, reference_camera(scene.rig, cfg.stage2, 6, 6))
    priors = {k: RecordingPrior(p, k) for k, p in mock_priors(cfg.stage2, 6, 6).items()}
    return cfg, bundle, priors, scene.poses


def test_branch_loss_pairing():
    cfg, bundle, priors, poses = stage2_setup((0.34, 0.33, 0.33), steps=12)
    log = []
    out = stage2_edit_foreground(tiny_model(0), bundle, priors, cfg, poses,
                                 step_hook=lambda step, draw, prompt: log.append(
                                     (draw.branch.kind, len(priors["2d"].calls), len(priors["3d"].calls))))
    assert {k for k, _, _ in log} == set(BranchKind)
    prev2 = prev3 = 0
    for kind, n2, n3 in log:
        d2, d3 = n2 - prev2, n3 - prev3
        expected = {BranchKind.REF_RECON: (0, 0), BranchKind.RANDOM_VIEW_REF_POSE: (1, 1),
                    BranchKind.RANDOM_VIEW_FRAME_POSE: (1, 0)}[kind]
        assert (d2, d3) == expected
        prev2, prev3 = n2, n3
    assert len(out.losses) == 12


def test_stage2_freezes_background():
    cfg, bundle, priors, poses = stage2_setup((0.34, 0.33, 0.33))
    model = tiny_model(1)
    before = model.params.values.copy()
    stage2_edit_foreground(model, bundle, priors, cfg, poses)
    frozen = ~model.params.mask(["human."])
    assert_array_equal(model.params.values[frozen], before[frozen])
    assert np.any(model.params.values[~frozen] != before[~frozen])


def test_stage3_freezes_human(rng):
    cfg = tiny_config(**{"stage3.steps": 3, "stage3.resolution": [6, 6], "stage3.log_every": 0})
    model = tiny_model(2)
    before = model.params.values.copy()
    cams = [look_at((0.0, 0.0, 2.6), (0.0, 0.0, 0.0), 6, 6)]
    out = stage3_edit_background(model, rng.uniform(size=(10, 10, 3)), RandomConvFeatures(seed=0, kernel=1, strides=(1, 1)),
                                 cfg, cams,
                                 [RIG.rest_pose()])
    scene = model.params.mask(["scene."])
    assert_array_equal(model.params.values[~scene], before[~scene])
    assert np.any(model.params.values[scene] != before[scene])
    assert len(out.statistics) == 3


def test_stage1_zero_steps_is_identity(tiny_dataset_dir):
    data = load_dataset(tiny_dataset_dir)
    model = tiny_model(0)
    before = model.params.values.copy()
    out = stage1_reconstruct(data, model, tiny_config(**{"stage1.steps": 0}), eval_frames=[0])
    assert_array_equal(model.params.values, before)
    assert out.losses == [] and out.eval_start == out.eval_end


def test_stage1_is_deterministic(tiny_dataset_dir):
    data = load_dataset(tiny_dataset_dir)
    cfg = tiny_config(**{"stage1.steps": 5, "stage1.patch_size": 8, "stage1.patches_per_step": 2,
                         "stage1.log_every": 0})
    a = stage1_reconstruct(data, tiny_model(0), cfg, eval_frames=[0])
    b = stage1_reconstruct(data, tiny_model(0), cfg, eval_frames=[0])
    assert a.losses == b.losses
    assert_array_equal(a.model.params.values, b.model.params.values)


def test_reference_round_trip(tmp_path):
    scene = build_scene(SceneSpec(frames=2, width=8, height=8))
    bundle = synthetic_reference(scene, reference_camera(scene.rig, tiny_config().stage2, 8, 8))
    write_reference(tmp_path, bundle)
    back = read_reference(tmp_path)
    # PNG stores 8 bits per channel
    assert np.abs(back.image - bundle.image).max() <= 0.5 / 255 + 1e-12
    assert_allclose(back.mask, bundle.mask, atol=1e-6)
    assert_allclose(back.depth, bundle.depth, rtol=1e-6)
    assert back.pose.is_rest()


def test_checkpoint_round_trip(tmp_path):
    model = tiny_model(5)
    save_model(model, tmp_path)
    back = load_model(tmp_path)
    assert_array_equal(back.params.values, model.params.values)
    assert back.params.names() == model.params.names()


def test_metrics_header(tmp_path):
    w = MetricsWriter(tmp_path / "m.csv", ["loss"])
    w.write(0, "stage1", loss=1.5)
    w.close()
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "# dvne-metrics v1"
    assert lines[1] == "step,branch,loss,wall"
    assert lines[2].startswith("0,stage1,1.5,")


def test_render_video(tmp_path, tiny_dataset_dir):
    data = load_dataset(tiny_dataset_dir)
    model = tiny_model(0)
    cfg = dataclasses.replace(tiny_config().render)
    a = render_video(model, data.cameras, data.poses, tmp_path, (6, 6), cfg)
    b = render_video(model, data.cameras, data.poses, None, (6, 6), cfg)
    assert len(a) == len(data) == len(list(tmp_path.glob("*.png")))
    for x, y in zip(a, b):
        assert x.shape == (6, 6, 3)
        assert_array_equal(x, y)
