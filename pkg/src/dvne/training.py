"""Reconstruction and the two editing stages, plus branch/zoom sampling and run I/O."""

from __future__ import annotations

import csv
import dataclasses
import enum
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig, dump_config, load_config, stream
from .deformation import SkeletonPose, forward_deform
from .features import RandomConvFeatures
from .guidance import (AvgPoolCodec, GaussianPrior, IdentityCodec, ImageCameraConditioning, NoiseSchedule,
                       TextConditioning, ViewColorPrior, relative_camera, sds_image_gradient, view_label)
from .io import (IngestionError, read_camera, read_pfm, read_png, read_pose, resize_image, write_camera, write_pfm,
                 write_png, write_pose)
from .losses import RecWeights, distortion_regularizer, feature_l2_loss, nnfm_loss, rec_loss
from .model import HUMAN, SCENE, ModelConfig, VideoNeRF
from .optim import Adam
from .params import CheckpointError, load_checkpoint, save_checkpoint
from .rendering import Camera, RenderConfig, look_at, render_image, render_image_deferred, render_rays
from .synth import analytic_render

log = logging.getLogger("dvne.training")

METRICS_VERSION = 1


class TrainingDivergedError(FloatingPointError):
    pass


class ZoomConstraintError(ValueError):
    pass


# -- run bundles -----------------------------------------------------------------------------

def save_model(model: VideoNeRF, out_dir, run_config: RunConfig | None = None):
    """Write ``params.dvne`` and the config needed to rebuild the model."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model.params, out / "params.dvne")
    cfg = run_config if run_config is not None else RunConfig(model=model.config)
    dump_config(cfg, out / "model.toml")
    return out / "params.dvne"


def load_model(path) -> VideoNeRF:
    """Rebuild a model from a checkpoint directory (or the params file inside one)."""
    path = Path(path)
    ckpt = path / "params.dvne" if path.is_dir() else path
    if not ckpt.exists():
        raise CheckpointError(f"{ckpt}: checkpoint not found")
    cfg_path = ckpt.parent / "model.toml"
    model_cfg = load_config(cfg_path).model if cfg_path.exists() else ModelConfig()
    return VideoNeRF.build(model_cfg, params=load_checkpoint(ckpt))


class MetricsWriter:
    """Append-only CSV with a versioned header row."""

    def __init__(self, path, columns):
        self.path = Path(path) if path else None
        self.columns = ["step", "branch", *columns, "wall"]
        self.rows = []
        self._t0 = time.perf_counter()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            fresh = not self.path.exists() or self.path.stat().st_size == 0
            self._fh = self.path.open("a", newline="")
            self._csv = csv.writer(self._fh)
            if fresh:
                self._fh.write(f"# dvne-metrics v{METRICS_VERSION}\n")
                self._csv.writerow(self.columns)
                self._fh.flush()

    def write(self, step, branch, **terms):
        row = [step, branch, *(terms.get(c, "") for c in self.columns[2:-1]), round(time.perf_counter() - self._t0, 4)]
        self.rows.append(dict(zip(self.columns, row)))
        if self.path is not None:
            self._csv.writerow(row)
            self._fh.flush()

    def close(self):
        if self.path is not None:
            self._fh.close()


def _check_finite(step, branch, loss, grad, extra=""):
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        bad = int(np.sum(~np.isfinite(grad)))
        raise TrainingDivergedError(f"non-finite loss at step {step} (branch {branch}): loss={loss}, "
                                    f"{bad} non-finite gradient entries{extra}")


# -- stage 1 ---------------------------------------------------------------------------------

@dataclass
class Stage1Result:
    model: VideoNeRF
    losses: list
    eval_start: float
    eval_end: float
    holdout: list


def holdout_masks(dataset, fraction, rng):
    """Per-frame boolean maps of pixels withheld from training."""
    out = []
    for frame in dataset.frames:
        H, W = frame.shape[:2]
        m = np.zeros(H * W, dtype=bool)
        m[rng.choice(H * W, int(round(fraction * H * W)), replace=False)] = True
        out.append(m.reshape(H, W))
    return out


def frame_error(model, dataset, holdout, frames, render_cfg, held_out):
    """Mean squared colour error over held-out (or held-in) pixels of ``frames``."""
    total, count = 0.0, 0
    for k in frames:
        img = render_image(dataset.cameras[k], model, dataset.poses[k], cfg=render_cfg)["color"]
        sel = holdout[k] if held_out else ~holdout[k]
        total += float(np.sum((img[sel] - dataset.frames[k][sel]) ** 2))
        count += int(sel.sum()) * 3
    return total / max(count, 1)


def stage1_reconstruct(dataset, model: VideoNeRF, cfg: RunConfig, metrics=None, eval_frames=None) -> Stage1Result:
    """Fit the video-NeRF to the source frames with patch-sampled photometric supervision."""
    if len(dataset.frames) < 2:
        raise IngestionError(f"need at least two frames, found {len(dataset.frames)}")
    for name in ("cameras", "poses"):
        records = getattr(dataset, name)
        if len(records) != len(dataset.frames):
            raise IngestionError(f"frame {len(records)}: missing {name[:-1]} record")
    s1, rcfg = cfg.stage1, cfg.render
    holdout = holdout_masks(dataset, s1.holdout_fraction, stream(cfg.seed, "holdout"))
    pix_rng = stream(cfg.seed, "pixels")
    strat_rng = stream(cfg.seed, "stratification")
    provider = RandomConvFeatures(seed=cfg.seed)
    opt = Adam(model.params.size, cfg.optim)
    writer = metrics or MetricsWriter(None, ["photometric", "feature", "distortion", "total"])
    eval_frames = list(range(0, len(dataset.frames), max(1, len(dataset.frames) // 4))) if eval_frames is None \
        else list(eval_frames)
    eval_start = frame_error(model, dataset, holdout, eval_frames, rcfg, held_out=False)
    p = s1.patch_size
    rays = [cam.pixel_rays() for cam in dataset.cameras]
    losses = []
    for step in range(s1.steps):
        draws = []
        for _ in range(s1.patches_per_step):
            k = int(pix_rng.integers(len(dataset.frames)))
            H, W = dataset.frames[k].shape[:2]
            r0, c0 = int(pix_rng.integers(H - p + 1)), int(pix_rng.integers(W - p + 1))
            idx = ((np.arange(r0, r0 + p)[:, None]) * W + np.arange(c0, c0 + p)[None, :]).reshape(-1)
            draws.append((k, idx, r0, c0))
        terms = {}

        def objective(theta):
            photo, feat, dist = 0.0, 0.0, 0.0
            for k, idx, r0, c0 in draws:
                o, d, r = (a[idx] for a in rays[k])
                out = render_rays(model, o, d, r, dataset.poses[k], theta, rcfg, strat_rng)
                target = dataset.frames[k][r0:r0 + p, c0:c0 + p].reshape(-1, 3)
                keep = ~holdout[k][r0:r0 + p, c0:c0 + p].reshape(-1)
                err = ad.mul(ad.square(ad.sub(out.color, target)), keep[:, None].astype(np.float64))
                photo = ad.add(photo, ad.div(ad.sum(err), max(3.0 * keep.sum(), 1.0)))
                if s1.w_feature:
                    # held-out pixels are replaced by the (constant) render so they carry no signal
                    filled = np.where(keep[:, None], target, ad.value(out.color))
                    feat = ad.add(feat, feature_l2_loss(ad.reshape(out.color, (p, p, 3)), filled.reshape(p, p, 3),
                                                        provider))
                if s1.w_distortion:
                    dreg = distortion_regularizer(out.weights, out.t, out.extras["delta"])
                    dist = ad.add(dist, ad.mean(dreg))
            n = float(len(draws))
            photo, feat, dist = ad.div(photo, n), ad.div(feat, n), ad.div(dist, n)
            terms.update(photometric=float(ad.value(photo)), feature=float(ad.value(feat)),
                         distortion=float(ad.value(dist)))
            total = ad.add(ad.mul(s1.w_photometric, photo),
                           ad.add(ad.mul(s1.w_feature, feat), ad.mul(s1.w_distortion, dist)))
            return total

        loss, tape = ad.record(objective, model.params)
        grad = ad.backward(tape)
        model.params.zero_grad()
        _check_finite(step, "stage1", float(loss), grad)
        opt.step(model.params.values, grad)
        losses.append(terms["photometric"])
        writer.write(step, "stage1", total=float(loss), **terms)
        if s1.log_every and step % s1.log_every == 0:
            log.info("stage1 step %d photometric %.5f", step, terms["photometric"])
    eval_end = frame_error(model, dataset, holdout, eval_frames, rcfg, held_out=False)
    return Stage1Result(model, losses, eval_start, eval_end, holdout)


# -- branch sampling ---------------------------------------------------------------------------

class BranchKind(enum.Enum):
    REF_RECON = "ref_recon"
    RANDOM_VIEW_REF_POSE = "random_view_ref_pose"
    RANDOM_VIEW_FRAME_POSE = "random_view_frame_pose"


@dataclass(frozen=True)
class TrainingBranch:
    kind: BranchKind
    probability: float


def make_branches(probs):
    probs = tuple(float(p) for p in probs)
    if len(probs) != 3 or min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-9:
        raise ValueError(f"branch probabilities must be three non-negative numbers summing to 1, got {probs}")
    return tuple(TrainingBranch(k, p) for k, p in zip(BranchKind, probs))


@dataclass(frozen=True)
class CameraSphere:
    """Cameras on a sphere around ``target`` looking inward; azimuth 0 faces the subject's front."""

    target: tuple
    radius: float = 2.6
    azimuth_deg: tuple = (0.0, 360.0)
    elevation_deg: tuple = (-10.0, 45.0)
    width: int = 128
    height: int = 128
    fov_deg: float = 45.0

    def camera(self, azimuth_deg, elevation_deg, frame_index=0) -> Camera:
        az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
        offset = self.radius * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        target = np.asarray(self.target, dtype=np.float64)
        return look_at(target + offset, target, self.width, self.height, self.fov_deg, frame_index=frame_index)

    def sample(self, rng):
        az = float(rng.uniform(*self.azimuth_deg))
        el = float(rng.uniform(*self.elevation_deg))
        return self.camera(az, el), az


@dataclass
class BranchDraw:
    branch: TrainingBranch
    camera: Camera
    pose: SkeletonPose
    azimuth_deg: float
    frame_index: int | None = None


def sample_branch(branches, rng, ref_camera: Camera, ref_pose: SkeletonPose, frame_poses,
                  sphere: CameraSphere) -> BranchDraw:
    """Draw a branch and its (camera, pose) pair."""
    if len(frame_poses) == 0:
        raise ValueError("frame pose sequence is empty")
    probs = np.array([b.probability for b in branches])
    i = int(rng.choice(len(branches), p=probs / probs.sum()))
    branch = branches[i]
    if branch.kind is BranchKind.REF_RECON:
        return BranchDraw(branch, ref_camera, ref_pose, 0.0)
    camera, az = sphere.sample(rng)
    if branch.kind is BranchKind.RANDOM_VIEW_REF_POSE:
        return BranchDraw(branch, camera, ref_pose, az)
    k = int(rng.integers(len(frame_poses)))
    return BranchDraw(branch, camera, frame_poses[k], az, k)


# -- zoom-in regions ---------------------------------------------------------------------------

VIEWS = ("front", "side", "back")
_VIEW_AZIMUTH = {"front": ((-60.0, 60.0),), "side": ((60.0, 120.0), (-120.0, -60.0)), "back": ((120.0, 240.0),)}


@dataclass(frozen=True)
class ZoomRegion:
    """A body part the camera can zoom onto.

    ``anchor`` lists (joint, fraction along its bone) candidates; the first
    joint present in the rig is used.  ``None`` means the bounding-box centre.
    """

    name: str
    anchor: tuple | None
    distance_scale: float = 1.0
    arm: bool = False
    views: tuple = VIEWS

    @property
    def suffix(self):
        return self.name

    def anchor_point(self, rig):
        if self.anchor is None:
            pts = np.concatenate([rig.rest_joints, rig.tails])
            return 0.5 * (pts.min(0) + pts.max(0))
        for joint, frac in self.anchor:
            if joint in rig.joint_names:
                i = rig.index(joint)
                return rig.rest_joints[i] + frac * (rig.tails[i] - rig.rest_joints[i])
        raise KeyError(f"rig {rig.name!r} has no joint for region {self.name!r}")


ZOOM_REGIONS = {r.name: r for r in (
    ZoomRegion("full body", None, 3.0),
    ZoomRegion("head", (("head", 0.3), ("neck", 0.6)), 0.8),
    ZoomRegion("upper body", (("spine3", 0.0), ("pelvis", 0.85)), 1.5),
    ZoomRegion("midsection", (("spine1", 0.5), ("pelvis", 0.5)), 1.5),
    ZoomRegion("lower body", (("left_knee", -0.3), ("pelvis", 0.1)), 1.5),
    ZoomRegion("left arm", (("left_elbow", 0.0), ("left_shoulder", 0.5)), 1.2, arm=True),
    ZoomRegion("right arm", (("right_elbow", 0.0), ("right_shoulder", 0.5)), 1.2, arm=True),
)}


def zoom_prompt(base_prompt, region: ZoomRegion, view: str):
    return f"{base_prompt}, {region.suffix}, {view} view"


def available_regions(pose: SkeletonPose):
    return [r for r in ZOOM_REGIONS.values() if not r.arm or pose.is_rest()]


def sample_zoom_camera(region: ZoomRegion | str, view: str, rng, model: VideoNeRF, pose: SkeletonPose,
                       width=128, height=128, distance=0.45, fov_deg=45.0, elevation_deg=(-10.0, 45.0),
                       base_prompt="a person"):
    """Camera looking straight at the region's anchor (mapped into ``pose``) plus its prompt."""
    region = ZOOM_REGIONS[region] if isinstance(region, str) else region
    if region.name not in ZOOM_REGIONS:
        raise KeyError(f"unregistered zoom region {region.name!r}")
    if view not in VIEWS:
        raise ValueError(f"view must be one of {VIEWS}")
    if region.arm and not pose.is_rest():
        raise ZoomConstraintError(f"region {region.name!r} can only be sampled under the T-pose")
    rig = model.deformation.rig
    anchor = forward_deform(region.anchor_point(rig)[None], pose, model.deformation)[0]
    ranges = _VIEW_AZIMUTH[view]
    lo, hi = ranges[int(rng.integers(len(ranges)))]
    az = np.radians(rng.uniform(lo, hi))
    el = np.radians(rng.uniform(*elevation_deg))
    direction = np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
    eye = anchor + distance * region.distance_scale * direction
    return look_at(eye, anchor, width, height, fov_deg), zoom_prompt(base_prompt, region, view)


# -- stage 2 -----------------------------------------------------------------------------------

@dataclass
class ReferenceBundle:
    """Reference image with its mask, depth, camera and pose."""

    image: np.ndarray
    mask: np.ndarray
    depth: np.ndarray
    camera: Camera
    pose: SkeletonPose

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        H, W = self.camera.height, self.camera.width
        if self.image.shape != (H, W, 3) or self.mask.shape != (H, W) or self.depth.shape != (H, W):
            raise ValueError(f"reference arrays must match the {W}x{H} camera")
        if self.mask.min() < 0 or self.mask.max() > 1:
            raise ValueError("reference mask must lie in [0, 1]")
        if self.mask.sum() == 0:
            raise ValueError("reference mask is empty")


def reference_camera(rig, s2, width, height) -> Camera:
    """Front view (azimuth 0, elevation 0) at full-body framing distance."""
    return _sphere(rig, s2, width, height).camera(0.0, 0.0)


def _sphere(rig, s2, width, height):
    pts = np.concatenate([rig.rest_joints, rig.tails])
    return CameraSphere(tuple(0.5 * (pts.min(0) + pts.max(0))), s2.camera_radius, tuple(s2.azimuth_deg),
                        tuple(s2.elevation_deg), width, height, s2.fov_deg)


def synthetic_reference(scene, camera: Camera, color=(1.0, 0.0, 0.0)) -> ReferenceBundle:
    """Reference of the synthetic figure alone, recoloured, in its rest (T-) pose."""
    pose = scene.rig.rest_pose()
    colors = tuple(tuple(color) for _ in scene.rig.joint_names)
    r = analytic_render(scene, camera, pose, figure_colors=colors, background=False)
    depth = np.where(np.isfinite(r["depth"]), r["depth"], 0.0)
    return ReferenceBundle(r["color"], r["mask"], depth, camera, pose)


def write_reference(out_dir, bundle: ReferenceBundle):
    out = Path(out_dir)
    write_png(out / "image.png", bundle.image)
    write_pfm(out / "mask.pfm", bundle.mask)
    write_pfm(out / "depth.pfm", bundle.depth)
    write_camera(out / "camera.json", bundle.camera)
    write_pose(out / "pose.json", bundle.pose, with_parents=True)


def read_reference(path) -> ReferenceBundle:
    root = Path(path)
    for name in ("image.png", "mask.pfm", "depth.pfm", "camera.json", "pose.json"):
        if not (root / name).exists():
            raise IngestionError(f"reference bundle {root}: missing {name}")
    try:
        return ReferenceBundle(read_png(root / "image.png"), read_pfm(root / "mask.pfm"), read_pfm(root / "depth.pfm"),
                               read_camera(root / "camera.json"), read_pose(root / "pose.json"))
    except ValueError as exc:
        raise IngestionError(f"reference bundle {root}: {exc}") from exc


def resize_reference(bundle: ReferenceBundle, width, height) -> ReferenceBundle:
    """Nearest-neighbour resample of the reference arrays to a new camera resolution."""
    if (width, height) == (bundle.camera.width, bundle.camera.height):
        return bundle
    rows = (np.arange(height) + 0.5) * bundle.camera.height / height
    cols = (np.arange(width) + 0.5) * bundle.camera.width / width
    r, c = rows.astype(int)[:, None], cols.astype(int)[None, :]
    return ReferenceBundle(bundle.image[r, c], bundle.mask[r, c], bundle.depth[r, c],
                           bundle.camera.with_resolution(width, height), bundle.pose)


@dataclass
class Stage2Result:
    model: VideoNeRF
    losses: list
    branches: list
    calls: list = field(default_factory=list)


def _human_render_cfg(cfg: RenderConfig):
    return dataclasses.replace(cfg, include_scene=False, include_human=True)


def stage2_edit_foreground(model: VideoNeRF, bundle: ReferenceBundle, priors, cfg: RunConfig, frame_poses,
                           metrics=None, step_hook=None) -> Stage2Result:
    """Edit the human field with the three-branch schedule.

    ``priors`` maps ``"2d"`` to a text-conditioned prior and ``"3d"`` to an
    image+camera-conditioned prior.  Only human-field parameters change.
    """
    s2 = cfg.stage2
    schedule = NoiseSchedule(s2.t_min, s2.t_max, s2.schedule_offset)
    branches = make_branches(s2.branch_probs)
    W, H = bundle.camera.width, bundle.camera.height
    sphere = _sphere(model.deformation.rig, s2, W, H)
    rec_w = RecWeights(s2.w_rgb, s2.w_mask, s2.w_depth)
    rcfg = _human_render_cfg(cfg.render)
    branch_rng, cam_rng = stream(cfg.seed, "branch"), stream(cfg.seed, "camera")
    noise_rng, zoom_rng, bg_rng = stream(cfg.seed, "noise"), stream(cfg.seed, "zoom"), stream(cfg.seed, "background")
    trainable = model.params.mask([HUMAN + "."])
    opt = Adam(model.params.size, cfg.optim, trainable)
    writer = metrics or MetricsWriter(None, ["rec", "sds_2d", "sds_3d", "t_2d", "t_3d", "zoom"])
    losses, kinds = [], []
    for step in range(s2.steps):
        draw = sample_branch(branches, branch_rng, bundle.camera, bundle.pose, frame_poses, sphere)
        kind = draw.branch.kind
        camera, prompt, zoom = draw.camera, s2.base_prompt, ""
        if kind is BranchKind.REF_RECON:
            def objective(theta):
                r = render_image(bundle.camera, model, bundle.pose, theta, rcfg, background=np.zeros(3))
                return rec_loss(r, bundle, rec_w)

            loss, tape = ad.record(objective, model.params)
            grad = ad.backward(tape)
            terms = {"rec": float(loss)}
        else:
            view = view_label(draw.azimuth_deg)
            if s2.zoom_prob > 0 and zoom_rng.uniform() < s2.zoom_prob:
                regions = available_regions(draw.pose)
                region = regions[int(zoom_rng.integers(len(regions)))]
                camera, prompt = sample_zoom_camera(region, view, cam_rng, model, draw.pose, W, H, s2.zoom_distance,
                                                    s2.fov_deg, s2.elevation_deg, s2.base_prompt)
                zoom = region.name
            else:
                prompt = f"{s2.base_prompt}, {view} view"
            gray = np.full(3, bg_rng.uniform(0.0, 1.0)) if s2.background == "random-gray" else None
            pose = draw.pose
            image, tape = ad.record(
                lambda th: render_image(camera, model, pose, th, rcfg, background=gray)["color"], model.params)
            image_grad = np.zeros_like(image)
            terms = {}
            if kind is BranchKind.RANDOM_VIEW_REF_POSE and s2.lambda_3d:
                R, T = relative_camera(bundle.camera, camera)
                g3, info = sds_image_gradient(image, priors["3d"], ImageCameraConditioning(bundle.image, R, T),
                                              schedule, s2.lambda_3d, noise_rng, s2.skip_codec_jacobian)
                image_grad += g3
                terms.update(sds_3d=float(np.mean(info["residual"] ** 2)), t_3d=info["t"])
            if s2.lambda_2d:
                g2, info = sds_image_gradient(image, priors["2d"], TextConditioning(prompt), schedule, s2.lambda_2d,
                                              noise_rng, s2.skip_codec_jacobian)
                image_grad += g2
                terms.update(sds_2d=float(np.mean(info["residual"] ** 2)), t_2d=info["t"])
            grad = ad.backward(tape, image_grad)
            loss = terms.get("sds_2d", 0.0) + terms.get("sds_3d", 0.0)
        model.params.zero_grad()
        _check_finite(step, kind.value, float(loss), grad, f", camera centre {np.round(camera.center, 4).tolist()}")
        opt.step(model.params.values, grad)
        losses.append(float(loss))
        kinds.append(kind)
        writer.write(step, kind.value, zoom=zoom, **terms)
        if step_hook is not None:
            step_hook(step, draw, prompt)
        if s2.log_every and step % s2.log_every == 0:
            log.info("stage2 step %d branch %s loss %.5f", step, kind.value, float(loss))
    return Stage2Result(model, losses, kinds)


def make_codec(factor):
    return IdentityCodec() if factor <= 1 else AvgPoolCodec(factor)


def mock_priors(s2, width, height):
    """Analytic stand-ins for the two diffusion priors, both targeting ``s2.mock_target``."""
    schedule = NoiseSchedule(s2.t_min, s2.t_max, s2.schedule_offset)
    codec = make_codec(s2.codec_factor)
    target = np.asarray(s2.mock_target, dtype=np.float64)
    mean = np.broadcast_to(target, (height, width, 3)).copy()
    return {"2d": GaussianPrior(mean, schedule, codec, label="personalized-2d", conditioning="text"),
            "3d": ViewColorPrior({"default": target}, schedule, codec, label="view-3d")}


def subject_color(model: VideoNeRF, camera: Camera, pose: SkeletonPose, render_cfg: RenderConfig):
    """Opacity-weighted mean colour of the human field seen from ``camera``."""
    r = render_image(camera, model, pose, cfg=_human_render_cfg(render_cfg), background=np.zeros(3))
    acc = r["mask"].sum()
    if acc <= 0:
        return np.full(3, np.nan)
    return r["color"].reshape(-1, 3).sum(0) / acc


# -- stage 3 -----------------------------------------------------------------------------------

@dataclass
class Stage3Result:
    model: VideoNeRF
    losses: list
    statistics: list


def feature_statistics(image, provider):
    f = np.asarray(provider(np.asarray(image)))
    f = f.reshape(-1, f.shape[-1])
    return np.concatenate([f.mean(0), f.std(0)])


def stage3_edit_background(model: VideoNeRF, style_image, provider, cfg: RunConfig, cameras, poses,
                           metrics=None, step_hook=None) -> Stage3Result:
    """Stylize the background field with deferred back-propagation; the human field is untouched."""
    s3 = cfg.stage3
    style_image = np.asarray(style_image, dtype=np.float64)
    if style_image.ndim != 3 or style_image.shape[2] != 3:
        raise ValueError(f"style image must be (H, W, 3), got {style_image.shape}")
    W, H = s3.resolution
    # features are scale dependent: compare style and render at the same resolution
    style_image = resize_image(style_image, W, H)
    cams = [c.with_resolution(W, H) for c in cameras]
    rcfg = dataclasses.replace(cfg.render, include_human=False, include_scene=True)
    trainable = model.params.mask([SCENE + "."])
    opt = Adam(model.params.size, cfg.optim, trainable)
    rng = stream(cfg.seed, "camera")
    sources = {}
    style_stats = feature_statistics(style_image, provider)
    writer = metrics or MetricsWriter(None, ["nnfm", "content", "stat_dist"])
    losses, stats = [], []
    for step in range(s3.steps):
        k = int(rng.integers(len(cams)))
        if k not in sources:
            sources[k] = render_image(cams[k], model, poses[k], cfg=rcfg)["color"]

        def loss_fn(img):
            total = ad.mul(s3.w_nnfm, nnfm_loss(img, style_image, provider))
            if s3.w_content:
                total = ad.add(total, ad.mul(s3.w_content, feature_l2_loss(img, sources[k], provider)))
            return total

        image = render_image(cams[k], model, poses[k], cfg=rcfg)["color"]
        loss, loss_grad = ad.value_and_grad(loss_fn, image)
        grad = render_image_deferred(cams[k], model, poses[k], s3.chunk, loss_grad, rcfg, trainable=trainable)
        model.params.zero_grad()
        _check_finite(step, "stage3", float(loss), grad)
        opt.step(model.params.values, grad)
        dist = float(np.linalg.norm(feature_statistics(image, provider) - style_stats))
        losses.append(float(loss))
        stats.append(dist)
        writer.write(step, "stage3", nnfm=float(loss), stat_dist=dist)
        if step_hook is not None:
            step_hook(step, k, image)
        if s3.log_every and step % s3.log_every == 0:
            log.info("stage3 step %d loss %.5f stat distance %.5f", step, float(loss), dist)
    return Stage3Result(model, losses, stats)


# -- final renders -----------------------------------------------------------------------------

def render_video(model: VideoNeRF, cameras, poses, out_dir=None, resolution=None, render_cfg=RenderConfig()):
    """Render every source frame; writes numbered PNGs when ``out_dir`` is given."""
    if len(cameras) != len(poses):
        raise IngestionError(f"{len(cameras)} camera records but {len(poses)} pose records")
    frames = []
    for k, (cam, pose) in enumerate(zip(cameras, poses)):
        if resolution is not None:
            cam = cam.with_resolution(*resolution)
        img = render_image(cam, model, pose, cfg=render_cfg)["color"]
        frames.append(img)
        if out_dir is not None:
            write_png(Path(out_dir) / f"{k:06d}.png", img)
    return frames
