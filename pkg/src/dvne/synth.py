"""Parametric toy scenes with exact ground truth.

A textured ground plane and an enclosing sky sphere form the static scene; an
articulated figure made of capsules bound to a skeleton moves in front of an
orbiting camera.  Everything is ray-traced in closed form, which makes the
rendered frames, masks and depths exact oracles for reconstruction tests.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .deformation import RIGS, Rig, SkeletonPose, bone_transforms, pose_from_rotations
from .io import (IngestionError, read_camera, read_pfm, read_png, read_pose, write_camera, write_pfm, write_png,
                 write_pose)
from .rendering import Camera, look_at

PRESETS = {"short": 30, "long": 300}


@dataclass(frozen=True)
class Plane:
    point: tuple
    normal: tuple
    color: tuple = (0.55, 0.45, 0.35)
    texture_amp: float = 0.2
    texture_freq: float = 1.5
    phase: tuple = (0.0, 0.0)


@dataclass(frozen=True)
class Sphere:
    """Seen from inside: the far intersection is the visible surface."""

    center: tuple
    radius: float
    color_top: tuple = (0.45, 0.65, 0.9)
    color_bottom: tuple = (0.85, 0.8, 0.7)
    band_amp: float = 0.1
    phase: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    frames: int = 30
    width: int = 64
    height: int = 64
    orbit_deg: float = 90.0
    camera_radius: float = 2.6
    camera_height: float = 0.3
    fov_deg: float = 45.0
    rig: str = "toy"
    figure: bool = True
    capsule_radius: tuple = (0.11, 0.09, 0.06, 0.06)
    figure_colors: tuple = ((0.2, 0.3, 0.8), (0.9, 0.7, 0.5), (0.2, 0.7, 0.3), (0.2, 0.7, 0.3))
    arm_swing_deg: float = 50.0
    sway: float = 0.05
    ground_y: float = -1.0
    sky_radius: float = 6.0
    miss_color: tuple = (0.0, 0.0, 0.0)

    @classmethod
    def preset(cls, name, **overrides):
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        orbit = 90.0 if name == "short" else 180.0
        return cls(**{"frames": PRESETS[name], "orbit_deg": orbit, **overrides})

    @classmethod
    def from_dict(cls, d):
        """Inverse of ``asdict`` after a JSON round trip (lists back to tuples)."""
        def tup(v):
            return tuple(tup(x) for x in v) if isinstance(v, list) else v

        return cls(**{k: tup(v) for k, v in d.items()})


@dataclass
class SyntheticScene:
    planes: list
    spheres: list
    rig: Rig
    poses: list
    cameras: list
    capsule_radius: tuple
    figure_colors: tuple
    figure: bool = True
    miss_color: tuple = (0.0, 0.0, 0.0)

    @property
    def frame_count(self):
        return len(self.cameras)


def build_scene(spec: SceneSpec, seed=0) -> SyntheticScene:
    rng = np.random.default_rng(seed)
    rig = RIGS[spec.rig]()
    if len(spec.capsule_radius) != len(rig.joint_names):
        radius = tuple(float(spec.capsule_radius[0]) for _ in rig.joint_names)
        colors = tuple(tuple(spec.figure_colors[0]) for _ in rig.joint_names)
    else:
        radius, colors = tuple(spec.capsule_radius), tuple(tuple(c) for c in spec.figure_colors)
    ground = Plane((0.0, spec.ground_y, 0.0), (0.0, 1.0, 0.0), phase=tuple(rng.uniform(0, 2 * np.pi, 2)))
    sky = Sphere((0.0, 0.0, 0.0), spec.sky_radius, phase=float(rng.uniform(0, 2 * np.pi)))
    arm_phase = float(rng.uniform(0.5, 1.5))
    poses, cameras = [], []
    n = spec.frames
    for k in range(n):
        s = np.sin(2 * np.pi * k / max(n, 1) * arm_phase * 2)
        rot = np.zeros((len(rig.joint_names), 3))
        if "left_shoulder" in rig.joint_names:
            rot[rig.index("left_shoulder"), 2] = np.radians(spec.arm_swing_deg) * s
            rot[rig.index("right_shoulder"), 2] = np.radians(spec.arm_swing_deg) * s
        root = rig.rest_joints[0] + np.array([spec.sway * np.sin(2 * np.pi * k / max(n, 1)), 0.0, 0.0])
        poses.append(pose_from_rotations(rig, rot, root, frame_index=k))
        az = np.radians(-0.5 * spec.orbit_deg + spec.orbit_deg * k / max(n - 1, 1))
        eye = (spec.camera_radius * np.sin(az), spec.camera_height, spec.camera_radius * np.cos(az))
        cameras.append(look_at(eye, (0.0, 0.0, 0.0), spec.width, spec.height, spec.fov_deg, frame_index=k))
    return SyntheticScene([ground], [sky], rig, poses, cameras, radius, colors, spec.figure, spec.miss_color)


# -- closed-form intersections ------------------------------------------------------

def intersect_plane(origins, dirs, plane: Plane):
    n = np.asarray(plane.normal, dtype=np.float64)
    p = np.asarray(plane.point, dtype=np.float64)
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((p - origins) @ n) / denom
    return np.where((np.abs(denom) > 1e-12) & (t > 0), t, np.inf)


def intersect_sphere_inside(origins, dirs, sphere: Sphere):
    c = np.asarray(sphere.center, dtype=np.float64)
    oc = origins - c
    b = np.sum(oc * dirs, -1)
    disc = b * b - (np.sum(oc * oc, -1) - sphere.radius**2)
    t = -b + np.sqrt(np.maximum(disc, 0.0))
    return np.where((disc >= 0) & (t > 0), t, np.inf)


def intersect_capsule(origins, dirs, a, b, r):
    """Nearest positive hit of rays with the capsule around segment a-b (inf on a miss)."""
    ba = b - a
    oa = origins - a
    baba = ba @ ba
    bard = dirs @ ba
    baoa = oa @ ba
    rdoa = np.sum(dirs * oa, -1)
    oaoa = np.sum(oa * oa, -1)
    A = baba - bard * bard
    B = baba * rdoa - baoa * bard
    C = baba * oaoa - baoa * baoa - r * r * baba
    h = B * B - A * C
    t = np.full(len(origins), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_side = (-B - np.sqrt(np.maximum(h, 0.0))) / A
    y = baoa + t_side * bard
    side = (h >= 0) & (np.abs(A) > 1e-14) & (y > 0) & (y < baba) & (t_side > 0)
    t[side] = t_side[side]
    for end in (a, b):
        oc = origins - end
        bb = np.sum(dirs * oc, -1)
        cc = np.sum(oc * oc, -1) - r * r
        hh = bb * bb - cc
        tc = -bb - np.sqrt(np.maximum(hh, 0.0))
        ok = (hh >= 0) & (tc > 0)
        t = np.where(ok & ~side, np.minimum(t, tc), t)
    return t


def plane_color(plane: Plane, x):
    base = np.asarray(plane.color, dtype=np.float64)
    f, (px, pz) = plane.texture_freq, plane.phase
    tex = plane.texture_amp * np.sin(f * x[:, 0] + px) * np.sin(f * x[:, 2] + pz)
    return np.clip(base + tex[:, None] * np.array([1.0, 0.8, 0.6]), 0.0, 1.0)


def sphere_color(sphere: Sphere, x):
    d = (x - np.asarray(sphere.center)) / sphere.radius
    up = 0.5 * (d[:, 1:2] + 1.0)
    top, bottom = np.asarray(sphere.color_top), np.asarray(sphere.color_bottom)
    band = sphere.band_amp * np.sin(3.0 * np.arctan2(d[:, 0], d[:, 2]) + sphere.phase)
    return np.clip(up * top + (1 - up) * bottom + band[:, None], 0.0, 1.0)


def figure_segments(scene: SyntheticScene, pose: SkeletonPose):
    rig = scene.rig
    world, posed = bone_transforms(pose, rig.rest_pose())
    tails = posed + np.einsum("nij,nj->ni", world, rig.tails - rig.rest_joints)
    return posed, tails


def trace(scene: SyntheticScene, origins, dirs, pose: SkeletonPose, figure_colors=None, background=True):
    """Closest-hit shading.  Returns color (N, 3), figure mask (N,), hit distance (N,)."""
    n = len(origins)
    color = np.tile(np.asarray(scene.miss_color, dtype=np.float64), (n, 1))
    best = np.full(n, np.inf)
    mask = np.zeros(n)
    if background:
        for plane in scene.planes:
            t = intersect_plane(origins, dirs, plane)
            hit = t < best
            best[hit] = t[hit]
            color[hit] = plane_color(plane, origins[hit] + t[hit, None] * dirs[hit])
        for sphere in scene.spheres:
            t = intersect_sphere_inside(origins, dirs, sphere)
            hit = t < best
            best[hit] = t[hit]
            color[hit] = sphere_color(sphere, origins[hit] + t[hit, None] * dirs[hit])
    if scene.figure:
        colors = scene.figure_colors if figure_colors is None else figure_colors
        heads, tails = figure_segments(scene, pose)
        for j in range(len(heads)):
            t = intersect_capsule(origins, dirs, heads[j], tails[j], scene.capsule_radius[j])
            hit = t < best
            best[hit] = t[hit]
            color[hit] = np.asarray(colors[j], dtype=np.float64)
            mask[hit] = 1.0
    return color, mask, best


def analytic_render(scene: SyntheticScene, camera: Camera, pose: SkeletonPose, figure_colors=None,
                    background=True):
    """Exact render: dict with color (H, W, 3), mask (H, W) and z-depth (H, W; inf on misses)."""
    o, d, _ = camera.pixel_rays()
    color, mask, t = trace(scene, o, d, pose, figure_colors, background)
    H, W = camera.height, camera.width
    zdepth = t * (d @ camera.forward)
    return {"color": color.reshape(H, W, 3), "mask": mask.reshape(H, W), "depth": zdepth.reshape(H, W)}


# -- datasets --------------------------------------------------------------------------

def generate(spec: SceneSpec, seed, out_dir):
    """Write frames (PNG), masks/depths (PFM), cameras and poses (JSON) plus the rest pose."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    scene = build_scene(spec, seed)
    for k, (cam, pose) in enumerate(zip(scene.cameras, scene.poses)):
        r = analytic_render(scene, cam, pose)
        depth = np.where(np.isfinite(r["depth"]), r["depth"], 0.0)
        write_png(out / "frames" / f"{k:06d}.png", r["color"])
        write_pfm(out / "masks" / f"{k:06d}.pfm", r["mask"])
        write_pfm(out / "depths" / f"{k:06d}.pfm", depth)
        write_camera(out / "cameras" / f"{k:06d}.json", cam)
        write_pose(out / "poses" / f"{k:06d}.json", pose)
    write_pose(out / "poses" / "rest.json", scene.rig.rest_pose(), with_parents=True)
    meta = {"spec": asdict(spec), "seed": int(seed), "rig": spec.rig, "frames": spec.frames}
    (out / "scene.json").write_text(json.dumps(meta, indent=1))
    return out


@dataclass
class Dataset:
    frames: list
    masks: list
    depths: list
    cameras: list
    poses: list
    rest: SkeletonPose
    rig: str = "toy"
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"{root}: dataset directory not found")
    meta = json.loads((root / "scene.json").read_text()) if (root / "scene.json").exists() else {}
    rest_path = root / "poses" / "rest.json"
    if not rest_path.exists():
        raise IngestionError(f"{rest_path}: rest pose missing")
    rest = read_pose(rest_path)
    names = sorted(p.stem for p in (root / "frames").glob("*.png"))
    if len(names) < 2:
        raise IngestionError(f"{root}: need at least two frames, found {len(names)}")
    frames, masks, depths, cameras, poses = [], [], [], [], []
    for name in names:
        for sub, ext in (("cameras", "json"), ("poses", "json")):
            if not (root / sub / f"{name}.{ext}").exists():
                raise IngestionError(f"frame {name}: missing {sub[:-1]} record {sub}/{name}.{ext}")
        frames.append(read_png(root / "frames" / f"{name}.png"))
        cameras.append(read_camera(root / "cameras" / f"{name}.json"))
        poses.append(read_pose(root / "poses" / f"{name}.json", rest.parents))
        mp, dp = root / "masks" / f"{name}.pfm", root / "depths" / f"{name}.pfm"
        masks.append(read_pfm(mp) if mp.exists() else None)
        depths.append(read_pfm(dp) if dp.exists() else None)
    return Dataset(frames, masks, depths, cameras, poses, rest, meta.get("rig", "toy"), meta)
