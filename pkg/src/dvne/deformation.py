"""Skeleton-driven posed-to-canonical deformation with a learned residual.

The coarse warp is inverse linear blend skinning: every joint carries a rigid
transform taking rest (canonical) space to posed space, and a posed point is
pulled back through the blend of the inverses.  Skinning weights are an
analytic Gaussian falloff around the posed bone segments, normalised with a
softmax so they are positive, continuous and sum to one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import EncodingConfig, positional_encoding


class PoseMismatchError(ValueError):
    pass


def _check_tree(parents):
    parents = np.asarray(parents, dtype=int)
    roots = np.flatnonzero(parents < 0)
    if len(roots) != 1 or roots[0] != 0:
        raise ValueError("parent table must have a single root at index 0")
    for i, p in enumerate(parents[1:], start=1):
        if not 0 <= p < i:
            raise ValueError("parents must precede their children")
    return parents


@dataclass(frozen=True)
class SkeletonPose:
    joints: np.ndarray
    rotations: np.ndarray
    parents: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 3)
        rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3)
        if len(joints) != len(rotations):
            raise PoseMismatchError("joints and rotations must have equal length")
        parents = _check_tree(self.parents)
        if len(parents) != len(joints):
            raise PoseMismatchError("parent table length differs from joint count")
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "rotations", rotations)
        object.__setattr__(self, "parents", parents)

    @property
    def num_joints(self):
        return len(self.joints)

    def is_rest(self, tol=1e-6):
        return bool(np.all(np.abs(self.rotations) <= tol))


@dataclass(frozen=True)
class Rig:
    """Joint tree with rest (T-pose) joint positions and per-joint bone tails."""

    name: str
    joint_names: tuple[str, ...]
    parents: np.ndarray
    rest_joints: np.ndarray
    tails: np.ndarray

    def rest_pose(self) -> SkeletonPose:
        return SkeletonPose(self.rest_joints, np.zeros_like(self.rest_joints), self.parents)

    def index(self, name):
        return self.joint_names.index(name)


def axis_angle_to_matrix(w):
    """Rodrigues' formula, vectorised over leading axes."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    k = w / np.maximum(np.linalg.norm(w, axis=-1, keepdims=True), 1e-300)
    kx, ky, kz = k[..., 0], k[..., 1], k[..., 2]
    zero = np.zeros_like(kx)
    K = np.stack([np.stack([zero, -kz, ky], -1),
                  np.stack([kz, zero, -kx], -1),
                  np.stack([-ky, kx, zero], -1)], -2)
    eye = np.broadcast_to(np.eye(3), K.shape)
    R = eye + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)
    return np.where(theta > 0, R, eye)


def bone_transforms(pose: SkeletonPose, rest: SkeletonPose):
    """World rotations and posed joint positions from forward kinematics.

    The transform of joint i maps rest space to posed space as
    ``x -> R_i (x - rest_i) + posed_i``; the root translation comes from the
    pose's root joint.
    """
    if pose.num_joints != rest.num_joints:
        raise PoseMismatchError(f"pose has {pose.num_joints} joints, rest pose has {rest.num_joints}")
    local = axis_angle_to_matrix(pose.rotations)
    n = rest.num_joints
    world = np.zeros((n, 3, 3))
    posed = np.zeros((n, 3))
    world[0] = local[0]
    posed[0] = pose.joints[0]
    for i in range(1, n):
        p = rest.parents[i]
        world[i] = world[p] @ local[i]
        posed[i] = posed[p] + world[p] @ (rest.joints[i] - rest.joints[p])
    return world, posed


def _segment_distance(x, a, b):
    ab = b - a
    denom = np.maximum(np.sum(ab * ab, axis=-1), 1e-300)
    t = np.clip(np.sum((x[..., None, :] - a) * ab, axis=-1) / denom, 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(x[..., None, :] - closest, axis=-1)


@dataclass
class DeformationField:
    rig: Rig
    params: object = None
    encoding: EncodingConfig = field(default_factory=lambda: EncodingConfig(4, "plain"))
    hidden: int = 64
    max_offset: float = 0.1
    falloff: float = 0.05
    prefix: str = "deform"

    @property
    def rest(self) -> SkeletonPose:
        return self.rig.rest_pose()

    @property
    def in_dim(self):
        return self.encoding.dim + 3 * len(self.rig.joint_names)

    def layout(self):
        return [(f"{self.prefix}.l0.w", (self.in_dim, self.hidden)), (f"{self.prefix}.l0.b", (self.hidden,)),
                (f"{self.prefix}.l1.w", (self.hidden, 3)), (f"{self.prefix}.l1.b", (3,))]

    def init(self, params, rng):
        bound = np.sqrt(6.0 / self.in_dim)
        params[f"{self.prefix}.l0.w"] = rng.uniform(-bound, bound, size=(self.in_dim, self.hidden))
        params[f"{self.prefix}.l0.b"] = 0.0
        # zero output layer: the residual starts at exactly zero
        params[f"{self.prefix}.l1.w"] = 0.0
        params[f"{self.prefix}.l1.b"] = 0.0

    def bone_scales(self):
        lengths = np.linalg.norm(self.rig.tails - self.rig.rest_joints, axis=-1)
        return self.falloff * lengths

    def posed_segments(self, pose):
        world, posed = bone_transforms(pose, self.rest)
        tails = posed + np.einsum("nij,nj->ni", world, self.rig.tails - self.rig.rest_joints)
        return world, posed, tails

    def skinning_weights(self, x, pose):
        """Posed-space skinning weights, shape (..., joints)."""
        _, heads, tails = self.posed_segments(pose)
        d = _segment_distance(np.asarray(x, dtype=np.float64), heads, tails)
        logits = -0.5 * (d / self.bone_scales()) ** 2
        logits -= logits.max(axis=-1, keepdims=True)
        w = np.exp(logits)
        return w / w.sum(axis=-1, keepdims=True)

    def posed_bbox(self, pose, margin=0.15):
        _, heads, tails = self.posed_segments(pose)
        pts = np.concatenate([heads, tails])
        return pts.min(0) - margin, pts.max(0) + margin

    def canonical_bbox(self, margin=0.15):
        return self.posed_bbox(self.rest, margin)


def coarse_deform(x_d, pose: SkeletonPose, field: DeformationField):
    """Inverse blend skinning of posed points into canonical space."""
    x_d = np.asarray(x_d, dtype=np.float64)
    world, posed = bone_transforms(pose, field.rest)
    w = field.skinning_weights(x_d, pose)
    # per-joint inverse: R_i^T (x - posed_i) + rest_i
    local = np.einsum("nji,...nj->...ni", world, x_d[..., None, :] - posed) + field.rest.joints
    return np.einsum("...n,...ni->...i", w, local)


def forward_deform(x_c, pose: SkeletonPose, field: DeformationField):
    """Canonical to posed, with weights evaluated in the rest configuration."""
    x_c = np.asarray(x_c, dtype=np.float64)
    world, posed = bone_transforms(pose, field.rest)
    w = field.skinning_weights(x_c, field.rest)
    moved = np.einsum("nij,...nj->...ni", world, x_c[..., None, :] - field.rest.joints) + posed
    return np.einsum("...n,...ni->...i", w, moved)


def fine_deform(x_c_prime, pose: SkeletonPose, field: DeformationField, theta=None):
    """Pose-conditioned residual with norm strictly below ``field.max_offset``."""
    params = field.params
    theta = params.values if theta is None else theta
    x_c_prime = x_c_prime if isinstance(x_c_prime, ad.Var) else np.asarray(x_c_prime, dtype=np.float64)
    lead = ad.value(x_c_prime).shape[:-1]
    feats = positional_encoding(x_c_prime, field.encoding)
    cond = np.broadcast_to(pose.rotations.reshape(-1), lead + (3 * pose.num_joints,))
    h = ad.concatenate([feats, cond], axis=-1)
    p = field.prefix
    h = ad.relu(ad.add(ad.matmul(h, params.view(theta, f"{p}.l0.w")), params.view(theta, f"{p}.l0.b")))
    v = ad.add(ad.matmul(h, params.view(theta, f"{p}.l1.w")), params.view(theta, f"{p}.l1.b"))
    # smooth norm-preserving squash: offset = max * v * tanh(n) / n, n = sqrt(|v|^2 + eps)
    n = ad.sqrt(ad.add(ad.sum(ad.square(v), axis=-1, keepdims=True), 1e-12))
    return ad.mul(field.max_offset, ad.mul(v, ad.div(ad.tanh(n), n)))


def deform(x_d, pose: SkeletonPose, field: DeformationField, theta=None):
    x_c_prime = coarse_deform(x_d, pose, field)
    return ad.add(x_c_prime, fine_deform(x_c_prime, pose, field, theta))


def pose_from_rotations(rig: Rig, rotations, root=None, frame_index=0) -> SkeletonPose:
    """Build a consistent pose record (posed joint positions via FK)."""
    rotations = np.asarray(rotations, dtype=np.float64).reshape(-1, 3)
    rest = rig.rest_pose()
    root = rest.joints[0] if root is None else np.asarray(root, dtype=np.float64)
    probe = SkeletonPose(np.tile(root, (len(rotations), 1)), rotations, rig.parents)
    _, posed = bone_transforms(probe, rest)
    return SkeletonPose(posed, rotations, rig.parents, frame_index)


def toy_rig() -> Rig:
    """Four joints: pelvis (torso bone), neck (head bone), two shoulders (arm bones)."""
    names = ("pelvis", "neck", "left_shoulder", "right_shoulder")
    parents = np.array([-1, 0, 1, 1])
    joints = np.array([[0.0, -0.30, 0.0], [0.0, 0.30, 0.0], [0.12, 0.28, 0.0], [-0.12, 0.28, 0.0]])
    tails = np.array([[0.0, 0.30, 0.0], [0.0, 0.55, 0.0], [0.55, 0.28, 0.0], [-0.55, 0.28, 0.0]])
    return Rig("toy", names, parents, joints, tails)


_SMPL_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2",
    "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot", "neck", "left_collar",
    "right_collar", "head", "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hand", "right_hand",
)
_SMPL_PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)
# approximate T-pose joint locations (metres, y up, subject facing +z)
_SMPL_JOINTS = (
    (0.0, 0.0, 0.0), (0.06, -0.09, 0.0), (-0.06, -0.09, 0.0), (0.0, 0.11, 0.0),
    (0.10, -0.48, 0.0), (-0.10, -0.48, 0.0), (0.0, 0.24, 0.0), (0.09, -0.88, -0.03),
    (-0.09, -0.88, -0.03), (0.0, 0.29, 0.02), (0.11, -0.94, 0.09), (-0.11, -0.94, 0.09),
    (0.0, 0.51, 0.0), (0.07, 0.42, 0.0), (-0.07, 0.42, 0.0), (0.0, 0.60, 0.04),
    (0.17, 0.45, 0.0), (-0.17, 0.45, 0.0), (0.43, 0.45, 0.0), (-0.43, 0.45, 0.0),
    (0.68, 0.45, 0.0), (-0.68, 0.45, 0.0), (0.77, 0.45, 0.0), (-0.77, 0.45, 0.0),
)


def smpl_rig() -> Rig:
    """24-joint SMPL-topology joint tree (no body-shape model)."""
    joints = np.array(_SMPL_JOINTS)
    parents = np.array(_SMPL_PARENTS)
    tails = joints.copy()
    for i in range(1, len(joints)):
        tails[parents[i]] = joints[i]  # later children overwrite; last child wins
    leaf_extra = {"left_foot": (0.0, 0.0, 0.06), "right_foot": (0.0, 0.0, 0.06),
                  "head": (0.0, 0.15, 0.0), "left_hand": (0.08, 0.0, 0.0), "right_hand": (-0.08, 0.0, 0.0)}
    for name, off in leaf_extra.items():
        i = _SMPL_NAMES.index(name)
        tails[i] = joints[i] + np.asarray(off)
    # the spine/pelvis bones point up the body rather than toward a hip
    for name, child in (("pelvis", "spine1"), ("spine3", "neck")):
        tails[_SMPL_NAMES.index(name)] = joints[_SMPL_NAMES.index(child)]
    return Rig("smpl24", _SMPL_NAMES, parents, joints, tails)


RIGS = {"toy": toy_rig, "smpl24": smpl_rig}
