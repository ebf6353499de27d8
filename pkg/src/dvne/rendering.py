"""Cameras, ray sampling, merged human/scene compositing and volume rendering.

Human samples are canonical point queries reached through the deformation
field; scene samples are contracted frustum Gaussians.  Both sample sets are
merged per ray by depth (ties put human samples first) and rendered with the
usual alpha compositing, each sample keeping its own interval width.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .deformation import SkeletonPose, deform
from .fields import query_background_moments, query_canonical
from .geometry import Ray, contract_moments, frustum_moments

HUMAN_TAG, SCENE_TAG = "human", "scene"


class InvalidRangeError(ValueError):
    pass


class UnsortedSamplesError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: +z forward, +y down in camera space; ``c2w`` maps camera to world."""

    intrinsics: np.ndarray
    c2w: np.ndarray
    width: int
    height: int
    frame_index: int = 0

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        c2w = np.asarray(self.c2w, dtype=np.float64).reshape(4, 4)
        if self.width < 1 or self.height < 1 or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("invalid camera intrinsics or image size")
        if not np.allclose(c2w[3], [0, 0, 0, 1]):
            raise ValueError("c2w must be an affine 4x4 matrix")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "c2w", c2w)

    @property
    def center(self):
        return self.c2w[:3, 3].copy()

    @property
    def forward(self):
        return self.c2w[:3, 2].copy()

    def with_resolution(self, width, height):
        sx, sy = width / self.width, height / self.height
        K = self.intrinsics.copy()
        K[0] *= sx
        K[1] *= sy
        return Camera(K, self.c2w, width, height, self.frame_index)

    def pixel_rays(self, pixels=None):
        """Origins, unit directions and cone radii for (row, col) pixels (default: all, row-major)."""
        if pixels is None:
            rows, cols = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
            pixels = np.stack([rows.ravel(), cols.ravel()], -1)
        pixels = np.asarray(pixels).reshape(-1, 2)
        uv1 = np.stack([pixels[:, 1] + 0.5, pixels[:, 0] + 0.5, np.ones(len(pixels))], -1)
        d_cam = uv1 @ np.linalg.inv(self.intrinsics).T
        d = d_cam @ self.c2w[:3, :3].T
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        origins = np.broadcast_to(self.center, d.shape).copy()
        radii = np.full(len(d), 2.0 / np.sqrt(12.0) / self.intrinsics[0, 0])
        return origins, d, radii

    def ray(self, pixel) -> Ray:
        o, d, r = self.pixel_rays([pixel])
        return Ray(o[0], d[0], float(r[0]))


def look_at(eye, target, width, height, fov_deg=40.0, up=(0.0, 1.0, 0.0), frame_index=0) -> Camera:
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, (0.0, 0.0, 1.0))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, down, fwd, eye
    f = 0.5 * width / np.tan(0.5 * np.radians(fov_deg))
    K = np.array([[f, 0.0, 0.5 * width], [0.0, f, 0.5 * height], [0.0, 0.0, 1.0]])
    return Camera(K, c2w, width, height, frame_index)


@dataclass(frozen=True)
class RenderConfig:
    near: float = 0.1
    far: float = 100.0
    n_scene: int = 64
    spacing: str = "disparity"
    n_human: int = 48
    stratified: bool = False
    bbox_margin: float = 0.15
    include_human: bool = True
    include_scene: bool = True
    depth_eps: float = 1e-6


@dataclass(frozen=True)
class SamplePoint:
    t: float
    color: np.ndarray
    density: float
    origin: str

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError("sample depth must be positive")
        if self.density < 0:
            raise ValueError("density must be nonnegative")
        if self.origin not in (HUMAN_TAG, SCENE_TAG):
            raise ValueError(f"unknown origin tag {self.origin!r}")


@dataclass
class RenderOutput:
    color: object
    mask: object
    depth: object
    transmittance: object = None
    weights: object = None
    t: object = None
    acc: object = None
    extras: dict = field(default_factory=dict)


# -- sampling -------------------------------------------------------------------

def interval_edges(near, far, n_samples, spacing="linear"):
    """Edges (..., n+1) of ``n_samples`` contiguous intervals covering [near, far]."""
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    s = np.linspace(0.0, 1.0, n_samples + 1)
    if spacing == "linear":
        edges = near[..., None] * (1.0 - s) + far[..., None] * s
    elif spacing == "disparity":
        edges = 1.0 / ((1.0 / near)[..., None] * (1.0 - s) + (1.0 / far)[..., None] * s)
    else:
        raise ValueError(f"unknown spacing {spacing!r}")
    edges[..., 0] = near
    edges[..., -1] = far
    return edges


def sample_ray(ray: Ray | None, near, far, n_samples, stratified=False, rng=None, spacing="linear"):
    """Intervals (t0, t1) and one sample depth per interval.

    Unstratified samples sit at interval midpoints; stratified ones are drawn
    uniformly inside their own interval.
    """
    if not (0 < near < far) or n_samples < 1:
        raise InvalidRangeError(f"need 0 < near < far and n_samples >= 1 (near={near}, far={far}, n={n_samples})")
    edges = interval_edges(near, far, n_samples, spacing)
    return _points_in(edges, stratified, rng)


def _points_in(edges, stratified, rng):
    t0, t1 = edges[..., :-1], edges[..., 1:]
    if stratified:
        u = (rng or np.random.default_rng()).random(t0.shape)
        t = t0 + u * (t1 - t0)
    else:
        t = 0.5 * (t0 + t1)
    return t0, t1, t


def ray_box(origins, dirs, bmin, bmax):
    """Slab test; returns entry and exit depths (exit < entry on a miss)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        a = (bmin - origins) * inv
        b = (bmax - origins) * inv
    lo = np.nanmax(np.minimum(a, b), axis=-1)
    hi = np.nanmin(np.maximum(a, b), axis=-1)
    return lo, hi


# -- compositing ------------------------------------------------------------------

def composite(human_samples, scene_samples):
    """Stable depth merge of two individually sorted sample lists (human first on ties)."""
    for name, samples in (("human", human_samples), ("scene", scene_samples)):
        ts = [s.t for s in samples]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise UnsortedSamplesError(f"{name} samples are not sorted by depth")
    out, i, j = [], 0, 0
    while i < len(human_samples) and j < len(scene_samples):
        if human_samples[i].t <= scene_samples[j].t:
            out.append(human_samples[i])
            i += 1
        else:
            out.append(scene_samples[j])
            j += 1
    return out + list(human_samples[i:]) + list(scene_samples[j:])


def volume_render(samples, deltas, depth_eps=1e-6) -> RenderOutput:
    """Render one ray from an ordered list of :class:`SamplePoint`."""
    deltas = np.asarray(deltas, dtype=np.float64)
    if np.any(deltas < 0):
        raise ValueError("deltas must be nonnegative")
    if not samples:
        return RenderOutput(np.zeros(3), 0.0, 0.0, np.ones(0), np.zeros(0), np.zeros(0), 0.0)
    t = np.array([s.t for s in samples])[None]
    sigma = np.array([s.density for s in samples])[None]
    color = np.array([s.color for s in samples], dtype=np.float64)[None]
    human = np.array([s.origin == HUMAN_TAG for s in samples])[None]
    out = composite_arrays(t, sigma, color, deltas[None], human, depth_eps=depth_eps)
    return RenderOutput(out.color[0], float(out.mask[0]), float(out.depth[0]), out.transmittance[0],
                        out.weights[0], t[0], float(out.acc[0]))


def composite_arrays(t, sigma, color, delta, human, background=None, depth_eps=1e-6) -> RenderOutput:
    """Alpha-composite ordered samples.  ``sigma``/``color`` may be taped."""
    sd = ad.mul(sigma, delta)
    alpha = ad.sub(1.0, ad.exp(ad.neg(sd)))
    n = ad.value(sd).shape[-1]
    csum = ad.cumsum(sd, axis=-1)
    lead = ad.value(sd).shape[:-1]
    excl = ad.concatenate([np.zeros(lead + (1,)), ad.getitem(csum, (Ellipsis, slice(0, n - 1)))], axis=-1)
    trans = ad.exp(ad.neg(excl))
    w = ad.mul(trans, alpha)
    rgb = ad.sum(ad.mul(ad.expand_dims(w, -1), color), axis=-2)
    acc = ad.sum(w, axis=-1)
    mask = ad.sum(ad.mul(w, np.asarray(human, dtype=np.float64)), axis=-1)
    depth = ad.div(ad.sum(ad.mul(w, t), axis=-1), ad.maximum(acc, depth_eps))
    if background is not None:
        rgb = ad.add(rgb, ad.mul(ad.expand_dims(ad.sub(1.0, acc), -1), np.asarray(background, dtype=np.float64)))
    return RenderOutput(rgb, mask, depth, trans, w, t, acc)


# -- full model rendering --------------------------------------------------------------

def _scene_samples(model, origins, dirs, radii, theta, cfg, rng):
    edges = interval_edges(np.full(len(origins), cfg.near), np.full(len(origins), cfg.far),
                           cfg.n_scene, cfg.spacing)
    t0, t1, t = _points_in(edges, cfg.stratified, rng)
    mu, cov = frustum_moments(origins, dirs, radii, t0, t1)
    mu_c, cov_c = contract_moments(mu, cov)
    color, density = query_background_moments(model.scene, mu_c, np.diagonal(cov_c, axis1=-2, axis2=-1), theta)
    return t, t1 - t0, color, density


def _human_samples(model, origins, dirs, pose, theta, cfg, rng):
    n = len(origins)
    bmin, bmax = model.deformation.posed_bbox(pose, cfg.bbox_margin)
    lo, hi = ray_box(origins, dirs, bmin, bmax)
    lo = np.maximum(lo, cfg.near)
    hit = np.flatnonzero(hi > lo)
    shape = (n, cfg.n_human)
    t_full = np.full(shape, cfg.far)
    d_full = np.zeros(shape)
    if len(hit) == 0:
        return t_full, d_full, np.zeros(shape + (3,)), np.zeros(shape)
    edges = interval_edges(lo[hit], hi[hit], cfg.n_human, "linear")
    t0, t1, t = _points_in(edges, cfg.stratified, rng)
    x_d = origins[hit, None, :] + t[..., None] * dirs[hit, None, :]
    x_c = deform(x_d, pose, model.deformation, theta)
    color, density = query_canonical(model.human, x_c, theta)
    t_full[hit] = t
    d_full[hit] = t1 - t0
    if len(hit) == n:
        return t_full, d_full, color, density
    # rows of misses read a zero pad row
    rows = np.zeros(n, dtype=int)
    rows[hit] = np.arange(1, len(hit) + 1)
    color = ad.getitem(ad.concatenate([np.zeros((1, cfg.n_human, 3)), color], axis=0), rows)
    density = ad.getitem(ad.concatenate([np.zeros((1, cfg.n_human)), density], axis=0), rows)
    return t_full, d_full, color, density


def render_rays(model, origins, dirs, radii, pose: SkeletonPose, theta=None, cfg=RenderConfig(),
                rng=None, background=None) -> RenderOutput:
    theta = model.params.values if theta is None else theta
    parts = []
    if cfg.include_human:
        parts.append((True,) + _human_samples(model, origins, dirs, pose, theta, cfg, rng))
    if cfg.include_scene:
        parts.append((False,) + _scene_samples(model, origins, dirs, radii, theta, cfg, rng))
    if not parts:
        raise ValueError("nothing to render: both fields disabled")
    t = np.concatenate([p[1] for p in parts], axis=-1)
    delta = np.concatenate([p[2] for p in parts], axis=-1)
    human = np.concatenate([np.full(p[1].shape, p[0]) for p in parts], axis=-1)
    color = ad.concatenate([p[3] for p in parts], axis=-2) if len(parts) > 1 else parts[0][3]
    density = ad.concatenate([p[4] for p in parts], axis=-1) if len(parts) > 1 else parts[0][4]
    if len(parts) > 1:
        order = np.argsort(t, axis=-1, kind="stable")
        rows = np.arange(len(t))[:, None]
        t, delta, human = t[rows, order], delta[rows, order], human[rows, order]
        color = ad.getitem(color, (rows, order), unique=True)
        density = ad.getitem(density, (rows, order), unique=True)
    out = composite_arrays(t, density, color, delta, human, background, cfg.depth_eps)
    out.extras["delta"] = delta
    out.extras["human"] = human
    return out


def render_pixel(camera: Camera, pixel, model, pose, theta=None, cfg=RenderConfig(), rng=None,
                 background=None) -> RenderOutput:
    o, d, r = camera.pixel_rays([pixel])
    out = render_rays(model, o, d, r, pose, theta, cfg, rng, background)
    return out


def render_image(camera: Camera, model, pose, theta=None, cfg=RenderConfig(), rng=None, background=None,
                 chunk=4096):
    """Render a full image.

    Untaped renders are chunked to bound memory; a taped ``theta`` renders in
    one piece so the whole image stays on the tape.  Depth is returned as
    camera-axis depth.
    """
    o, d, r = camera.pixel_rays()
    zscale = d @ camera.forward
    H, W = camera.height, camera.width
    if isinstance(theta, ad.Var):
        out = render_rays(model, o, d, r, pose, theta, cfg, rng, background)
        return {"color": ad.reshape(out.color, (H, W, 3)), "mask": ad.reshape(out.mask, (H, W)),
                "depth": ad.reshape(ad.mul(out.depth, zscale), (H, W)), "acc": ad.reshape(out.acc, (H, W))}
    pieces = []
    for s in range(0, len(o), chunk):
        sl = slice(s, s + chunk)
        out = render_rays(model, o[sl], d[sl], r[sl], pose, theta, cfg, rng, background)
        pieces.append((out.color, out.mask, out.depth * zscale[sl], out.acc))
    return {"color": np.concatenate([p[0] for p in pieces]).reshape(H, W, 3),
            "mask": np.concatenate([p[1] for p in pieces]).reshape(H, W),
            "depth": np.concatenate([p[2] for p in pieces]).reshape(H, W),
            "acc": np.concatenate([p[3] for p in pieces]).reshape(H, W)}


def render_image_deferred(camera: Camera, model, pose, chunk, loss_grad, cfg=RenderConfig(), background=None,
                          trainable=None):
    """Second pass of deferred back-propagation.

    Re-renders the image ``chunk`` pixels at a time on fresh tapes, seeding each
    chunk's backward pass with its slice of the cached per-pixel loss gradient.
    Gradients accumulate into ``model.params.grad``; the summed gradient is
    returned.
    """
    if chunk <= 0:
        raise ValueError("chunk must be positive")
    loss_grad = np.asarray(loss_grad, dtype=np.float64)
    if loss_grad.shape != (camera.height, camera.width, 3):
        raise ValueError(f"loss_grad shape {loss_grad.shape} does not match image {(camera.height, camera.width, 3)}")
    o, d, r = camera.pixel_rays()
    g = loss_grad.reshape(-1, 3)
    total = np.zeros(model.params.size)
    for s in range(0, len(o), chunk):
        sl = slice(s, s + chunk)
        _, tape = ad.record(lambda th: render_rays(model, o[sl], d[sl], r[sl], pose, th, cfg, None,
                                                   background).color, model.params)
        total += ad.backward(tape, g[sl])
    if trainable is not None:
        total *= trainable
    return total


def deferred_backprop(camera: Camera, model, pose, loss_fn, chunk, cfg=RenderConfig(), background=None):
    """Full two-pass scheme: untaped render, image-space loss gradient, chunked re-render.

    Returns ``(loss, parameter_gradient, image)``.
    """
    image = render_image(camera, model, pose, None, cfg, None, background)["color"]
    loss, loss_grad = ad.value_and_grad(loss_fn, image)
    grad = render_image_deferred(camera, model, pose, chunk, loss_grad, cfg, background)
    return float(loss), grad, image
