"""Score distillation: noise schedule, latent codecs, prior interface, mock priors.

The SDS gradient of a rendered image ``I`` is::

    scale * w(t) * (eps_hat(z_t; cond, t) - eps) * dz/dI * dI/dtheta

with ``z_t = sqrt(abar) z + sqrt(1 - abar) eps`` and ``z`` the encoded image.
The prior is only ever evaluated; no gradient flows into it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import autodiff as ad


class NoiseLevelError(ValueError):
    pass


class PriorError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine cumulative-signal schedule restricted to [t_min, t_max]."""

    t_min: float = 0.02
    t_max: float = 0.98
    offset: float = 0.008

    def __post_init__(self):
        if not (0.0 < self.t_min <= self.t_max < 1.0):
            raise ValueError("need 0 < t_min <= t_max < 1")

    def alpha_bar(self, t):
        f = lambda u: np.cos(0.5 * np.pi * (u + self.offset) / (1.0 + self.offset)) ** 2  # noqa: E731
        return f(np.asarray(t, dtype=np.float64)) / f(0.0)

    def weight(self, t):
        return 1.0 - self.alpha_bar(t)

    def check(self, t):
        if not (self.t_min <= t <= self.t_max):
            raise NoiseLevelError(f"noise level {t} outside [{self.t_min}, {self.t_max}]")


def sample_noise_level(schedule: NoiseSchedule, rng) -> float:
    if schedule.t_min == schedule.t_max:
        return float(schedule.t_min)
    return float(rng.uniform(schedule.t_min, schedule.t_max))


def add_noise(latent, t, eps, schedule: NoiseSchedule):
    schedule.check(t)
    latent = np.asarray(latent, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != latent.shape:
        raise ValueError("noise and latent shapes differ")
    abar = schedule.alpha_bar(t)
    return np.sqrt(abar) * latent + np.sqrt(1.0 - abar) * eps


# -- codecs ----------------------------------------------------------------------------

class IdentityCodec:
    factor = 1

    def encode(self, image):
        return image

    def decode(self, latent):
        return np.asarray(latent)


@dataclass(frozen=True)
class AvgPoolCodec:
    """Non-overlapping ``factor`` x ``factor`` average pooling; decode repeats pixels."""

    factor: int = 4

    def encode(self, image):
        H, W, C = ad.value(image).shape
        f = self.factor
        if H % f or W % f:
            raise ValueError(f"image {H}x{W} not divisible by pooling factor {f}")
        blocks = ad.reshape(image, (H // f, f, W // f, f, C))
        return ad.mean(ad.mean(blocks, axis=3), axis=1)

    def decode(self, latent):
        latent = np.asarray(latent)
        return np.repeat(np.repeat(latent, self.factor, axis=0), self.factor, axis=1)


# -- conditioning and priors ----------------------------------------------------------------

@dataclass(frozen=True)
class TextConditioning:
    prompt: str
    embedding: np.ndarray | None = None


@dataclass(frozen=True)
class ImageCameraConditioning:
    """Reference image plus the rendered view's rotation/translation relative to it."""

    image: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray

    @property
    def azimuth_deg(self):
        f = np.asarray(self.rotation) @ np.array([0.0, 0.0, 1.0])
        return float(np.degrees(np.arctan2(f[0], f[2])))


def relative_camera(reference, camera):
    """Rotation and translation of ``camera`` expressed in the reference camera's frame."""
    R_ref, R = reference.c2w[:3, :3], camera.c2w[:3, :3]
    return R_ref.T @ R, R_ref.T @ (camera.center - reference.center)


def view_label(azimuth_deg: float) -> str:
    """front below 60 degrees of azimuth, side up to 120, back beyond."""
    a = abs((azimuth_deg + 180.0) % 360.0 - 180.0)
    if a < 60.0:
        return "front"
    if a <= 120.0:
        return "side"
    return "back"


class GuidancePrior(Protocol):
    label: str
    conditioning: str
    codec: object

    def predict_noise(self, z_t, t, cond):
        ...


@dataclass(frozen=True)
class GaussianPrior:
    """Prior whose data distribution is a point mass at ``mean`` (image space).

    Its exact noise prediction is ``(z_t - sqrt(abar) m) / sqrt(1 - abar)`` with
    ``m`` the encoded mean, so SDS pulls renders straight toward ``mean``.
    With ``mean`` equal to the current render it reproduces the injected noise.
    """

    mean: np.ndarray
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    codec: object = field(default_factory=IdentityCodec)
    label: str = "base"
    conditioning: str = "text"
    guidance_scale: float = 1.0

    def predict_noise(self, z_t, t, cond):
        m = np.asarray(ad.value(self.codec.encode(np.asarray(self.mean, dtype=np.float64))))
        m = np.broadcast_to(m, np.shape(z_t))
        abar = self.schedule.alpha_bar(t)
        return (z_t - np.sqrt(abar) * m) / np.sqrt(1.0 - abar)


@dataclass(frozen=True)
class ViewColorPrior:
    """View-conditioned mock: the clean image for each view is a solid color.

    The view is read from the relative camera of an
    :class:`ImageCameraConditioning` (front/side/back by azimuth) or from the
    trailing view words of a text prompt.
    """

    colors: dict
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    codec: object = field(default_factory=IdentityCodec)
    label: str = "base"
    conditioning: str = "image-camera"

    def target(self, cond):
        if isinstance(cond, ImageCameraConditioning):
            view = view_label(cond.azimuth_deg)
        else:
            view = next((v for v in ("front", "side", "back") if str(cond.prompt).endswith(f"{v} view")), "front")
        return np.asarray(self.colors.get(view, self.colors.get("default")), dtype=np.float64)

    def predict_noise(self, z_t, t, cond):
        m = np.broadcast_to(self.target(cond), np.shape(z_t))
        abar = self.schedule.alpha_bar(t)
        return (z_t - np.sqrt(abar) * m) / np.sqrt(1.0 - abar)


class RecordingPrior:
    """Wraps a prior and logs every call (for branch-pairing checks)."""

    def __init__(self, inner, name):
        self.inner = inner
        self.name = name
        self.calls = []

    def __getattr__(self, attr):
        return getattr(self.inner, attr)

    def predict_noise(self, z_t, t, cond):
        self.calls.append((self.name, float(t)))
        return self.inner.predict_noise(z_t, t, cond)


# -- SDS -------------------------------------------------------------------------------

@dataclass
class SdsContext:
    image: np.ndarray
    tape: object
    prior: object
    schedule: NoiseSchedule
    scale: float
    rng: np.random.Generator
    skip_codec_jacobian: bool = False


def sds_image_gradient(image, prior, cond, schedule, scale, rng, skip_codec_jacobian=False):
    """Image-space SDS gradient and the draw that produced it."""
    image = np.asarray(image, dtype=np.float64)
    codec = prior.codec
    t = sample_noise_level(schedule, rng)
    z = np.asarray(ad.value(codec.encode(image)))
    eps = rng.standard_normal(z.shape)
    z_t = add_noise(z, t, eps, schedule)
    try:
        eps_hat = np.asarray(prior.predict_noise(z_t, t, cond), dtype=np.float64)
    except Exception as exc:
        raise PriorError(f"prior {getattr(prior, 'label', prior)!r} failed at t={t:.4f}: {exc}") from exc
    if eps_hat.shape != z.shape:
        raise PriorError(f"prior returned shape {eps_hat.shape}, expected {z.shape}")
    residual = scale * schedule.weight(t) * (eps_hat - eps)
    if skip_codec_jacobian:
        grad = codec.decode(residual)
    else:
        _, grad = ad.value_and_grad(codec.encode, image, seed=residual)
    return grad, {"t": t, "eps": eps, "residual": residual}


def sds_step_2d(ctx: SdsContext, cond: TextConditioning):
    """Back-propagate the text-conditioned SDS gradient through ``ctx.tape``."""
    grad, _ = sds_image_gradient(ctx.image, ctx.prior, cond, ctx.schedule, ctx.scale, ctx.rng,
                                 ctx.skip_codec_jacobian)
    return ad.backward(ctx.tape, grad)


def sds_step_3d(ctx: SdsContext, ref_image, rotation, translation):
    """As :func:`sds_step_2d`, conditioned on a reference image and relative camera."""
    cond = ImageCameraConditioning(np.asarray(ref_image), np.asarray(rotation), np.asarray(translation))
    grad, _ = sds_image_gradient(ctx.image, ctx.prior, cond, ctx.schedule, ctx.scale, ctx.rng,
                                 ctx.skip_codec_jacobian)
    return ad.backward(ctx.tape, grad)
