"""Rays, conical-frustum Gaussians, scene contraction and positional encodings.

Everything here is vectorised over leading axes; a single 3-vector is the
degenerate batch.  The encodings also accept taped variables so that points
produced by a learned deformation stay differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

MIN_INTERVAL = 1e-8


class InvalidIntervalError(ValueError):
    pass


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    radius_scale: float

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must have unit norm")
        if not self.radius_scale > 0:
            raise ValueError("radius_scale must be positive")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass(frozen=True)
class FrustumGaussian:
    mu: np.ndarray
    sigma: np.ndarray


@dataclass(frozen=True)
class EncodingConfig:
    num_levels: int = 8
    kind: str = "plain"

    def __post_init__(self):
        if self.num_levels < 1:
            raise ValueError("num_levels must be >= 1")
        if self.kind not in ("plain", "integrated"):
            raise ValueError(f"unknown encoding kind {self.kind!r}")

    @property
    def dim(self):
        return 6 * self.num_levels


def frustum_moments(origins, directions, radii, t0, t1):
    """Mean and covariance of conical frustums along unit-direction rays.

    ``origins``/``directions`` are (..., 3), ``radii`` is (...), and ``t0``/``t1``
    are (..., S).  Returns ``mu`` (..., S, 3) and ``sigma`` (..., S, 3, 3).
    """
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.maximum(np.asarray(t1, dtype=np.float64), t0 + MIN_INTERVAL)
    t_mu = 0.5 * (t0 + t1)
    t_delta = 0.5 * (t1 - t0)
    mu2, hw2 = t_mu**2, t_delta**2
    denom = 3.0 * mu2 + hw2
    t_mean = t_mu + 2.0 * t_mu * hw2 / denom
    t_var = hw2 / 3.0 - (4.0 / 15.0) * (hw2**2 * (12.0 * mu2 - hw2)) / denom**2
    r2 = np.asarray(radii, dtype=np.float64)[..., None] ** 2
    r_var = r2 * (mu2 / 4.0 + (5.0 / 12.0) * hw2 - (4.0 / 15.0) * hw2**2 / denom)

    d = np.asarray(directions, dtype=np.float64)[..., None, :]
    o = np.asarray(origins, dtype=np.float64)[..., None, :]
    mu = o + t_mean[..., None] * d
    outer = d[..., :, None] * d[..., None, :]
    eye = np.eye(3)
    sigma = t_var[..., None, None] * outer + r_var[..., None, None] * (eye - outer)
    return mu, sigma


def frustum_gaussian(ray: Ray, t0: float, t1: float) -> FrustumGaussian:
    if not (0.0 < t0 < t1):
        raise InvalidIntervalError(f"need 0 < t0 < t1, got t0={t0}, t1={t1}")
    mu, sigma = frustum_moments(ray.origin, ray.direction, np.asarray(ray.radius_scale),
                                np.array([t0]), np.array([t1]))
    return FrustumGaussian(mu[0], sigma[0])


def contract(x):
    """Map points inside the unit ball to themselves and squash the rest into radius 2."""
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.maximum(norm, 1.0)
    return np.where(norm <= 1.0, x, (2.0 - 1.0 / safe) * (x / safe))


def contract_jacobian(x):
    """Analytic Jacobian of :func:`contract`, shape (..., 3, 3)."""
    x = np.asarray(x, dtype=np.float64)
    r = np.linalg.norm(x, axis=-1)[..., None, None]
    safe = np.maximum(r, 1.0)
    outer = x[..., :, None] * x[..., None, :]
    outside = (2.0 / safe - 1.0 / safe**2) * np.eye(3) + (2.0 / safe**4 - 2.0 / safe**3) * outer
    return np.where(r <= 1.0, np.eye(3), outside)


def contract_gaussian(g: FrustumGaussian) -> FrustumGaussian:
    mu, sigma = contract_moments(g.mu, g.sigma)
    return FrustumGaussian(mu, sigma)


def contract_moments(mu, sigma):
    """Push (mu, sigma) through the contraction: (f(mu), J sigma J^T)."""
    jac = contract_jacobian(mu)
    sigma = jac @ sigma @ np.swapaxes(jac, -1, -2)
    return contract(mu), 0.5 * (sigma + np.swapaxes(sigma, -1, -2))


def _frequencies(num_levels):
    return 2.0 ** np.arange(num_levels)


def positional_encoding(x, cfg: EncodingConfig):
    """Per level l: sin(2^l x) then cos(2^l x), giving 6L features."""
    if cfg.kind != "plain":
        raise ValueError("positional_encoding needs a plain EncodingConfig")
    return _encode(x, None, cfg.num_levels)


def integrated_positional_encoding(g: FrustumGaussian, cfg: EncodingConfig):
    return encode_gaussian(g.mu, np.diagonal(g.sigma, axis1=-2, axis2=-1), cfg)


def encode_gaussian(mu, sigma_diag, cfg: EncodingConfig):
    """Frequency encoding of a Gaussian, damping level l by exp(-2^(2l-1) diag(sigma))."""
    if cfg.kind != "integrated":
        raise ValueError("integrated encoding needs an integrated EncodingConfig")
    return _encode(mu, np.asarray(sigma_diag, dtype=np.float64), cfg.num_levels)


def _encode(x, var, num_levels):
    freqs = _frequencies(num_levels)
    lead = ad.value(x).shape[:-1]
    scaled = ad.reshape(ad.mul(ad.expand_dims(x, -2), freqs[:, None]), lead + (num_levels, 3))
    s, c = ad.sin(scaled), ad.cos(scaled)
    if var is not None:
        damp = np.exp(-0.5 * (freqs[:, None] ** 2) * var[..., None, :])
        s, c = ad.mul(s, damp), ad.mul(c, damp)
    return ad.reshape(ad.concatenate([s, c], axis=-1), lead + (6 * num_levels,))
