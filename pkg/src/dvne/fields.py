"""Canonical human field and contracted background field.

Both are plain ReLU MLPs with a softplus density head and a sigmoid color
head, reading their weights out of a shared :class:`~dvne.params.Params`.
Every query takes an optional ``theta``: the raw flat vector (default) or a
taped variable over it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import EncodingConfig, FrustumGaussian, encode_gaussian, positional_encoding


@dataclass(frozen=True)
class MLPConfig:
    depth: int = 8
    width: int = 256
    skips: tuple[int, ...] = (4,)
    density_bias: float = 0.0


class MLP:
    """``depth`` hidden ReLU layers; layer indices in ``skips`` re-read the input."""

    def __init__(self, prefix: str, in_dim: int, cfg: MLPConfig):
        self.prefix = prefix
        self.in_dim = in_dim
        self.cfg = cfg

    def layout(self):
        out = []
        dim = self.in_dim
        for i in range(self.cfg.depth):
            if i in self.cfg.skips and i > 0:
                dim += self.in_dim
            out.append((f"{self.prefix}.l{i}.w", (dim, self.cfg.width)))
            out.append((f"{self.prefix}.l{i}.b", (self.cfg.width,)))
            dim = self.cfg.width
        out.append((f"{self.prefix}.density.w", (dim, 1)))
        out.append((f"{self.prefix}.density.b", (1,)))
        out.append((f"{self.prefix}.color.w", (dim, 3)))
        out.append((f"{self.prefix}.color.b", (3,)))
        return out

    def init(self, params, rng, zero_density=False):
        for name, shape in self.layout():
            if name.endswith(".b"):
                params[name] = 0.0
            elif zero_density and name.endswith("density.w"):
                params[name] = 0.0
            else:
                # He-uniform for ReLU layers
                bound = np.sqrt(6.0 / shape[0])
                params[name] = rng.uniform(-bound, bound, size=shape)
        params[f"{self.prefix}.density.b"] = self.cfg.density_bias

    def __call__(self, params, theta, h):
        x = h
        for i in range(self.cfg.depth):
            if i in self.cfg.skips and i > 0:
                h = ad.concatenate([h, x], axis=-1)
            w = params.view(theta, f"{self.prefix}.l{i}.w")
            b = params.view(theta, f"{self.prefix}.l{i}.b")
            h = ad.relu(ad.add(ad.matmul(h, w), b))
        raw_density = ad.add(ad.matmul(h, params.view(theta, f"{self.prefix}.density.w")),
                             params.view(theta, f"{self.prefix}.density.b"))
        raw_color = ad.add(ad.matmul(h, params.view(theta, f"{self.prefix}.color.w")),
                           params.view(theta, f"{self.prefix}.color.b"))
        density = ad.softplus(ad.reshape(raw_density, ad.value(raw_density).shape[:-1]))
        return ad.sigmoid(raw_color), density


@dataclass
class CanonicalHumanField:
    """Point-queried field living in the pose-independent canonical space."""

    params: object
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    mlp_cfg: MLPConfig = field(default_factory=MLPConfig)
    encoding: EncodingConfig = field(default_factory=lambda: EncodingConfig(6, "plain"))
    prefix: str = "human"

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64)
        self.mlp = MLP(self.prefix, self.encoding.dim, self.mlp_cfg)

    @staticmethod
    def layout_for(prefix, mlp_cfg, encoding):
        return MLP(prefix, encoding.dim, mlp_cfg).layout()

    def inside(self, x):
        x = ad.value(x)
        return np.all((x >= self.bbox_min) & (x <= self.bbox_max), axis=-1)


def query_canonical(field: CanonicalHumanField, x_c, theta=None):
    """Color (..., 3) and density (...) at canonical points; zero density outside the box."""
    theta = field.params.values if theta is None else theta
    feats = positional_encoding(x_c, field.encoding)
    color, density = field.mlp(field.params, theta, feats)
    density = ad.mul(density, field.inside(x_c).astype(np.float64))
    return color, density


@dataclass
class BackgroundField:
    """Field over contracted frustum Gaussians for the unbounded static scene."""

    params: object
    mlp_cfg: MLPConfig = field(default_factory=MLPConfig)
    encoding: EncodingConfig = field(default_factory=lambda: EncodingConfig(8, "integrated"))
    prefix: str = "scene"

    def __post_init__(self):
        self.mlp = MLP(self.prefix, self.encoding.dim, self.mlp_cfg)

    @staticmethod
    def layout_for(prefix, mlp_cfg, encoding):
        return MLP(prefix, encoding.dim, mlp_cfg).layout()


def query_background(field: BackgroundField, g: FrustumGaussian, theta=None):
    """Query with an already-contracted Gaussian."""
    return query_background_moments(field, g.mu, np.diagonal(g.sigma, axis1=-2, axis2=-1), theta)


def query_background_moments(field: BackgroundField, mu, sigma_diag, theta=None):
    theta = field.params.values if theta is None else theta
    feats = encode_gaussian(mu, sigma_diag, field.encoding)
    return field.mlp(field.params, theta, feats)
