"""Deterministic training objectives.

All losses accept taped or plain arrays for the rendered side; targets are
constants.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class DegenerateDepthWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RecWeights:
    rgb: float = 5.0
    mask: float = 0.5
    depth: float = 0.01


def photometric_loss(render, target, mask=None):
    """Mean squared error, optionally restricted to pixels where ``mask`` is set."""
    target = np.asarray(target, dtype=np.float64)
    if ad.value(render).shape != target.shape:
        raise ValueError(f"shape mismatch {ad.value(render).shape} vs {target.shape}")
    diff = ad.square(ad.sub(render, target))
    if mask is None:
        return ad.mean(diff)
    m = np.asarray(mask, dtype=bool)
    if m.shape != target.shape:
        m = np.broadcast_to(m.reshape(m.shape + (1,) * (target.ndim - m.ndim)), target.shape)
    count = m.sum()
    if count == 0:
        return ad.mul(ad.sum(diff), 0.0)
    return ad.div(ad.sum(ad.mul(diff, m.astype(np.float64))), float(count))


def pearson(a, b):
    """Pearson correlation of two 1-D arrays; ``a`` may be taped, ``b`` is constant."""
    b = np.asarray(b, dtype=np.float64)
    ac = ad.sub(a, ad.mean(a))
    bc = b - b.mean()
    cov = ad.sum(ad.mul(ac, bc))
    return ad.div(cov, ad.mul(ad.sqrt(ad.sum(ad.square(ac))), np.sqrt(np.sum(bc * bc))))


def depth_correlation_loss(pred_depth, ref_depth, ref_mask):
    """Half of one minus the Pearson correlation over masked pixels; None if degenerate."""
    m = np.asarray(ref_mask).astype(bool)
    ref = np.asarray(ref_depth, dtype=np.float64)[m]
    pred = ad.getitem(pred_depth, m)
    if m.sum() < 2 or np.ptp(ref) == 0 or np.ptp(ad.value(pred)) == 0:
        return None
    return ad.mul(0.5, ad.sub(1.0, pearson(pred, ref)))


def rec_loss(render, ref, weights: RecWeights = RecWeights()):
    """Reference-view reconstruction: masked RGB MSE, mask MSE and depth correlation.

    ``render`` maps ``color``/``mask``/``depth`` to rendered (possibly taped)
    images; ``ref`` provides ``image`` (H, W, 3), ``mask`` (H, W) and ``depth``.
    A masked reference depth with no variance skips the depth term and emits a
    :class:`DegenerateDepthWarning`.
    """
    image, mask, depth = render["color"], render["mask"], render["depth"]
    ref_mask = np.asarray(ref.mask, dtype=np.float64)
    rgb = ad.mean(ad.square(ad.mul(ad.sub(image, ref.image), ref_mask[..., None])))
    total = ad.add(ad.mul(weights.rgb, rgb), ad.mul(weights.mask, ad.mean(ad.square(ad.sub(mask, ref_mask)))))
    d = depth_correlation_loss(depth, ref.depth, ref_mask)
    if d is None:
        warnings.warn("masked depth has zero variance; depth term skipped", DegenerateDepthWarning, stacklevel=2)
        return total
    return ad.add(total, ad.mul(weights.depth, d))


def _flat_features(f):
    shape = ad.value(f).shape
    return ad.reshape(f, (-1, shape[-1]))


def cosine_distance_matrix(a, b):
    """Pairwise ``1 - cos`` between rows; pairs involving a zero vector get 1."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = np.outer(na, nb)
    dots = a @ b.T
    cos = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
    return 1.0 - cos


def nnfm_loss(rendered, style, provider, weight=1.0):
    """Mean over rendered feature positions of the cosine distance to the nearest style feature."""
    f = _flat_features(provider(rendered))
    fs = np.asarray(ad.value(_flat_features(provider(np.asarray(ad.value(style))))))
    if ad.value(f).shape[-1] < 1:
        raise ValueError("feature provider returned no channels")
    nn = np.argmin(cosine_distance_matrix(ad.value(f), fs), axis=1)
    matched = fs[nn]
    nf = np.linalg.norm(ad.value(f), axis=-1)
    nm = np.linalg.norm(matched, axis=-1)
    valid = (nf > 0) & (nm > 0)
    # zero-norm pairs count as orthogonal (distance 1); shift dead rows so rnorm stays finite
    f_safe = ad.add(f, (~valid)[:, None].astype(np.float64))
    f_unit = ad.mul(f_safe, ad.rnorm(f_safe))
    m_safe = matched + (~valid)[:, None]
    m_unit = m_safe * ad.rnorm(m_safe)
    # 1 - cos as half the squared gap of unit vectors: exactly zero, with zero gradient, on identical pairs
    dist = ad.mul(0.5, ad.sum(ad.square(ad.sub(f_unit, m_unit)), axis=-1))
    dist = ad.add(ad.mul(dist, valid.astype(np.float64)), (~valid).astype(np.float64))
    return ad.mul(weight, ad.mean(dist))


def feature_l2_loss(rendered, source, provider):
    """Mean squared difference between the feature maps of ``rendered`` and ``source``."""
    f = provider(rendered)
    fs = np.asarray(ad.value(provider(np.asarray(ad.value(source)))))
    if ad.value(f).shape != fs.shape:
        raise ValueError(f"feature shape mismatch {ad.value(f).shape} vs {fs.shape}")
    return ad.mean(ad.square(ad.sub(f, fs)))


def distortion_regularizer(weights, midpoints, widths):
    """sum_ij w_i w_j |s_i - s_j| + (1/3) sum_i w_i^2 delta_i along the last axis."""
    s = np.asarray(midpoints, dtype=np.float64)
    widths = np.asarray(widths, dtype=np.float64)
    gaps = np.abs(s[..., :, None] - s[..., None, :])
    spread = ad.sum(ad.mul(ad.expand_dims(weights, -1), gaps), axis=-2)
    pair = ad.sum(ad.mul(spread, weights), axis=-1)
    own = ad.mul(1.0 / 3.0, ad.sum(ad.mul(ad.square(weights), widths), axis=-1))
    return ad.add(pair, own)
