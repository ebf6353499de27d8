"""Feature extractors for perceptual-style losses.

Only the interface and a deterministic stand-in live here: a seeded stack of
random 3x3 convolutions with tanh activations.  Real pretrained extractors can
implement :class:`FeatureProvider` and be dropped in.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Protocol

import numpy as np

from . import autodiff as ad


class FeatureProvider(Protocol):
    layer_set: str
    receptive_field: int

    def __call__(self, image):
        """(H, W, 3) image -> (h, w, C) feature map; taped images stay taped."""

    def output_shape(self, height: int, width: int) -> tuple[int, int, int]:
        ...


@lru_cache(maxsize=64)
def _patch_index(height, width, kernel, stride):
    rows = np.arange(0, height - kernel + 1, stride)
    cols = np.arange(0, width - kernel + 1, stride)
    dr, dc = np.meshgrid(np.arange(kernel), np.arange(kernel), indexing="ij")
    r = rows[:, None, None, None] + dr[None, None]
    c = cols[None, :, None, None] + dc[None, None]
    r, c = np.broadcast_arrays(r, c)
    return r, c


class RandomConvFeatures:
    """Seeded random convolution stack (valid padding)."""

    def __init__(self, seed=0, channels=(8, 16), strides=(2, 1), kernel=3, layer_set="mock"):
        if len(channels) != len(strides):
            raise ValueError("channels and strides must pair up")
        rng = np.random.default_rng(seed)
        self.kernel = kernel
        self.strides = tuple(strides)
        self.layer_set = layer_set
        self.weights = []
        c_in = 3
        for c_out in channels:
            fan_in = kernel * kernel * c_in
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, c_out))
            b = rng.normal(0.0, 0.1, size=(c_out,))
            self.weights.append((w, b))
            c_in = c_out
        rf, jump = 1, 1
        for s in self.strides:
            rf += (kernel - 1) * jump
            jump *= s
        self.receptive_field = rf
        self.channels = c_in

    def output_shape(self, height, width):
        for s in self.strides:
            height = (height - self.kernel) // s + 1
            width = (width - self.kernel) // s + 1
        return height, width, self.channels

    def __call__(self, image):
        h = image
        for (w, b), s in zip(self.weights, self.strides):
            H, W = ad.value(h).shape[:2]
            if H < self.kernel or W < self.kernel:
                raise ValueError(f"image {H}x{W} smaller than kernel {self.kernel}")
            r, c = _patch_index(H, W, self.kernel, s)
            patches = ad.getitem(h, (r, c))
            oh, ow = r.shape[:2]
            patches = ad.reshape(patches, (oh, ow, -1))
            h = ad.tanh(ad.add(ad.matmul(patches, w), b))
        return h
