"""Deterministic synthetic images standing in for real datasets."""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import rng

KINDS = ("bandlimited", "blobs", "gradient")


def _unit_axes(height: int, width: int):
    ys = np.linspace(-1.0, 1.0, height) if height > 1 else np.full(1, -1.0)
    xs = np.linspace(-1.0, 1.0, width) if width > 1 else np.full(1, -1.0)
    return np.meshgrid(ys, xs, indexing="ij")


def _rescale(img: np.ndarray) -> np.ndarray:
    lo, hi = img.min(), img.max()
    if hi - lo < 1e-12:
        return np.full_like(img, 0.5)
    return (img - lo) / (hi - lo)


def synth_image(kind: str, height: int, width: int, seed: int, channels: int = 3,
                terms: int = 16, max_freq: float = 4.0, blobs: int = 12) -> np.ndarray:
    """``height x width x channels`` image with values in ``[0, 1]``.

    ``bandlimited`` sums at most ``terms`` sinusoids per channel whose
    frequencies (cycles across the image) stay below ``max_freq``; ``blobs``
    places random anisotropic Gaussian bumps; ``gradient`` is a left-to-right ramp.
    """
    if height < 1 or width < 1 or channels < 1:
        raise ContractError(f"invalid image dims {height}x{width}x{channels}")
    if kind not in KINDS:
        raise ContractError(f"unknown synthetic kind {kind!r}; choose from {KINDS}")
    if kind == "gradient":
        ramp = np.linspace(0.0, 1.0, width) if width > 1 else np.zeros(1)
        return np.broadcast_to(ramp[None, :, None], (height, width, channels)).copy()

    g = rng(seed, "synth", kind)
    yy, xx = _unit_axes(height, width)
    img = np.zeros((height, width, channels))
    if kind == "bandlimited":
        if not 1 <= terms <= 16:
            raise ContractError("bandlimited images use between 1 and 16 terms")
        for ch in range(channels):
            for _ in range(terms):
                fy, fx = g.uniform(-max_freq, max_freq, size=2)
                phase = g.uniform(0.0, 2.0 * np.pi)
                amp = g.uniform(0.2, 1.0)
                # coordinates span 2 units, so pi * f gives f cycles per image
                img[:, :, ch] += amp * np.sin(np.pi * (fy * yy + fx * xx) + phase)
    else:
        for _ in range(blobs):
            cy, cx = g.uniform(-0.9, 0.9, size=2)
            sy, sx = g.uniform(0.08, 0.4, size=2)
            color = g.uniform(-1.0, 1.0, size=channels)
            bump = np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
            img += bump[:, :, None] * color
    return _rescale(img)
