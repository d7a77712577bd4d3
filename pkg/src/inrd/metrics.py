"""Reconstruction metrics: PSNR and SSIM on images with peak value 1."""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError
from .inr import PSNR_CAP, psnr_from_mse

__all__ = ["PSNR_CAP", "psnr", "ssim", "gaussian_window"]


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB (peak 1); identical inputs give ``PSNR_CAP``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    return psnr_from_mse(np.mean((a - b) ** 2))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 2-D correlation with 'valid' borders
    k = len(g)
    rows = sum(g[i] * img[i: img.shape[0] - k + 1 + i, :] for i in range(k))
    return sum(g[i] * rows[:, i: rows.shape[1] - k + 1 + i] for i in range(k))


def _gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img.mean(axis=2)
    if img.ndim != 2:
        raise ContractError(f"expected HxW or HxWxc image, got shape {img.shape}")
    return img


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean structural similarity over all fully-covered 11x11 Gaussian windows.

    RGB inputs are reduced to gray by averaging channels first.
    """
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"ssim shape mismatch: {np.shape(a)} vs {np.shape(b)}")
    x, y = _gray(a), _gray(b)
    if x.shape[0] < window or x.shape[1] < window:
        raise ContractError(f"image {x.shape} is smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_x = _filter_valid(x, g)
    mu_y = _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mu_x ** 2
    syy = _filter_valid(y * y, g) - mu_y ** 2
    sxy = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))
