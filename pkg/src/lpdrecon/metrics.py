"""Image quality metrics."""
from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

__all__ = ["psnr", "ssim", "mean_metric"]


def _data_range(ref: np.ndarray, data_range: float | None) -> float:
    if data_range is None:
        data_range = float(np.max(ref) - np.min(ref))
    if not data_range > 0:
        raise ValueError("data range must be positive")
    return data_range


def psnr(x: np.ndarray, ref: np.ndarray, data_range: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the images are identical."""
    x, ref = np.asarray(x, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    rng = _data_range(ref, data_range)
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(rng * rng / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2
    w = np.exp(-(t ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def ssim(x: np.ndarray, ref: np.ndarray, data_range: float | None = None) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Only windows lying fully inside the image are averaged.
    """
    x, ref = np.asarray(x, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    if x.ndim != 2 or min(x.shape) < 11:
        raise ValueError("ssim needs 2D images of at least 11x11 pixels")
    rng = _data_range(ref, data_range)
    c1 = (0.01 * rng) ** 2
    c2 = (0.03 * rng) ** 2
    win = _gaussian_window()

    def local_mean(a):
        return correlate1d(correlate1d(a, win, axis=0), win, axis=1)[5:-5, 5:-5]

    mu_x, mu_y = local_mean(x), local_mean(ref)
    mu_xx, mu_yy = mu_x * mu_x, mu_y * mu_y
    mu_xy = mu_x * mu_y
    var_x = local_mean(x * x) - mu_xx
    var_y = local_mean(ref * ref) - mu_yy
    cov = local_mean(x * ref) - mu_xy
    num = (2 * mu_xy + c1) * (2 * cov + c2)
    den = (mu_xx + mu_yy + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def mean_metric(values) -> float:
    """Order-independent mean (exactly rounded sum)."""
    values = list(values)
    if not values:
        raise ValueError("no values")
    return math.fsum(values) / len(values)
