"""Image quality metrics on sRGB images in [0, 1]."""

from __future__ import annotations

import math

import numpy as np


class MetricError(Exception):
    pass


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """10*log10(1/MSE); +inf for identical images."""
    a, b = _check_pair(img_a, img_b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def _windowed_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-region weighted local means via a sliding window."""
    ks = kernel.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(img, (ks, ks))
    return np.einsum("ijkl,kl->ij", win, kernel)


def ssim(img_a: np.ndarray, img_b: np.ndarray, sigma: float = 1.5, win_size: int = 11) -> float:
    """SSIM with an 11x11 Gaussian window (sigma 1.5), standard constants.

    Statistics use the normalized Gaussian window over the valid interior
    (no padding); channels are averaged. Identical images give exactly 1.
    """
    a, b = _check_pair(img_a, img_b)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.shape[0] < win_size or a.shape[1] < win_size:
        raise MetricError(f"images must be at least {win_size}px on each side")
    kernel = _gaussian_kernel(win_size, sigma)
    c1 = (0.01) ** 2
    c2 = (0.03) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx = _windowed_mean(x, kernel)
        my = _windowed_mean(y, kernel)
        mxx = _windowed_mean(x * x, kernel)
        myy = _windowed_mean(y * y, kernel)
        mxy = _windowed_mean(x * y, kernel)
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))
