"""Image quality metrics: PSNR and windowed SSIM."""

from __future__ import annotations

import numpy as np

PSNR_CAP_DB = 99.0  # sentinel written to CSV when images are identical


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1].

    Identical images yield +inf; CSV writers cap that at PSNR_CAP_DB.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return -10.0 * np.log10(mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _window_means(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    k = window.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.einsum("ijkl,kl->ij", win, window)


def ssim(a, b, window_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean structural similarity with a Gaussian window, valid padding.

    Channels are scored independently and averaged. Result lies in [-1, 1];
    identical images score exactly 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.shape[0] < window_size or a.shape[1] < window_size:
        raise ValueError(f"image smaller than the {window_size}x{window_size} window")
    window = _gaussian_window(window_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx = _window_means(x, window)
        my = _window_means(y, window)
        mxx = _window_means(x * x, window)
        myy = _window_means(y * y, window)
        mxy = _window_means(x * y, window)
        vx = mxx - mx * mx
        vy = myy - my * my
        cov = mxy - mx * my
        s = ((2 * mx * my + c1) * (2 * cov + c2)) / (
            (mx * mx + my * my + c1) * (vx + vy + c2)
        )
        scores.append(s.mean())
    return float(np.mean(scores))
