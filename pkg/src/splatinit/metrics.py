"""Image metrics: PSNR and SSIM (with its gradient, used by the training loss)."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from splatinit.geometry import DomainError

PSNR_CAP = 99.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _check_shapes(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, cap: float = PSNR_CAP) -> float:
    a, b = _check_shapes(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _blur(img, win):
    # Zero padding keeps the operator symmetric, so it is its own adjoint.
    out = correlate1d(img, win, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, win, axis=1, mode="constant", cval=0.0)


def ssim_and_grad(a, b, window: int = 11, sigma: float = 1.5, need_grad: bool = True):
    """Mean SSIM of ``a`` against ``b`` and d(mean SSIM)/da.

    Images are (H, W) or (H, W, C); statistics use a same-size Gaussian filter
    with zero padding, and the mean runs over every pixel and channel.
    """
    a, b = _check_shapes(a, b)
    win = gaussian_window(window, sigma)
    mu_a = _blur(a, win)
    mu_b = _blur(b, win)
    e_aa = _blur(a * a, win)
    e_bb = _blur(b * b, win)
    e_ab = _blur(a * b, win)
    A1 = 2.0 * mu_a * mu_b + SSIM_C1
    A2 = 2.0 * (e_ab - mu_a * mu_b) + SSIM_C2
    B1 = mu_a**2 + mu_b**2 + SSIM_C1
    B2 = (e_aa - mu_a**2) + (e_bb - mu_b**2) + SSIM_C2
    smap = (A1 * A2) / (B1 * B2)
    value = float(smap.mean())
    if not need_grad:
        return value, None
    scale = 1.0 / smap.size
    den = B1 * B2
    d_mu = (2.0 * mu_b * A2 - 2.0 * mu_b * A1) / den - smap * 2.0 * mu_a / B1 + smap * 2.0 * mu_a / B2
    d_eaa = -smap / B2
    d_eab = 2.0 * A1 / den
    grad = _blur(d_mu * scale, win) + 2.0 * a * _blur(d_eaa * scale, win) + b * _blur(d_eab * scale, win)
    return value, grad


def ssim(a, b) -> float:
    return ssim_and_grad(a, b, need_grad=False)[0]
