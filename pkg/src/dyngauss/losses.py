"""Photometric losses with analytic gradients: L1, SSIM and their mix."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from .gaussians import InvalidParameterError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
DSSIM_WEIGHT = 0.2


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-x * x / (2.0 * sigma * sigma))
    return w / w.sum()


def _blur(img, window):
    # zero padding, same-size output; symmetric kernel so this is self-adjoint
    out = correlate1d(img, window, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, window, axis=1, mode="constant", cval=0.0)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def ssim_map(a, b, window=None):
    a, b = _check_pair(a, b)
    window = gaussian_window() if window is None else window
    mu_a, mu_b = _blur(a, window), _blur(b, window)
    saa = _blur(a * a, window) - mu_a * mu_a
    sbb = _blur(b * b, window) - mu_b * mu_b
    sab = _blur(a * b, window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * sab + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (saa + sbb + SSIM_C2)
    return num / den


def ssim_with_grad(a, b):
    """Mean SSIM over pixels and channels and its gradient w.r.t. ``a``."""
    shape = np.shape(a)
    a, b = _check_pair(a, b)
    window = gaussian_window()
    mu_a, mu_b = _blur(a, window), _blur(b, window)
    saa = _blur(a * a, window) - mu_a * mu_a
    sbb = _blur(b * b, window) - mu_b * mu_b
    sab = _blur(a * b, window) - mu_a * mu_b
    l_num = 2 * mu_a * mu_b + SSIM_C1
    c_num = 2 * sab + SSIM_C2
    l_den = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    c_den = saa + sbb + SSIM_C2
    smap = (l_num * c_num) / (l_den * c_den)
    scale = 1.0 / smap.size
    # partials of the map w.r.t. mu_a, E[a^2] and E[ab] (sigma terms expanded)
    d_saa = -smap / c_den
    d_sab = 2 * smap / c_num
    d_mu_a = (2 * mu_b * smap / l_num - 2 * mu_a * smap / l_den
              - 2 * mu_a * d_saa - mu_b * d_sab)
    grad = (_blur(d_mu_a * scale, window)
            + 2 * a * _blur(d_saa * scale, window)
            + b * _blur(d_sab * scale, window))
    return float(smap.mean()), grad.reshape(shape)


def l1_with_grad(a, b):
    a, b = _check_pair(a, b)
    diff = a - b
    return float(np.abs(diff).mean()), (np.sign(diff) / diff.size)


def image_loss(rendered, target, dssim_weight: float = DSSIM_WEIGHT):
    """``(1 - w) * L1 + w * (1 - SSIM)`` and its gradient w.r.t. ``rendered``."""
    shape = np.shape(rendered)
    l1, g1 = l1_with_grad(rendered, target)
    if dssim_weight == 0.0:
        return l1, g1.reshape(shape)
    s, gs = ssim_with_grad(rendered, target)
    loss = (1.0 - dssim_weight) * l1 + dssim_weight * (1.0 - s)
    grad = (1.0 - dssim_weight) * g1.reshape(shape) - dssim_weight * gs
    return loss, grad
