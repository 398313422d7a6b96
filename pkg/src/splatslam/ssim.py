"""SSIM with an 11x11 Gaussian window (sigma 1.5) and its gradient.

Borders use reflect padding so constant images give the closed-form value
everywhere. The separable window is applied as dense matrices, which makes
the adjoint (needed for the gradient) exact.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.ndimage import correlate1d

C1 = 0.01**2
C2 = 0.03**2
WINDOW = 11
SIGMA = 1.5


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


@lru_cache(maxsize=16)
def _filter_matrix(n: int) -> np.ndarray:
    m = correlate1d(np.eye(n), gaussian_window(), axis=0, mode="reflect")
    m.setflags(write=False)
    return m


def _filt(img: np.ndarray) -> np.ndarray:
    fh = _filter_matrix(img.shape[0])
    fw = _filter_matrix(img.shape[1])
    return np.einsum("ij,jkc,lk->ilc", fh, img, fw, optimize=True)


def _filt_adjoint(img: np.ndarray) -> np.ndarray:
    fh = _filter_matrix(img.shape[0])
    fw = _filter_matrix(img.shape[1])
    return np.einsum("ji,jkc,kl->ilc", fh, img, fw, optimize=True)


def _as_hwc(img) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    return img[..., None] if img.ndim == 2 else img


def ssim(a, b, return_grad: bool = False):
    """Mean SSIM over pixels and channels; optionally d SSIM / d a."""
    x, y = _as_hwc(a), _as_hwc(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    mx, my = _filt(x), _filt(y)
    exx, eyy, exy = _filt(x * x), _filt(y * y), _filt(x * y)
    a1 = 2 * mx * my + C1
    a2 = 2 * (exy - mx * my) + C2
    b1 = mx * mx + my * my + C1
    b2 = (exx - mx * mx) + (eyy - my * my) + C2
    smap = a1 * a2 / (b1 * b2)
    value = float(smap.mean())
    if not return_grad:
        return value
    g = 1.0 / smap.size
    # grouped so that identical inputs cancel bit for bit
    d_mx = 2 * g * (my * (a2 - a1) - mx * smap * (b2 - b1)) / (b1 * b2)
    q = 2 * g / b2 * (a1 / b1)
    r = 2 * g / b2 * smap
    grad = _filt_adjoint(d_mx) + y * _filt_adjoint(q) - x * _filt_adjoint(r)
    return value, grad.reshape(np.shape(a))
