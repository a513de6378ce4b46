"""Image quality metrics on float images in [0, 1], shape (H, W, 3).

The structural-similarity filter is realized as two dense banded matrices
(one per image axis) with the reflect padding folded in, so the windowed
means are plain matmuls and the exact adjoint used by the gradient module
is just the transposed matmuls.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

PSNR_CAP = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 (equal images report 99)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP))


@lru_cache(maxsize=16)
def _blur_matrix(n: int, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """(n, n) operator: 1D Gaussian window with reflect padding along one axis."""
    half = window // 2
    t = np.arange(window) - half
    k = np.exp(-0.5 * (t / sigma) ** 2)
    k /= k.sum()
    # reflect index (no edge duplication): ... 2 1 | 0 1 2 ... n-1 | n-2 n-3 ...
    def reflect(i: int) -> int:
        period = 2 * n - 2 if n > 1 else 1
        i = abs(i) % period
        return period - i if i >= n else i

    mat = np.zeros((n, n))
    for row in range(n):
        for tap in range(window):
            mat[row, reflect(row - half + tap)] += k[tap]
    return mat


def _windowed_mean(img: np.ndarray) -> np.ndarray:
    kv = _blur_matrix(img.shape[0])
    kh = _blur_matrix(img.shape[1])
    rows = np.tensordot(kv, img, axes=(1, 0))           # (h, w, c)
    return np.tensordot(rows, kh, axes=(1, 1)).transpose(0, 2, 1)


def _windowed_mean_adjoint(g: np.ndarray) -> np.ndarray:
    kv = _blur_matrix(g.shape[0])
    kh = _blur_matrix(g.shape[1])
    rows = np.tensordot(kv.T, g, axes=(1, 0))
    return np.tensordot(rows, kh.T, axes=(1, 1)).transpose(0, 2, 1)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity over pixels and channels."""
    return ssim_and_grad(a, b, want_grad=False)[0]


def ssim_and_grad(a: np.ndarray, b: np.ndarray, want_grad: bool = True):
    """SSIM value and, optionally, its exact gradient with respect to ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise ValueError("expected two (H, W, C) images of the same shape")
    mu_a = _windowed_mean(a)
    mu_b = _windowed_mean(b)
    ea2 = _windowed_mean(a * a)
    eb2 = _windowed_mean(b * b)
    eab = _windowed_mean(a * b)
    va = ea2 - mu_a ** 2
    vb = eb2 - mu_b ** 2
    cab = eab - mu_a * mu_b
    n1 = 2.0 * mu_a * mu_b + SSIM_C1
    n2 = 2.0 * cab + SSIM_C2
    d1 = mu_a ** 2 + mu_b ** 2 + SSIM_C1
    d2 = va + vb + SSIM_C2
    den = d1 * d2
    s_map = n1 * n2 / den
    value = float(s_map.mean())
    if not want_grad:
        return value, None

    g = np.full_like(s_map, 1.0 / s_map.size)
    g_n1 = g * n2 / den
    g_n2 = g * n1 / den
    g_den = -g * s_map / den
    g_d1 = g_den * d2
    g_d2 = g_den * d1
    g_mu_a = 2.0 * mu_b * g_n1 + 2.0 * mu_a * g_d1
    g_cab = 2.0 * g_n2
    g_va = g_d2
    # va  = E[a^2] - mu_a^2,  cab = E[ab] - mu_a mu_b
    g_ea2 = g_va
    g_mu_a = g_mu_a - 2.0 * mu_a * g_va - mu_b * g_cab
    g_eab = g_cab
    grad = (_windowed_mean_adjoint(g_mu_a)
            + _windowed_mean_adjoint(g_ea2) * 2.0 * a
            + _windowed_mean_adjoint(g_eab) * b)
    return value, grad
