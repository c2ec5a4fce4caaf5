"""Image-quality metrics for hyperspectral reconstructions.

All metrics take plain numpy arrays (cubes [H, W, N] or single planes) in
float64.  PSNR and SSIM assume a known peak / data range (1.0 by default for
normalized cubes); SSIM follows the standard Gaussian-window formulation
(11x11 window, sigma 1.5, K1 = 0.01, K2 = 0.03) averaged over bands; SAM is
the mean per-pixel spectral angle in degrees.
"""

from __future__ import annotations

import io

import numpy as np

from .errors import MetricError, ParameterError, ShapeError

PSNR_CAP_DB = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"metric operands differ in shape: {a.shape} vs {b.shape}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise MetricError("metric operands contain non-finite values")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs return the 99 dB cap."""
    a, b = _check_pair(a, b)
    if peak <= 0:
        raise ParameterError(f"psnr peak must be > 0, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g1 = np.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    win = np.outer(g1, g1)
    return win / win.sum()


def _ssim_plane(a: np.ndarray, b: np.ndarray, data_range: float) -> float:
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def filt(img):
        view = np.lib.stride_tricks.sliding_window_view(img, (SSIM_WINDOW, SSIM_WINDOW))
        return np.einsum("xykl,kl->xy", view, win, optimize=True)

    mu_a = filt(a)
    mu_b = filt(b)
    e_aa = filt(a * a)
    e_bb = filt(b * b)
    e_ab = filt(a * b)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean structural similarity; cubes average the per-band SSIM values."""
    a, b = _check_pair(a, b)
    if data_range <= 0:
        raise ParameterError(f"ssim data_range must be > 0, got {data_range}")
    if a.ndim == 2:
        planes = [(a, b)]
    elif a.ndim == 3:
        planes = [(a[:, :, i], b[:, :, i]) for i in range(a.shape[2])]
    else:
        raise ShapeError(f"ssim expects rank 2 or 3, got rank {a.ndim}")
    h, w = planes[0][0].shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(f"ssim needs extents >= {SSIM_WINDOW}, got {(h, w)}")
    return float(np.mean([_ssim_plane(pa, pb, data_range) for pa, pb in planes]))


def sam(a, b, return_skipped: bool = False):
    """Mean spectral angle in degrees over pixels of [H, W, N] cubes.

    Pixels where either spectrum has zero norm carry no angle and are
    skipped; pass `return_skipped=True` to also get their count.  All pixels
    skipped means the metric is undefined and raises MetricError.
    """
    a, b = _check_pair(a, b)
    if a.ndim != 3:
        raise ShapeError(f"sam expects rank-3 cubes, got rank {a.ndim}")
    flat_a = a.reshape(-1, a.shape[2])
    flat_b = b.reshape(-1, b.shape[2])
    na = np.linalg.norm(flat_a, axis=1)
    nb = np.linalg.norm(flat_b, axis=1)
    valid = (na > 0) & (nb > 0)
    skipped = int(np.count_nonzero(~valid))
    if not np.any(valid):
        raise MetricError("sam undefined: every pixel has a zero spectrum")
    dots = np.sum(flat_a[valid] * flat_b[valid], axis=1)
    cosines = np.clip(dots / (na[valid] * nb[valid]), -1.0, 1.0)
    degrees = float(np.mean(np.degrees(np.arccos(cosines))))
    if return_skipped:
        return degrees, skipped
    return degrees


def charbonnier(a, b, eps: float = 1e-3) -> float:
    """Smooth L1 distance: mean of sqrt(diff^2 + eps^2); equals eps at a == b."""
    a, b = _check_pair(a, b)
    if eps <= 0:
        raise ParameterError(f"charbonnier eps must be > 0, got {eps}")
    return float(np.mean(np.sqrt((a - b) ** 2 + eps * eps)))


def metrics_csv(rows: list[tuple]) -> str:
    """Render (scene_id, psnr, ssim, sam) rows as a CSV document."""
    buf = io.StringIO()
    buf.write("scene_id,psnr,ssim,sam\n")
    for scene_id, p, s, m in rows:
        buf.write(f"{scene_id},{p:.6f},{s:.6f},{m:.6f}\n")
    return buf.getvalue()
