"""Image metrics and the forgetting summary of a fitting history."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

PSNR_INF = float("inf")
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WIN = 11
SSIM_SIGMA = 1.5


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for data range 1; identical inputs give ``inf``."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_INF
    return float(10.0 * np.log10(1.0 / err))


def to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[-1] == 4:
            img = img[..., :3]
        if img.shape[-1] == 3:
            return img @ np.array([0.299, 0.587, 0.114])
        if img.shape[-1] == 1:
            return img[..., 0]
    if img.ndim != 2:
        raise ValueError(f"cannot convert shape {img.shape} to grayscale")
    return img


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filt(x, g):
    # separable valid-mode correlation
    x = ndimage.correlate1d(x, g, axis=0, mode="constant")
    x = ndimage.correlate1d(x, g, axis=1, mode="constant")
    r = len(g) // 2
    return x[r:x.shape[0] - r, r:x.shape[1] - r]


def ssim_map(a, b) -> np.ndarray:
    a = to_gray(a)
    b = to_gray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WIN:
        raise ValueError(f"SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}")
    g = gaussian_window()
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_a = _filt(a, g)
    mu_b = _filt(b, g)
    var_a = _filt(a * a, g) - mu_a * mu_a
    var_b = _filt(b * b, g) - mu_b * mu_b
    cov = _filt(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b) -> float:
    """Windowed SSIM (11x11 Gaussian, sigma 1.5, K1=0.01, K2=0.03, range 1)."""
    return float(ssim_map(a, b).mean())


@dataclass
class ForgettingRecord:
    scene_id: str
    peak: float
    final: float

    @property
    def forgetting(self) -> float:
        return self.peak - self.final


def forgetting_curve(history) -> dict:
    """Per-scene peak/final PSNR from ``(outer_iter, scene_id, psnr)`` rows."""
    rows = list(history)
    if not rows:
        raise ValueError("empty fitting history")
    by_scene = {}
    for it, sid, value in sorted(rows, key=lambda r: r[0]):
        by_scene.setdefault(sid, []).append(value)
    return {sid: ForgettingRecord(sid, float(max(v)), float(v[-1])) for sid, v in by_scene.items()}


def mean_forgetting(history, scenes=None) -> float:
    recs = forgetting_curve(history)
    keys = recs.keys() if scenes is None else scenes
    return float(np.mean([recs[k].forgetting for k in keys]))


def final_mean_psnr(history, scenes=None) -> float:
    recs = forgetting_curve(history)
    keys = recs.keys() if scenes is None else scenes
    return float(np.mean([recs[k].final for k in keys]))
