"""Model-free evaluation: Gram-matrix style loss and SSIM."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import convolve2d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
PATCH = 4
PATCH_DIMS = 16
_PATCH_SEED = 20240


def _hwc(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"expected an [H, W, C] image, got shape {a.shape}")
    return a


def raw_features(img: np.ndarray) -> np.ndarray:
    return img.reshape(-1, img.shape[-1])


def patch_features(img: np.ndarray) -> np.ndarray:
    """Every 4x4 patch (valid positions) projected to 16 dims by a fixed
    seeded Gaussian matrix."""
    H, W, C = img.shape
    if H < PATCH or W < PATCH:
        raise ValueError(f"image {H}x{W} smaller than the {PATCH}x{PATCH} patch")
    win = sliding_window_view(img, (PATCH, PATCH), axis=(0, 1))  # [H', W', C, p, p]
    flat = win.transpose(0, 1, 3, 4, 2).reshape(-1, PATCH * PATCH * C)
    proj = np.random.default_rng(_PATCH_SEED + C).standard_normal((PATCH * PATCH * C, PATCH_DIMS))
    return flat @ (proj / np.sqrt(PATCH * PATCH * C))


DEFAULT_LEVELS: tuple = (raw_features, patch_features)


def gram_matrix(feats: np.ndarray) -> np.ndarray:
    return feats.T @ feats / feats.shape[0]


def gram_loss(a, b, features: Sequence[Callable] | Callable | None = None) -> float:
    """Mean squared difference of position-normalised Gram matrices,
    averaged over feature levels.

    ``features`` is a callable (or list of callables) mapping an ``[H, W, C]``
    image to ``[n, c]`` feature rows; the default levels are raw channels and
    4x4 patch projections. A perceptual backbone plugs in the same way.
    """
    a, b = _hwc(a), _hwc(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    levels = DEFAULT_LEVELS if features is None else (features if isinstance(features, (list, tuple)) else [features])
    losses = [np.mean((gram_matrix(f(a)) - gram_matrix(f(b))) ** 2) for f in levels]
    return float(np.mean(losses))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_channel(x: np.ndarray, y: np.ndarray, w: np.ndarray, c1: float, c2: float) -> float:
    def filt(img):
        return convolve2d(img, w, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(y * y) - mu_y * mu_y
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5) over valid window
    positions, averaged over channels."""
    a, b = _hwc(a), _hwc(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[0]}x{a.shape[1]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    w = gaussian_window()
    return float(np.mean([_ssim_channel(a[..., ch], b[..., ch], w, c1, c2) for ch in range(a.shape[-1])]))


@dataclass
class MetricReport:
    gram_loss: float
    ssim: float
    recon_max_abs: float
    notes: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"gram_loss": self.gram_loss, "ssim": self.ssim, "recon_max_abs": self.recon_max_abs,
                "notes": self.notes}


def evaluate_pair(a, b, features=None) -> MetricReport:
    a, b = _hwc(a), _hwc(b)
    notes = {"shape": list(a.shape)}
    if features is None:
        notes["gram_levels"] = [f.__name__ for f in DEFAULT_LEVELS]
    return MetricReport(
        gram_loss=gram_loss(a, b, features),
        ssim=ssim(a, b),
        recon_max_abs=float(np.max(np.abs(a - b))),
        notes=notes,
    )
