"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np
import torch


def check_images(X, name: str = "X") -> np.ndarray:
    """Coerce to ``[N, H, W, 3]`` float64 in [0, 1]."""
    a = np.asarray(X, dtype=np.float64)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4 or a.shape[-1] != 3:
        raise ValueError(f"{name} must be [H, W, 3] or [N, H, W, 3], got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    if a.min() < 0.0 or a.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return a


def check_latent(x, shape=None, name: str = "latent") -> torch.Tensor:
    """Coerce to a ``[B, C, H, W]`` float64 tensor, optionally checking ``(C, H, W)``."""
    t = torch.as_tensor(x, dtype=torch.float64)
    if t.ndim == 3:
        t = t[None]
    if t.ndim != 4:
        raise ValueError(f"{name} must be [C, H, W] or [B, C, H, W], got {tuple(t.shape)}")
    if shape is not None and tuple(t.shape[1:]) != tuple(shape):
        raise ValueError(f"{name} shape {tuple(t.shape[1:])} does not match expected {tuple(shape)}")
    if not bool(torch.isfinite(t).all()):
        raise ValueError(f"{name} contains non-finite values")
    return t


def check_toy_size(h: int, w: int, downscale: int) -> tuple:
    """Latent grid for a toy backend; the grid must be divisible by 8."""
    if h % downscale or w % downscale:
        raise ValueError(f"image {h}x{w} not divisible by downscale {downscale}")
    lh, lw = h // downscale, w // downscale
    if lh % 8 or lw % 8:
        raise ValueError(f"latent grid {lh}x{lw} must be divisible by 8 (image {h}x{w}, downscale {downscale})")
    return lh, lw
