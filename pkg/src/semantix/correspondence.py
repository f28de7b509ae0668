"""Semantic correspondence between context and reference diffusion features.

Nearest-neighbour matching in feature space, a fixed sinusoidal positional
field that biases matches toward spatially consistent pairs, k-means region
masks from self-attention, and a PCA view of feature maps.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
import torch
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning


@dataclass(frozen=True)
class FeatureMap:
    """Intermediate decoder features ``[B, c, h, w]`` tapped at one block."""

    data: torch.Tensor
    block_id: int | None = None
    timestep: int | None = None

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"feature data must be [B, c, h, w], got shape {tuple(self.data.shape)}")
        if self.data.shape[2] < 1 or self.data.shape[3] < 1:
            raise ValueError("feature maps need positive spatial dims")
        if not bool(torch.isfinite(self.data.detach()).all()):
            raise ValueError(f"non-finite entries in feature map of block {self.block_id}")

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def spatial(self) -> tuple:
        return tuple(self.data.shape[2:])

    def vectors(self) -> torch.Tensor:
        """Per-position vectors ``[B, h*w, c]`` in row-major position order."""
        return self.data.flatten(2).transpose(1, 2)

    def with_data(self, data: torch.Tensor) -> "FeatureMap":
        return replace(self, data=data)

    def detach(self) -> "FeatureMap":
        return replace(self, data=self.data.detach())


@dataclass(frozen=True)
class PositionalField:
    data: torch.Tensor  # [c, h, w] for 2d, [frames, c, h, w] for 3d
    mode: str = "2d"
    weight: float = 3.0


@dataclass(frozen=True)
class RegionMask:
    context_mask: torch.Tensor
    reference_mask: torch.Tensor
    degenerate: bool = False

    def __post_init__(self):
        for name in ("context_mask", "reference_mask"):
            m = getattr(self, name)
            if m.dtype != torch.bool:
                raise TypeError(f"{name} must be boolean")
            if not bool(m.any()):
                raise ValueError(f"{name} has no true element")


@dataclass(frozen=True)
class CorrespondenceMap:
    """Per-position nearest neighbours.

    ``assignment[b, i]`` is the reference position matched to context position
    ``i`` of batch entry ``b`` (-1 when invalid). With ``joint=True`` indices
    address the flattened ``B * h * w`` reference pool instead.
    """

    assignment: torch.Tensor
    distances: torch.Tensor
    valid: torch.Tensor
    joint: bool = False


def _sinusoid(pos: np.ndarray, n_ch: int) -> np.ndarray:
    out = np.zeros((n_ch, pos.shape[0]), dtype=np.float64)
    n_freq = (n_ch + 1) // 2
    denom = max(n_ch // 2, 1)
    for k in range(n_freq):
        inv_freq = 10000.0 ** (-k / denom)
        out[2 * k] = np.sin(pos * inv_freq)
        if 2 * k + 1 < n_ch:
            out[2 * k + 1] = np.cos(pos * inv_freq)
    return out


def make_positional_field(
    channels: int,
    rows: int,
    cols: int,
    mode: str = "2d",
    frames: int | None = None,
    weight: float = 3.0,
) -> PositionalField:
    """Fixed sinusoidal grid encoding.

    In ``2d`` mode the first half of the channels encodes the row index and the
    second half the column index, with (sin, cos) pairs whose inverse
    frequencies decay geometrically from 1 to 1e-4. ``3d`` mode splits the
    channels three ways (rows, cols, frames) and returns one field per frame.
    """
    if channels % 2:
        raise ValueError(f"positional field needs an even channel count, got {channels}")
    r_idx = np.arange(rows, dtype=np.float64)
    c_idx = np.arange(cols, dtype=np.float64)
    if mode == "2d":
        half = channels // 2
        pe = np.empty((channels, rows, cols), dtype=np.float64)
        pe[:half] = _sinusoid(r_idx, half)[:, :, None]
        pe[half:] = _sinusoid(c_idx, channels - half)[:, None, :]
    elif mode == "3d":
        if frames is None or frames < 1:
            raise ValueError("3d positional field needs a positive frame count")
        n_r = int(round(channels / 3))
        n_c = int(round(channels / 3))
        n_f = channels - n_r - n_c
        f_idx = np.arange(frames, dtype=np.float64)
        pe = np.empty((frames, channels, rows, cols), dtype=np.float64)
        pe[:, :n_r] = _sinusoid(r_idx, n_r)[None, :, :, None]
        pe[:, n_r:n_r + n_c] = _sinusoid(c_idx, n_c)[None, :, None, :]
        pe[:, n_r + n_c:] = _sinusoid(f_idx, n_f).T[:, :, None, None]
    else:
        raise ValueError(f"unknown positional mode {mode!r}")
    return PositionalField(data=torch.from_numpy(pe), mode=mode, weight=float(weight))


def add_positional_encoding(F: FeatureMap, pe: PositionalField) -> FeatureMap:
    field_ = pe.data
    if pe.mode == "3d":
        if tuple(field_.shape) != (F.batch, F.channels, *F.spatial):
            raise ValueError(
                f"3d positional field {tuple(field_.shape)} does not match features "
                f"{tuple(F.data.shape)}"
            )
    elif tuple(field_.shape) != (F.channels, *F.spatial):
        raise ValueError(
            f"positional field {tuple(field_.shape)} does not match features "
            f"{(F.channels, *F.spatial)}"
        )
    if pe.weight == 0:
        return F.with_data(F.data.clone())
    return F.with_data(F.data + pe.weight * field_.to(F.data.dtype))


def _batched_mask(mask: torch.Tensor | None, B: int, hw: tuple) -> torch.Tensor:
    if mask is None:
        return torch.ones((B, hw[0] * hw[1]), dtype=torch.bool)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if mask.ndim == 2:
        mask = mask.expand(B, *mask.shape)
    if tuple(mask.shape[1:]) != tuple(hw):
        raise ValueError(f"mask spatial shape {tuple(mask.shape[1:])} does not match features {hw}")
    return mask.reshape(B, -1)


def _nearest(query: torch.Tensor, pool: torch.Tensor, allowed: torch.Tensor, chunk: int = 256):
    # explicit differences (not the |a|^2 + |b|^2 - 2ab expansion) keep
    # distances exact enough for index-level agreement with brute force
    idx = torch.empty(query.shape[0], dtype=torch.long)
    dist = torch.empty(query.shape[0], dtype=query.dtype)
    for i0 in range(0, query.shape[0], chunk):
        diff = query[i0:i0 + chunk, None, :] - pool[None, :, :]
        d = (diff * diff).sum(-1)
        d[:, ~allowed] = float("inf")
        dist[i0:i0 + chunk], idx[i0:i0 + chunk] = d.min(dim=1)
    return idx, dist


@torch.no_grad()
def match_features(
    F_c: FeatureMap,
    F_ref: FeatureMap,
    masks: RegionMask | None = None,
    joint: bool = False,
) -> CorrespondenceMap:
    """Assign every in-mask context position its nearest in-mask reference
    position under squared L2 distance; ties go to the smallest index.

    ``joint=True`` searches the reference positions of all batch entries at
    once (used with 3d positional fields for video).
    """
    if F_c.channels != F_ref.channels:
        raise ValueError(f"channel mismatch: {F_c.channels} vs {F_ref.channels}")
    if F_c.batch != F_ref.batch:
        raise ValueError(f"batch mismatch: {F_c.batch} vs {F_ref.batch}")
    B = F_c.batch
    cm = _batched_mask(None if masks is None else masks.context_mask, B, F_c.spatial)
    rm = _batched_mask(None if masks is None else masks.reference_mask, B, F_ref.spatial)
    qc = F_c.vectors().detach()
    qr = F_ref.vectors().detach()
    n = qc.shape[1]
    assignment = torch.full((B, n), -1, dtype=torch.long)
    distances = torch.zeros((B, n), dtype=qc.dtype)
    if joint:
        if not bool(rm.any()) or not bool(cm.any()):
            raise ValueError("empty effective mask")
        pool, allowed = qr.reshape(-1, qr.shape[-1]), rm.reshape(-1)
    for b in range(B):
        if not joint:
            if not bool(cm[b].any()) or not bool(rm[b].any()):
                raise ValueError(f"empty effective mask in batch entry {b}")
            pool, allowed = qr[b], rm[b]
        rows = torch.nonzero(cm[b]).flatten()
        idx, dist = _nearest(qc[b, rows], pool, allowed)
        assignment[b, rows] = idx
        distances[b, rows] = dist
    return CorrespondenceMap(assignment=assignment, distances=distances, valid=cm.clone(), joint=joint)


def rearrange(F_ref: FeatureMap, m: CorrespondenceMap) -> FeatureMap:
    """Gather reference vectors into context layout; invalid positions are zero."""
    B, c = F_ref.batch, F_ref.channels
    flat = F_ref.data.flatten(2)  # [B, c, n]
    n = flat.shape[2]
    if m.assignment.shape != (B, n):
        raise ValueError(f"assignment shape {tuple(m.assignment.shape)} does not match {(B, n)}")
    safe = m.assignment.clamp(min=0)
    if m.joint:
        pool = flat.transpose(0, 1).reshape(c, B * n)
        out = pool[:, safe.reshape(-1)].reshape(c, B, n).transpose(0, 1)
    else:
        out = torch.gather(flat, 2, safe[:, None, :].expand(B, c, n))
    out = out * m.valid[:, None, :].to(out.dtype)
    return F_ref.with_data(out.reshape(F_ref.data.shape))


def _attention_profiles(self_attn: torch.Tensor) -> np.ndarray:
    a = torch.as_tensor(self_attn).detach()
    if a.ndim == 3:
        a = a.mean(0)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"self-attention must be [heads, n, n] or [n, n], got {tuple(a.shape)}")
    return a.to(torch.float64).cpu().numpy()


def cluster_mask(self_attn: torch.Tensor, hw: tuple, k: int = 2, seed: int = 0):
    """Foreground mask ``[h, w]`` from k-means over self-attention rows.

    The selected cluster is the one whose members receive the largest mean
    attention. Returns ``(mask, degenerate)``; degenerate inputs (all rows
    identical) give a full mask.
    """
    prof = _attention_profiles(self_attn)
    n = prof.shape[0]
    if n != hw[0] * hw[1]:
        raise ValueError(f"attention over {n} positions does not fit grid {hw}")
    full = torch.ones(hw, dtype=torch.bool)
    if np.max(np.abs(prof - prof[0])) <= 1e-12:
        return full, True
    if k <= 1:
        return full, False
    n_distinct = np.unique(prof, axis=0).shape[0]
    k = min(k, n_distinct)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        km = KMeans(n_clusters=k, n_init=1, max_iter=100, tol=1e-6, random_state=seed).fit(prof)
    labels = km.labels_
    received = prof.mean(axis=0)
    scores = [received[labels == j].mean() if np.any(labels == j) else -np.inf for j in range(k)]
    best = int(np.argmax(scores))
    return torch.from_numpy(labels == best).reshape(hw), False


def cluster_masks(
    self_attn_c: torch.Tensor,
    self_attn_ref: torch.Tensor,
    hw: tuple,
    k: int = 2,
    seed: int = 0,
) -> RegionMask:
    """Region masks for context and reference; batched inputs
    ``[B, heads, n, n]`` give per-entry masks ``[B, h, w]``."""
    def per_entry(attn):
        if attn.ndim == 4:
            pairs = [cluster_mask(attn[b], hw, k, seed) for b in range(attn.shape[0])]
            return torch.stack([p[0] for p in pairs]), any(p[1] for p in pairs)
        return cluster_mask(attn, hw, k, seed)

    mc, dc = per_entry(self_attn_c)
    mr, dr = per_entry(self_attn_ref)
    return RegionMask(context_mask=mc, reference_mask=mr, degenerate=dc or dr)


def pca_components(F: FeatureMap, index: int = 0, n_components: int = 3, rtol: float = 1e-10):
    """Project per-position vectors of one batch entry onto the top principal
    components. Returns ``(projections [h*w, n_components], explained_variance)``;
    components beyond the numerical rank are zero."""
    X = F.vectors()[index].detach().to(torch.float64).cpu().numpy()
    if X.shape[0] < 3:
        raise ValueError("PCA view needs at least 3 positions")
    Xc = X - X.mean(axis=0)
    _, svals, vt = np.linalg.svd(Xc, full_matrices=False)
    var = svals**2 / X.shape[0]
    proj = np.zeros((X.shape[0], n_components))
    explained = np.zeros(n_components)
    tol = rtol * (svals[0] if svals.size else 0.0)
    for j in range(min(n_components, svals.size)):
        if svals[j] <= tol:
            continue
        v = vt[j]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        proj[:, j] = Xc @ v
        explained[j] = var[j]
    return proj, explained


def pca_visualize(F: FeatureMap, index: int = 0) -> np.ndarray:
    """Top-3 PCA components as an RGB image ``[h, w, 3]`` in [0, 1]."""
    proj, _ = pca_components(F, index)
    img = np.zeros_like(proj)
    for j in range(3):
        col = proj[:, j]
        span = col.max() - col.min()
        if span > 0:
            img[:, j] = (col - col.min()) / span
    return img.reshape(*F.spatial, 3)


@torch.no_grad()
def shuffle_assignment(
    m: CorrespondenceMap,
    seed: int,
    F_c: FeatureMap,
    F_ref: FeatureMap,
) -> CorrespondenceMap:
    """Randomly permute the valid assignments of each batch entry and recompute
    distances against the new targets (``F_c``/``F_ref`` as used for matching)."""
    rng = np.random.default_rng(seed)
    assignment = m.assignment.clone()
    distances = torch.zeros_like(m.distances)
    qc = F_c.vectors().detach()
    qr = F_ref.vectors().detach()
    pool_all = qr.reshape(-1, qr.shape[-1])
    for b in range(assignment.shape[0]):
        rows = torch.nonzero(m.valid[b]).flatten()
        perm = torch.from_numpy(rng.permutation(rows.numel()))
        assignment[b, rows] = assignment[b, rows[perm]]
        pool = pool_all if m.joint else qr[b]
        diff = qc[b, rows] - pool[assignment[b, rows]]
        distances[b, rows] = (diff * diff).sum(-1)
    return CorrespondenceMap(assignment=assignment, distances=distances, valid=m.valid.clone(), joint=m.joint)
