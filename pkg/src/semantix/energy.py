"""Guidance energy: style, spatial and semantic-distance terms.

All distances are ``1 - cosine`` per position, averaged. Correspondence,
masks and context-branch quantities are constants during differentiation;
only the output latent carries gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import torch

from .correspondence import FeatureMap
from .denoiser import Condition, Denoiser, KVInjection, Taps

IMAGE_WEIGHTS = (3.0, 0.9, 1.0)
VIDEO_WEIGHTS = (6.0, 3.0, 5.0)


@dataclass(frozen=True)
class EnergyConfig:
    gamma_ref: float = IMAGE_WEIGHTS[0]
    gamma_c: float = IMAGE_WEIGHTS[1]
    gamma_reg: float = IMAGE_WEIGHTS[2]
    lambda_pe: float = 3.0
    omega: float = 3.5
    clamp: tuple = (-1.0, 1.0)
    swap_start_step: int = 10
    adain_start_step: int = 20
    feature_blocks: tuple = (2, 3)
    swap_layers: tuple = (3, 4)
    pe_mode: str = "2d"
    k_clusters: int = 2
    mask_seed: int = 0
    shuffle_correspondence: bool = False
    shuffle_seed: int = 0
    adain_eps: float = 1e-5

    def __post_init__(self):
        for name in ("gamma_ref", "gamma_c", "gamma_reg", "lambda_pe"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        lo, hi = self.clamp
        if not lo < hi:
            raise ValueError(f"clamp bounds must satisfy lo < hi, got {self.clamp}")
        if self.pe_mode not in ("2d", "3d"):
            raise ValueError(f"pe_mode must be '2d' or '3d', got {self.pe_mode!r}")
        if self.k_clusters < 1:
            raise ValueError("k_clusters must be >= 1")
        object.__setattr__(self, "clamp", (float(lo), float(hi)))
        object.__setattr__(self, "feature_blocks", tuple(self.feature_blocks))
        object.__setattr__(self, "swap_layers", tuple(self.swap_layers))

    @classmethod
    def video(cls, **overrides) -> "EnergyConfig":
        g = dict(zip(("gamma_ref", "gamma_c", "gamma_reg"), VIDEO_WEIGHTS))
        g.update(overrides)
        return cls(**g)

    @property
    def weights(self) -> tuple:
        return (self.gamma_ref, self.gamma_c, self.gamma_reg)

    @property
    def guidance_off(self) -> bool:
        return not any(self.weights)

    def validate_for(self, n_steps: int) -> None:
        for name in ("swap_start_step", "adain_start_step"):
            v = getattr(self, name)
            if not 0 <= v <= n_steps:
                raise ValueError(f"{name}={v} outside [0, {n_steps}] for a {n_steps}-step plan")


@dataclass(frozen=True)
class EnergyBreakdown:
    style: float
    spatial: float
    regularizer: float
    total: float

    def as_dict(self) -> dict:
        return {"style": self.style, "spatial": self.spatial, "regularizer": self.regularizer, "total": self.total}


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def _cosine_distance(a: torch.Tensor, b: torch.Tensor, diagnostics: dict | None):
    """Per-position ``1 - cos`` for ``[B, c, h, w]`` pairs; a zero vector
    counts as orthogonal."""
    dot = (a * b).sum(1)
    norm = a.norm(dim=1) * b.norm(dim=1)
    zero = norm == 0
    if diagnostics is not None and bool(zero.any()):
        diagnostics["zero_norm"] = diagnostics.get("zero_norm", 0) + int(zero.sum())
    safe = torch.where(zero, torch.ones_like(norm), norm)
    cos = torch.where(zero, torch.zeros_like(dot), dot / safe)
    return 1.0 - cos


def _data(F):
    return F.data if isinstance(F, FeatureMap) else torch.as_tensor(F)


def style_term(F_out, F_ref_star, mask, diagnostics: dict | None = None) -> torch.Tensor:
    """Mean ``1 - cos`` between output and rearranged reference features over
    context-mask positions; several blocks are averaged. Range [0, 2]."""
    outs, refs = _as_list(F_out), _as_list(F_ref_star)
    masks = _as_list(mask) if isinstance(mask, (list, tuple)) else [mask] * len(outs)
    if not len(outs) == len(refs) == len(masks):
        raise ValueError("style term needs aligned block lists")
    vals = []
    for fo, fr, m in zip(outs, refs, masks):
        a, b = _data(fo), _data(fr)
        if a.shape != b.shape:
            raise ValueError(f"feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
        d = _cosine_distance(a, b, diagnostics)
        if m is None:
            vals.append(d.mean())
            continue
        m = torch.as_tensor(m, dtype=torch.bool).expand_as(d)
        if not bool(m.any()):
            raise ValueError("style mask selects no positions")
        vals.append(d[m].mean())
    return torch.stack(vals).mean()


def spatial_term(F_out, F_c, diagnostics: dict | None = None) -> torch.Tensor:
    """Mean ``1 - cos`` between output and context features at every position."""
    outs, ctxs = _as_list(F_out), _as_list(F_c)
    return style_term(outs, ctxs, [None] * len(outs), diagnostics)


def semantic_distance(ca_swap: Mapping, ca_context: Mapping, layers: Sequence | None = None) -> torch.Tensor:
    """Sum over layers of the mean squared difference between swapped-branch
    and (stop-gradient) context cross-attention maps."""
    layers = sorted(ca_swap) if layers is None else list(layers)
    total = None
    for k in layers:
        a, b = ca_swap[k], ca_context[k].detach()
        if a.shape != b.shape:
            raise ValueError(f"cross-attention shape mismatch at layer {k}: {tuple(a.shape)} vs {tuple(b.shape)}")
        term = ((a - b) ** 2).mean()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros((), dtype=torch.float64)
    return total


def total_energy(parts: Mapping, cfg: EnergyConfig) -> EnergyBreakdown:
    style, spatial, reg = (float(parts[k]) for k in ("style", "spatial", "regularizer"))
    total = cfg.gamma_ref * style + cfg.gamma_c * spatial + cfg.gamma_reg * reg
    return EnergyBreakdown(style=style, spatial=spatial, regularizer=reg, total=total)


@dataclass
class EnergyContext:
    """Everything the energy needs besides the output latent, held fixed."""

    backend: Denoiser
    t: int
    condition: Condition
    context_features: dict
    reference_star: dict
    context_masks: dict
    cfg: EnergyConfig
    ca_context: dict = field(default_factory=dict)
    injection: KVInjection | None = None

    def __post_init__(self):
        if not getattr(self.backend, "differentiable", False):
            raise TypeError(f"backend {type(self.backend).__name__} is not differentiable; energy guidance needs gradients")
        self.backend.check_taps(self.cfg.feature_blocks)
        self.backend.check_taps(self.cfg.swap_layers, "swap layer")


def energy_terms(x_out: torch.Tensor, ctx: EnergyContext, diagnostics: dict | None = None) -> dict:
    blocks = ctx.cfg.feature_blocks
    out = ctx.backend.predict(x_out, ctx.t, ctx.condition, Taps(features=blocks))
    f_out = [out.features[k] for k in blocks]
    style = style_term(f_out, [ctx.reference_star[k] for k in blocks],
                       [ctx.context_masks[k] for k in blocks], diagnostics)
    spatial = spatial_term(f_out, [ctx.context_features[k] for k in blocks], diagnostics)
    if ctx.injection is not None:
        layers = tuple(sorted(ctx.injection.layer_ids))
        swap = ctx.backend.predict(x_out, ctx.t, ctx.condition, Taps(cross_attn=layers), ctx.injection)
        reg = semantic_distance(swap.cross_attn, ctx.ca_context, layers)
    else:
        reg = torch.zeros((), dtype=torch.float64)
    return {"style": style, "spatial": spatial, "regularizer": reg}


def energy_value(x_out: torch.Tensor, ctx: EnergyContext) -> torch.Tensor:
    parts = energy_terms(x_out, ctx)
    cfg = ctx.cfg
    return cfg.gamma_ref * parts["style"] + cfg.gamma_c * parts["spatial"] + cfg.gamma_reg * parts["regularizer"]


def evaluate_energy(x_out: torch.Tensor, ctx: EnergyContext, diagnostics: dict | None = None):
    """``(EnergyBreakdown, unclamped gradient)`` at ``x_out``."""
    x = torch.as_tensor(x_out, dtype=torch.float64).detach()
    if ctx.cfg.guidance_off:
        with torch.no_grad():
            parts = energy_terms(x, ctx, diagnostics)
        return total_energy(parts, ctx.cfg), torch.zeros_like(x)
    x = x.clone().requires_grad_(True)
    parts = energy_terms(x, ctx, diagnostics)
    cfg = ctx.cfg
    total = cfg.gamma_ref * parts["style"] + cfg.gamma_c * parts["spatial"] + cfg.gamma_reg * parts["regularizer"]
    (grad,) = torch.autograd.grad(total, x)
    return total_energy({k: v.detach() for k, v in parts.items()}, cfg), grad


def clamp_gradient(grad: torch.Tensor, cfg: EnergyConfig) -> torch.Tensor:
    lo, hi = cfg.clamp
    return grad.clamp(lo, hi)


def energy_gradient(x_out: torch.Tensor, ctx: EnergyContext, clamp: bool = True) -> torch.Tensor:
    """Gradient of the weighted energy w.r.t. the output latent, clamped
    elementwise to ``cfg.clamp`` unless ``clamp=False``."""
    _, grad = evaluate_energy(x_out, ctx)
    return clamp_gradient(grad, ctx.cfg) if clamp else grad
