"""Energy-guided sampling over three tracks.

The context and reference tracks replay their own inversion noise and are
never touched by guidance. The output track starts from the context's
``x_T``, replays the context noise maps, and gets the clamped energy gradient
added to its noise prediction every step.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .correspondence import (
    FeatureMap,
    add_positional_encoding,
    cluster_masks,
    make_positional_field,
    match_features,
    rearrange,
    shuffle_assignment,
)
from .denoiser import Condition, Denoiser, KVInjection, Taps
from .energy import EnergyConfig, EnergyContext, clamp_gradient, evaluate_energy
from .inversion import InversionRecord, cfg_combine, denoise_step, invert
from .schedule import Schedule, TimestepPlan

__all__ = [
    "cfg_combine",
    "adain_latents",
    "TransferSession",
    "start_session",
    "guided_step",
    "run_transfer",
    "TransferResult",
    "NonFiniteLatentError",
]

logger = logging.getLogger(__name__)


class NonFiniteLatentError(FloatingPointError):
    def __init__(self, step: int, track: str):
        super().__init__(f"non-finite {track} latent at sampling step {step}")
        self.step = step
        self.track = track


def adain_latents(x_out: torch.Tensor, x_ref: torch.Tensor, eps_std: float = 1e-5) -> torch.Tensor:
    """Match per-channel mean and std of ``x_out`` to ``x_ref``.

    Statistics pool the batch (frame) and spatial axes of ``[B, C, H, W]``
    latents. ``eps_std`` floors the source std, so channels with
    ``std > eps_std`` are matched exactly.
    """
    if x_out.shape[1] != x_ref.shape[1]:
        raise ValueError(f"channel mismatch: {x_out.shape[1]} vs {x_ref.shape[1]}")
    dims = (0, 2, 3)
    mu_o = x_out.mean(dims, keepdim=True)
    sd_o = x_out.std(dims, unbiased=False, keepdim=True)
    mu_r = x_ref.mean(dims, keepdim=True)
    sd_r = x_ref.std(dims, unbiased=False, keepdim=True)
    return (x_out - mu_o) / sd_o.clamp_min(eps_std) * sd_r + mu_r


@dataclass(frozen=True)
class TransferSession:
    context_record: InversionRecord
    reference_record: InversionRecord
    x_c: torch.Tensor
    x_ref: torch.Tensor
    x_out: torch.Tensor
    step_index: int
    cfg: EnergyConfig
    plan: TimestepPlan
    context_condition: Condition
    reference_condition: Condition
    energy_log: tuple = ()
    diagnostics: dict = field(default_factory=dict)

    @property
    def finished(self) -> bool:
        return self.step_index >= len(self.plan)


def _tile_record(rec: InversionRecord, n: int) -> InversionRecord:
    if rec.x_T.shape[0] == n:
        return rec
    if rec.x_T.shape[0] != 1:
        raise ValueError(f"cannot replicate a {rec.x_T.shape[0]}-entry record to {n} frames")
    return replace(
        rec,
        x_T=np.repeat(rec.x_T, n, axis=0),
        noise_maps={t: np.repeat(z, n, axis=0) for t, z in rec.noise_maps.items()},
    )


def start_session(context_record: InversionRecord, reference_record: InversionRecord, cfg: EnergyConfig,
                  context_condition: Condition | None = None,
                  reference_condition: Condition | None = None) -> TransferSession:
    plan = context_record.plan
    if reference_record.plan != plan:
        raise ValueError("context and reference records use different plans")
    cfg.validate_for(len(plan))
    reference_record = _tile_record(reference_record, context_record.x_T.shape[0])
    x_T = context_record.x_T_tensor()
    return TransferSession(
        context_record=context_record,
        reference_record=reference_record,
        x_c=x_T,
        x_ref=reference_record.x_T_tensor(),
        x_out=x_T.clone(),
        step_index=0,
        cfg=cfg,
        plan=plan,
        context_condition=context_condition or context_record.condition,
        reference_condition=reference_condition or reference_record.condition,
    )


_PE_CACHE: dict = {}


def _positional(channels, h, w, mode, frames, weight):
    key = (channels, h, w, mode, frames if mode == "3d" else None, weight)
    if key not in _PE_CACHE:
        _PE_CACHE[key] = make_positional_field(channels, h, w, mode, frames, weight)
    return _PE_CACHE[key]


def _energy_context(session: TransferSession, backend: Denoiser, out, t: int, swap_on: bool):
    cfg, B = session.cfg, session.x_c.shape[0]
    ctx_feats, ref_star, masks = {}, {}, {}
    degenerate = False
    for k in cfg.feature_blocks:
        data = out.features[k].data
        f_c = FeatureMap(data[:B], k, t)
        f_r = FeatureMap(data[B:2 * B], k, t)
        attn = out.self_attn[k]
        region = cluster_masks(attn[:B], attn[B:2 * B], f_c.spatial, cfg.k_clusters, cfg.mask_seed)
        degenerate |= region.degenerate
        pe = _positional(f_c.channels, *f_c.spatial, cfg.pe_mode, B, cfg.lambda_pe)
        f_c_pe, f_r_pe = add_positional_encoding(f_c, pe), add_positional_encoding(f_r, pe)
        corr = match_features(f_c_pe, f_r_pe, region, joint=cfg.pe_mode == "3d")
        if cfg.shuffle_correspondence:
            corr = shuffle_assignment(corr, [cfg.shuffle_seed, session.step_index, k], f_c_pe, f_r_pe)
        ctx_feats[k] = f_c
        ref_star[k] = rearrange(f_r, corr)
        masks[k] = region.context_mask
    injection = None
    ca_context = {}
    if swap_on:
        layers = cfg.swap_layers
        injection = KVInjection(
            frozenset(layers),
            {l: out.keys[l][B:2 * B] for l in layers},
            {l: out.values[l][B:2 * B] for l in layers},
        )
        ca_context = {l: out.cross_attn[l][:B] for l in layers}
    ctx = EnergyContext(
        backend=backend, t=t, condition=session.context_condition, context_features=ctx_feats,
        reference_star=ref_star, context_masks=masks, cfg=cfg, ca_context=ca_context, injection=injection,
    )
    return ctx, degenerate


def guided_step(session: TransferSession, backend: Denoiser, s: Schedule) -> TransferSession:
    """Advance all three tracks by one plan step."""
    if session.finished:
        raise ValueError("transfer session already finished")
    i, cfg, plan = session.step_index, session.cfg, session.plan
    t, t_prev = plan.steps[i], plan.prev(i)
    B = session.x_c.shape[0]
    swap_on = i >= cfg.swap_start_step and len(cfg.swap_layers) > 0
    blocks = cfg.feature_blocks
    swap = cfg.swap_layers if swap_on else ()

    cc, cr = session.context_condition, session.reference_condition
    with torch.no_grad():
        out = backend.predict(
            torch.cat([session.x_c, session.x_ref, session.x_out]),
            t,
            [cc] * B + [cr] * B + [cc] * B,
            Taps(features=blocks, self_attn=blocks, cross_attn=swap, kv=swap),
        )
    eps = cfg_combine(out.eps_cond, out.eps_uncond, cfg.omega)
    eps_c, eps_r, eps_o = eps[:B], eps[B:2 * B], eps[2 * B:]

    diagnostics = dict(session.diagnostics)
    ctx, degenerate = _energy_context(session, backend, out, t, swap_on)
    if degenerate:
        diagnostics["degenerate_masks"] = diagnostics.get("degenerate_masks", 0) + 1
    breakdown, grad = evaluate_energy(session.x_out, ctx, diagnostics)
    if not cfg.guidance_off:
        eps_o = eps_o + clamp_gradient(grad, cfg)

    z_c = session.context_record.z(t)
    x_c = denoise_step(session.x_c, eps_c, t, t_prev, s, z_c)
    x_ref = denoise_step(session.x_ref, eps_r, t, t_prev, s, session.reference_record.z(t))
    x_out = denoise_step(session.x_out, eps_o, t, t_prev, s, z_c)
    if i >= cfg.adain_start_step:
        x_out = adain_latents(x_out, x_ref, cfg.adain_eps)

    for name, x in (("context", x_c), ("reference", x_ref), ("output", x_out)):
        if not bool(torch.isfinite(x).all()):
            raise NonFiniteLatentError(i, name)

    record = {"step": i, "t": t, **breakdown.as_dict(), "grad_max_abs": float(grad.abs().max())}
    logger.debug("step %d t=%d total=%.6g", i, t, breakdown.total)
    return replace(
        session, x_c=x_c, x_ref=x_ref, x_out=x_out.detach(), step_index=i + 1,
        energy_log=session.energy_log + (record,), diagnostics=diagnostics,
    )


@dataclass
class TransferResult:
    context_recon: np.ndarray
    reference_recon: np.ndarray
    output: np.ndarray
    energy_log: list
    context_record: InversionRecord
    reference_record: InversionRecord
    latents: dict
    diagnostics: dict

    @property
    def final_style(self) -> float:
        return self.energy_log[-1]["style"]


def _images(arr) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4 or a.shape[-1] != 3:
        raise ValueError(f"expected [H, W, 3] or [F, H, W, 3] images, got shape {a.shape}")
    return a


def run_transfer(context_input, reference_input, prompts, backend: Denoiser, s: Schedule, cfg: EnergyConfig,
                 plan: TimestepPlan, seed: int = 0, reference_record: InversionRecord | None = None,
                 on_step=None) -> TransferResult:
    """Invert both inputs, run every guided step and decode all tracks.

    ``prompts`` is a ``(context, reference)`` pair of :class:`Condition` (or
    strings). Video contexts are ``[F, H, W, 3]``; the reference image is
    replicated per frame.
    """
    c_ctx, c_ref = (p if isinstance(p, Condition) else Condition(str(p)) for p in prompts)
    ctx_img = _images(context_input)
    frames = ctx_img.shape[0]
    x0_c = backend.encode(ctx_img)
    rec_c = invert(x0_c, backend, c_ctx, s, plan, cfg.omega, seed)
    if reference_record is None:
        ref_img = _images(reference_input)
        if ref_img.shape[0] not in (1, frames):
            raise ValueError("reference must be a single image or match the context frame count")
        reference_record = invert(backend.encode(ref_img), backend, c_ref, s, plan, cfg.omega, seed + 1)
    session = start_session(rec_c, reference_record, cfg, c_ctx, c_ref)
    while not session.finished:
        session = guided_step(session, backend, s)
        if on_step is not None:
            on_step(session)
    ref_decoded = backend.decode(session.x_ref)
    return TransferResult(
        context_recon=backend.decode(session.x_c),
        reference_recon=ref_decoded[:1] if ctx_img.shape[0] > 1 or ref_decoded.shape[0] == 1 else ref_decoded,
        output=backend.decode(session.x_out),
        energy_log=list(session.energy_log),
        context_record=rec_c,
        reference_record=reference_record,
        latents={"context": session.x_c, "reference": session.x_ref, "output": session.x_out},
        diagnostics=session.diagnostics,
    )
