"""Seeded toy instances shared by energy, sampler and acceptance tests."""
import numpy as np
import torch

from semantix.denoiser import Condition, Taps, toy_backend
from semantix.energy import EnergyConfig
from semantix.inversion import cfg_combine, invert
from semantix.sampler import _energy_context, start_session
from semantix.schedule import make_plan, make_schedule


def smooth_image(seed, size=16, cells=4):
    rng = np.random.default_rng(seed)
    base = rng.random((cells, cells, 3))
    img = np.kron(base, np.ones((size // cells, size // cells, 1)))
    return np.clip(img * 0.85 + 0.15 * rng.random((size, size, 3)), 0, 1)


def energy_instance(seed, cfg=None, size=16, step=12, n_steps=20):
    """A transfer session advanced to ``step`` (by replay) plus its energy context."""
    cfg = cfg or EnergyConfig()
    be = toy_backend(seed=seed, latent_shape=(3, size, size))
    s = make_schedule(1000)
    plan = make_plan(s, 601, n_steps)
    xc = be.encode(smooth_image(seed, size)[None])
    xr = be.encode(smooth_image(seed + 1000, size)[None])
    rc = invert(xc, be, Condition("photo"), s, plan, cfg.omega, seed)
    rr = invert(xr, be, Condition("painting"), s, plan, cfg.omega, seed + 1)
    session = start_session(rc, rr, cfg)
    t = plan.steps[step]
    x_out = session.x_out + 0.3 * torch.from_numpy(np.random.default_rng(seed).standard_normal(session.x_out.shape))
    from dataclasses import replace
    session = replace(session, step_index=step)
    blocks, swap = cfg.feature_blocks, cfg.swap_layers
    with torch.no_grad():
        out = be.predict(torch.cat([session.x_c, session.x_ref, x_out]), t,
                         [Condition("photo"), Condition("painting"), Condition("photo")],
                         Taps(features=blocks, self_attn=blocks, cross_attn=swap, kv=swap))
    ctx, _ = _energy_context(session, be, out, t, swap_on=bool(swap))
    return x_out, ctx
