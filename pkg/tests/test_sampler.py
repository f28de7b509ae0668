from dataclasses import replace

import numpy as np
import pytest
import torch

from semantix.denoiser import Condition, toy_backend
from semantix.energy import EnergyConfig
from semantix.inversion import invert, reconstruct
from semantix.sampler import (
    NonFiniteLatentError,
    adain_latents,
    guided_step,
    run_transfer,
    start_session,
)
from semantix.schedule import make_plan, make_schedule

from helpers import smooth_image

S = make_schedule(1000)


def test_adain_formula():
    rng = np.random.default_rng(0)
    x = torch.from_numpy(rng.standard_normal((1, 1, 8, 8)))
    x = (x - x.mean()) / x.std(unbiased=False) + 1.0
    r = torch.from_numpy(rng.standard_normal((1, 1, 8, 8)))
    r = (r - r.mean()) / r.std(unbiased=False) * 2.0 + 3.0
    np.testing.assert_allclose(adain_latents(x, r).numpy(), (2 * (x - 1) + 3).numpy(), atol=1e-12)


def test_adain_stats_and_idempotence():
    rng = np.random.default_rng(1)
    x = torch.from_numpy(rng.standard_normal((3, 4, 8, 8)) * 2 + 1)
    r = torch.from_numpy(rng.standard_normal((3, 4, 8, 8)) * 0.5 - 2)
    y = adain_latents(x, r)
    dims = (0, 2, 3)
    np.testing.assert_allclose(y.mean(dims).numpy(), r.mean(dims).numpy(), atol=1e-5)
    np.testing.assert_allclose(y.std(dims, unbiased=False).numpy(), r.std(dims, unbiased=False).numpy(), atol=1e-5)
    np.testing.assert_allclose(adain_latents(y, r).numpy(), y.numpy(), atol=1e-5)
    np.testing.assert_allclose(adain_latents(x, x).numpy(), x.numpy(), atol=1e-5)
    with pytest.raises(ValueError):
        adain_latents(x, r[:, :2])


def test_adain_constant_channel_finite():
    x = torch.ones(1, 2, 4, 4, dtype=torch.float64)
    r = torch.from_numpy(np.random.default_rng(2).standard_normal((1, 2, 4, 4)))
    y = adain_latents(x, r)
    assert torch.isfinite(y).all()
    np.testing.assert_allclose(y.mean((0, 2, 3)).numpy(), r.mean((0, 2, 3)).numpy(), atol=1e-12)


def records(seed=0, n_steps=12, size=16, omega=3.5):
    be = toy_backend(seed=seed, latent_shape=(3, size, size))
    plan = make_plan(S, 601, n_steps)
    xc = be.encode(smooth_image(seed, size)[None])
    xr = be.encode(smooth_image(seed + 500, size)[None])
    rc = invert(xc, be, Condition("photo"), S, plan, omega, seed)
    rr = invert(xr, be, Condition("art"), S, plan, omega, seed + 1)
    return be, plan, xc, xr, rc, rr


def test_session_start():
    be, plan, xc, xr, rc, rr = records()
    sess = start_session(rc, rr, EnergyConfig(swap_start_step=2, adain_start_step=4))
    assert torch.equal(sess.x_out, torch.from_numpy(rc.x_T.astype(np.float64)))
    assert sess.step_index == 0 and not sess.finished
    with pytest.raises(ValueError):
        start_session(rc, rr, EnergyConfig())  # adain@20 exceeds a 12-step plan
    other = invert(xr, be, Condition("art"), S, make_plan(S, 601, 6), 3.5, 1)
    with pytest.raises(ValueError):
        start_session(rc, other, EnergyConfig(swap_start_step=2, adain_start_step=4))


def test_degenerate_guidance_tracks_context():
    be, plan, xc, xr, rc, rr = records(1)
    cfg = EnergyConfig(0.0, 0.0, 0.0, swap_start_step=len(plan), adain_start_step=len(plan))
    sess = start_session(rc, rr, cfg)
    traj = []
    reconstruct(rc, be, S, trajectory=traj)
    while not sess.finished:
        sess = guided_step(sess, be, S)
        assert float((sess.x_out - sess.x_c).abs().max()) <= 1e-4
        assert float((sess.x_c - traj[sess.step_index - 1]).abs().max()) <= 1e-9
    assert float((sess.x_c - xc).abs().max()) <= 1e-4
    with pytest.raises(ValueError):
        guided_step(sess, be, S)


def test_energy_log_fields():
    be, plan, xc, xr, rc, rr = records(2)
    cfg = EnergyConfig(swap_start_step=3, adain_start_step=6)
    sess = start_session(rc, rr, cfg)
    while not sess.finished:
        sess = guided_step(sess, be, S)
    log = sess.energy_log
    assert [r["step"] for r in log] == list(range(len(plan)))
    assert [r["t"] for r in log] == list(plan.steps)
    assert set(log[0]) == {"step", "t", "style", "spatial", "regularizer", "total", "grad_max_abs"}
    assert all(r["regularizer"] == 0.0 for r in log[:3])
    assert all(r["regularizer"] > 0.0 for r in log[3:])


def test_adain_applied_from_threshold():
    be, plan, xc, xr, rc, rr = records(3)
    cfg = EnergyConfig(swap_start_step=3, adain_start_step=6)
    sess = start_session(rc, rr, cfg)
    for i in range(len(plan)):
        sess = guided_step(sess, be, S)
        dims = (0, 2, 3)
        matched = torch.allclose(sess.x_out.mean(dims), sess.x_ref.mean(dims), atol=1e-9)
        assert matched == (i >= 6)


def test_track_isolation_and_determinism():
    be, plan, xc, xr, rc, rr = records(4)
    img_c, img_r = smooth_image(4, 16), smooth_image(504, 16)
    outs = []
    for g in (0.0, 3.0, 3.0):
        cfg = EnergyConfig(gamma_ref=g, swap_start_step=3, adain_start_step=6)
        outs.append(run_transfer(img_c, img_r, ("photo", "art"), be, S, cfg, plan, seed=4))
    a, b, c = outs
    assert np.array_equal(a.context_recon, b.context_recon)
    assert np.array_equal(a.reference_recon, b.reference_recon)
    assert not np.array_equal(a.output, b.output)
    assert np.array_equal(b.output, c.output)
    assert b.energy_log == c.energy_log
    assert np.abs(a.context_recon - img_c).max() <= 1e-3


def test_output_uses_context_noise_only():
    """Output and context tracks differ only through eps: same maps, same x_T."""
    be, plan, xc, xr, rc, rr = records(5)
    cfg = EnergyConfig(0.0, 0.0, 0.0, swap_start_step=len(plan), adain_start_step=len(plan))
    state = torch.random.get_rng_state()
    np_state = np.random.get_state()
    sess = start_session(rc, rr, cfg)
    while not sess.finished:
        sess = guided_step(sess, be, S)
    assert torch.equal(torch.random.get_rng_state(), state)
    assert np.array_equal(np.random.get_state()[1], np_state[1])


def test_style_non_increasing_in_gamma_ref():
    for seed in range(3):
        be, plan, xc, xr, rc, rr = records(10 + seed, n_steps=30)
        finals = []
        for g in (0.0, 1.0, 3.0):
            cfg = EnergyConfig(gamma_ref=g, swap_start_step=5, adain_start_step=10)
            sess = start_session(rc, rr, cfg)
            while not sess.finished:
                sess = guided_step(sess, be, S)
            finals.append(sess.energy_log[-1]["style"])
        assert finals[0] >= finals[1] >= finals[2], finals


def test_video_frames_and_3d_pe():
    be = toy_backend(seed=6, latent_shape=(3, 16, 16))
    plan = make_plan(S, 601, 8)
    frames = np.stack([smooth_image(6 + f, 16) for f in range(3)])
    ref = smooth_image(99, 16)
    for mode in ("2d", "3d"):
        cfg = EnergyConfig.video(swap_start_step=2, adain_start_step=4, pe_mode=mode)
        res = run_transfer(frames, ref, ("clip", "art"), be, S, cfg, plan, seed=1)
        assert res.output.shape == frames.shape and res.reference_recon.shape == (1, 16, 16, 3)
        assert np.abs(res.context_recon - frames).max() <= 1e-3


def test_shuffle_changes_output():
    be, plan, xc, xr, rc, rr = records(7)
    img_c, img_r = smooth_image(7, 16), smooth_image(507, 16)
    base = EnergyConfig(swap_start_step=3, adain_start_step=6)
    a = run_transfer(img_c, img_r, ("p", "a"), be, S, base, plan)
    b = run_transfer(img_c, img_r, ("p", "a"), be, S, replace(base, shuffle_correspondence=True), plan)
    assert not np.array_equal(a.output, b.output)
    assert np.array_equal(a.context_recon, b.context_recon)


def test_non_finite_detected(monkeypatch):
    be, plan, xc, xr, rc, rr = records(8)
    sess = start_session(rc, rr, EnergyConfig(swap_start_step=3, adain_start_step=6))
    import semantix.sampler as sm
    monkeypatch.setattr(sm, "adain_latents", lambda x, r, e: x * float("inf"))
    sess = replace(sess, cfg=replace(sess.cfg, adain_start_step=0))
    with pytest.raises(NonFiniteLatentError) as err:
        guided_step(sess, be, S)
    assert err.value.step == 0 and err.value.track == "output"
