"""Edit-friendly DDPM inversion.

Every plan timestep gets its own independently noised copy of the input,
``x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps_t``. The reverse update
``x_prev = mu_hat(x_t) + scale * z_t`` is then solved for ``z_t``, so replaying
the stored maps reproduces the input exactly.

The last step (``t -> 0``, ``abar_0 = 1``) always has ``sigma = 0``; so does
every step when ``eta = 0``. Such steps store the residual correction
normalised by ``sqrt(1 - abar_t)`` instead, keeping one map per plan step and
exact replay for every ``eta``.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .denoiser import Condition, Denoiser
from .schedule import Schedule, TimestepPlan, make_schedule, sigma

ARCHIVE_VERSION = 1
NOISE_DTYPE = np.float32


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, omega: float) -> torch.Tensor:
    """Classifier-free guidance, ``(1 + omega) * cond - omega * uncond``.

    Evaluated as ``cond + omega * (cond - uncond)`` so equal branches come
    back bit-exactly."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"shape mismatch: {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}")
    if omega == 0:
        return eps_cond
    return eps_cond + omega * (eps_cond - eps_uncond)


def _noise_for(seed: int, t: int, shape) -> torch.Tensor:
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, int(t)])
    return torch.from_numpy(rng.standard_normal(shape))


def diffuse_independent(x_0: torch.Tensor, s: Schedule, plan: TimestepPlan, rng_seed: int) -> dict:
    """Noised copies ``{t: x_t}`` with a fresh, independent draw per timestep.

    The draw for timestep ``t`` depends only on ``(rng_seed, t)``.
    """
    x_0 = torch.as_tensor(x_0, dtype=torch.float64)
    out = {}
    for t in plan.ascending:
        ab = s.alpha_bar_at(t)
        if ab == 1.0:
            out[t] = x_0.clone()
            continue
        eps = _noise_for(rng_seed, t, tuple(x_0.shape))
        out[t] = math.sqrt(ab) * x_0 + math.sqrt(1.0 - ab) * eps
    return out


def compute_mu_hat(x_t, eps_hat, t: int, t_prev: int, s: Schedule, sigma_t: float | None = None) -> torch.Tensor:
    """Predicted mean of ``x_{t_prev}``.

    ``sqrt(abar_prev) * (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)
    + sqrt(1 - abar_prev - sigma_t^2) * eps``
    """
    if sigma_t is None:
        sigma_t = sigma(s, t, t_prev=t_prev)
    ab_t, ab_p = s.alpha_bar_at(t), s.alpha_bar_at(t_prev)
    radicand = 1.0 - ab_p - sigma_t**2
    if radicand < 0:
        if radicand < -1e-12:
            raise ValueError(
                f"sigma_t^2={sigma_t**2:.6g} exceeds 1 - abar(t_prev)={1.0 - ab_p:.6g} at t={t}"
            )
        radicand = 0.0
    pred_x0 = (x_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    return math.sqrt(ab_p) * pred_x0 + math.sqrt(radicand) * eps_hat


def extract_noise(x_prev, mu_hat, sigma_t: float):
    if not sigma_t > 0:
        raise ValueError(f"sigma_t must be positive to extract a noise map, got {sigma_t}")
    return (x_prev - mu_hat) / sigma_t


def step_scale(s: Schedule, t: int, t_prev: int) -> tuple:
    """``(sigma_t, replay_scale)`` for the update ``t -> t_prev``.

    ``replay_scale`` multiplies the stored map; it is ``sigma_t`` unless that is
    zero, in which case it falls back to ``sqrt(1 - abar_t)``.
    """
    sig = sigma(s, t, t_prev=t_prev)
    return sig, (sig if sig > 0 else math.sqrt(1.0 - s.alpha_bar_at(t)))


def denoise_step(x_t, eps_hat, t: int, t_prev: int, s: Schedule, z) -> torch.Tensor:
    sig, scale = step_scale(s, t, t_prev)
    return compute_mu_hat(x_t, eps_hat, t, t_prev, s, sig) + scale * torch.as_tensor(z, dtype=torch.float64)


@dataclass(frozen=True)
class InversionRecord:
    x_T: np.ndarray
    noise_maps: dict
    plan: TimestepPlan
    condition: Condition
    omega: float = 3.5
    seed: int = 0
    schedule: dict = field(default_factory=dict)

    def __post_init__(self):
        if set(self.noise_maps) != set(self.plan.steps):
            missing = sorted(set(self.plan.steps) - set(self.noise_maps))
            raise ValueError(f"noise maps missing for timesteps {missing}")

    @property
    def shape(self) -> tuple:
        return tuple(self.x_T.shape)

    def x_T_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.x_T.astype(np.float64))

    def z(self, t: int) -> torch.Tensor:
        if t not in self.noise_maps:
            raise KeyError(f"no noise map stored for timestep {t}")
        return torch.from_numpy(self.noise_maps[t].astype(np.float64))


def _as_batch(x_0) -> torch.Tensor:
    x = torch.as_tensor(x_0, dtype=torch.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"latent must be [C, H, W] or [B, C, H, W], got {tuple(x.shape)}")
    if not bool(torch.isfinite(x).all()):
        raise ValueError("latent contains non-finite values")
    return x


def _guided_eps(backend: Denoiser, x_t, t, c, omega):
    out = backend.predict(x_t, t, c)
    return cfg_combine(out.eps_cond, out.eps_uncond, omega)


def _rounded(x: torch.Tensor) -> torch.Tensor:
    return x.to(torch.float32).to(torch.float64)


@torch.no_grad()
def invert(x_0, backend: Denoiser, c: Condition, s: Schedule, plan: TimestepPlan,
           cfg_omega: float = 3.5, seed: int = 0) -> InversionRecord:
    x_0 = _as_batch(x_0)
    xs = diffuse_independent(x_0, s, plan, seed)
    # run the recursion on exactly what replay will see: the float32 x_T and
    # float32 maps, so reconstruction differs from x_0 only by rounding of z
    x_cur = _rounded(xs[plan.t_start])
    x_T = x_cur.numpy().astype(NOISE_DTYPE)
    maps = {}
    for t, t_prev in plan.transitions():
        x_prev = x_0 if t_prev == 0 else xs[t_prev]
        eps = _guided_eps(backend, x_cur, t, c, cfg_omega)
        sig, scale = step_scale(s, t, t_prev)
        mu = compute_mu_hat(x_cur, eps, t, t_prev, s, sig)
        z = extract_noise(x_prev, mu, scale).numpy().astype(NOISE_DTYPE)
        maps[t] = z
        x_cur = mu + scale * torch.from_numpy(z.astype(np.float64))
    return InversionRecord(
        x_T=x_T, noise_maps=maps, plan=plan, condition=c, omega=float(cfg_omega), seed=int(seed),
        schedule=schedule_params(s),
    )


@torch.no_grad()
def reconstruct(rec: InversionRecord, backend: Denoiser, s: Schedule, cfg_omega: float | None = None,
                trajectory: list | None = None) -> torch.Tensor:
    """Replay the stored maps from ``x_T`` down to an ``x_0`` estimate.

    ``trajectory``, when given, receives the latent after every step.
    """
    omega = rec.omega if cfg_omega is None else cfg_omega
    x = rec.x_T_tensor()
    for t, t_prev in rec.plan.transitions():
        eps = _guided_eps(backend, x, t, rec.condition, omega)
        x = denoise_step(x, eps, t, t_prev, s, rec.z(t))
        if trajectory is not None:
            trajectory.append(x.clone())
    return x


def schedule_params(s: Schedule) -> dict:
    beta = np.asarray(s.beta)
    return {
        "T": s.T,
        "eta": s.eta,
        "sigma_variant": s.sigma_variant,
        "beta_sha256": hashlib.sha256(beta.astype("<f8").tobytes()).hexdigest(),
        "beta_first": float(beta[0]),
        "beta_last": float(beta[-1]),
    }


# -- archive ------------------------------------------------------------------
#
# <dir>/manifest.json   JSON manifest (see save_record)
# <dir>/x_T.f32         raw little-endian float32, C order, shape manifest["shape"]
# <dir>/z_0601.f32      one file per timestep, same layout

def _entry_name(t: int) -> str:
    return f"z_{t:04d}.f32"


def save_record(rec: InversionRecord, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {"x_T": "x_T.f32"}
    rec.x_T.astype("<f4").tofile(path / "x_T.f32")
    for t in rec.plan.steps:
        rec.noise_maps[t].astype("<f4").tofile(path / _entry_name(t))
        entries[str(t)] = _entry_name(t)
    manifest = {
        "format": "semantix-inversion",
        "version": ARCHIVE_VERSION,
        "dtype": "float32",
        "byte_order": "little",
        "shape": list(rec.shape),
        "plan": list(rec.plan.steps),
        "t_start": rec.plan.t_start,
        "omega": rec.omega,
        "seed": rec.seed,
        "condition": {"prompt": rec.condition.prompt, "is_null": rec.condition.is_null},
        "schedule": rec.schedule,
        "entries": entries,
    }
    if extra:
        manifest["extra"] = extra
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_record(path) -> tuple:
    """Read an archive; returns ``(record, manifest)``."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no inversion archive at {path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "semantix-inversion":
        raise ValueError(f"{manifest_path} is not an inversion archive")
    shape = tuple(manifest["shape"])

    def read(name):
        arr = np.fromfile(path / name, dtype="<f4")
        if arr.size != int(np.prod(shape)):
            raise ValueError(f"{name}: expected {int(np.prod(shape))} values, found {arr.size}")
        return arr.reshape(shape).astype(NOISE_DTYPE)

    plan = TimestepPlan(steps=tuple(manifest["plan"]), t_start=manifest["t_start"])
    entries = manifest["entries"]
    maps = {}
    for t in plan.steps:
        if str(t) not in entries:
            raise ValueError(f"archive lacks the noise map for timestep {t}")
        maps[t] = read(entries[str(t)])
    cond = Condition(**manifest["condition"])
    rec = InversionRecord(
        x_T=read(entries["x_T"]), noise_maps=maps, plan=plan, condition=cond,
        omega=manifest["omega"], seed=manifest["seed"], schedule=manifest["schedule"],
    )
    return rec, manifest


def schedule_from_params(params: dict, beta_spec) -> Schedule:
    s = make_schedule(params["T"], beta_spec, params["eta"], params["sigma_variant"])
    if schedule_params(s)["beta_sha256"] != params["beta_sha256"]:
        raise ValueError("beta schedule does not match the one used for inversion")
    return s
