"""Diffusion variance schedules and timestep plans.

Timesteps are 1-indexed: ``t = 1`` is the least noisy native step and
``alpha_bar(0)`` is defined as 1 (the clean signal).
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

SIGMA_VARIANTS = ("posterior-sqrt", "paper-literal")
DEFAULT_BETA_SPEC = "linear(0.00085, 0.012)"

BetaSpec = Union[str, Sequence[float], np.ndarray]

_LINEAR_RE = re.compile(r"^\s*linear\(\s*([^,\s]+)\s*,\s*([^)\s]+)\s*\)\s*$")


def _parse_beta_spec(T: int, beta_spec: BetaSpec) -> np.ndarray:
    if isinstance(beta_spec, str):
        m = _LINEAR_RE.match(beta_spec)
        if m is None:
            raise ValueError(f"unrecognised beta spec {beta_spec!r}; expected 'linear(a, b)'")
        lo, hi = float(m.group(1)), float(m.group(2))
        if T == 1:
            return np.array([lo], dtype=np.float64)
        return np.linspace(lo, hi, T, dtype=np.float64)
    beta = np.asarray(beta_spec, dtype=np.float64).reshape(-1)
    if beta.shape[0] != T:
        raise ValueError(f"explicit beta schedule has {beta.shape[0]} entries, expected T={T}")
    return beta


@dataclass(frozen=True)
class Schedule:
    """Noise schedule over ``T`` native steps.

    ``beta[i]``, ``alpha[i]`` and ``alpha_bar[i]`` hold the values for timestep
    ``t = i + 1``. Use the ``*_at`` accessors to index by timestep.
    """

    T: int
    beta: np.ndarray
    eta: float = 1.0
    sigma_variant: str = "posterior-sqrt"
    alpha: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        beta = np.array(self.beta, dtype=np.float64)
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        for arr in (beta, alpha, alpha_bar):
            arr.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    def _check_t(self, t: int, allow_zero: bool = False) -> int:
        t = int(t)
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")
        return t

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._check_t(t) - 1])

    def alpha_bar_at(self, t: int) -> float:
        t = self._check_t(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def describe(self) -> dict:
        return {"T": self.T, "eta": self.eta, "sigma_variant": self.sigma_variant}


def make_schedule(
    T: int,
    beta_spec: BetaSpec = DEFAULT_BETA_SPEC,
    eta: float = 1.0,
    sigma_variant: str = "posterior-sqrt",
) -> Schedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    if sigma_variant not in SIGMA_VARIANTS:
        raise ValueError(f"sigma variant must be one of {SIGMA_VARIANTS}, got {sigma_variant!r}")
    beta = _parse_beta_spec(int(T), beta_spec)
    bad = np.flatnonzero(~((beta > 0.0) & (beta < 1.0)))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"beta at timestep t={i + 1} is {beta[i]!r}; every beta must lie in (0, 1)")
    return Schedule(T=int(T), beta=beta, eta=float(eta), sigma_variant=sigma_variant)


def sigma(s: Schedule, t: int, variant: str | None = None, t_prev: int | None = None) -> float:
    """Per-step noise scale of the reverse update ``t -> t_prev``.

    ``t_prev`` defaults to ``t - 1``. For a strided plan the step variance is
    taken from the effective beta ``1 - alpha_bar(t) / alpha_bar(t_prev)``,
    which reduces to ``beta_t`` on the native grid.
    """
    variant = s.sigma_variant if variant is None else variant
    if variant not in SIGMA_VARIANTS:
        raise ValueError(f"unknown sigma variant {variant!r}")
    t = s._check_t(t)
    if t_prev is None or t_prev == t - 1:
        t_prev = t - 1
        beta_t = s.beta_at(t)
    else:
        t_prev = s._check_t(t_prev, allow_zero=True)
        if t_prev >= t:
            raise ValueError(f"t_prev={t_prev} must be smaller than t={t}")
        beta_t = 1.0 - s.alpha_bar_at(t) / s.alpha_bar_at(t_prev)
    if s.eta == 0.0:
        return 0.0
    ratio = (1.0 - s.alpha_bar_at(t_prev)) / (1.0 - s.alpha_bar_at(t))
    if variant == "paper-literal":
        return s.eta * beta_t * ratio
    return s.eta * float(np.sqrt(beta_t * ratio))


@dataclass(frozen=True)
class TimestepPlan:
    """Sampling timesteps, stored in descending (sampling) order."""

    steps: tuple
    t_start: int

    def __post_init__(self):
        steps = tuple(int(t) for t in self.steps)
        if any(a <= b for a, b in zip(steps, steps[1:])):
            raise ValueError("plan steps must be strictly descending")
        if steps and steps[0] != self.t_start:
            raise ValueError("t_start must equal the largest plan step")
        if steps and steps[-1] < 1:
            raise ValueError("plan steps must be >= 1")
        object.__setattr__(self, "steps", steps)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def ascending(self) -> tuple:
        return self.steps[::-1]

    def prev(self, i: int) -> int:
        """Target timestep of sampling step ``i`` (0 after the final step)."""
        return self.steps[i + 1] if i + 1 < len(self.steps) else 0

    def transitions(self):
        return [(t, self.prev(i)) for i, t in enumerate(self.steps)]


def make_plan(s: Schedule, t_start: int, n_steps: int) -> TimestepPlan:
    """Evenly spaced plan over ``[1, t_start]`` ending exactly at ``t_start``.

    Step ``k`` (``k = 1..n``) is ``floor(k * t_start / n + 1/2)``, i.e. the
    ideal grid point rounded half-up.
    """
    t_start, n_steps = int(t_start), int(n_steps)
    if n_steps < 1:
        raise ValueError("n_steps must be positive")
    if not 1 <= t_start <= s.T:
        raise ValueError(f"t_start={t_start} outside [1, {s.T}]")
    if n_steps > t_start:
        raise ValueError(f"n_steps={n_steps} exceeds t_start={t_start}")
    k = np.arange(1, n_steps + 1, dtype=np.int64)
    # integer form of floor(k * t_start / n + 0.5) avoids float rounding
    steps = (2 * k * t_start + n_steps) // (2 * n_steps)
    return TimestepPlan(steps=tuple(int(v) for v in steps[::-1]), t_start=t_start)
