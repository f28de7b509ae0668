"""Run configuration: TOML or JSON files with kebab-case keys.

Unknown keys are errors. Every value is validated before any compute. Defaults
are the image-transfer settings; ``RunConfig.video()`` swaps in the video
guidance weights.
"""
from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .denoiser import Denoiser, get_adapter, tap_table_from_overrides, toy_backend
from .energy import IMAGE_WEIGHTS, VIDEO_WEIGHTS, EnergyConfig
from .schedule import DEFAULT_BETA_SPEC, SIGMA_VARIANTS, make_schedule

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SEED_ENV = "SEMANTIX_SEED"
ADAPTER_IMAGE_SIZE = 512


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DenoiserSection:
    kind: str = "toy"
    seed: int = 0
    downscale: int = 2
    adapter: str = ""
    tap_table: tuple = ()


@dataclass(frozen=True)
class ScheduleSection:
    train_steps: int = 1000
    beta_spec: str = DEFAULT_BETA_SPEC
    eta: float = 1.0
    sigma_variant: str = "posterior-sqrt"


@dataclass(frozen=True)
class PlanSection:
    t_start: int = 601
    n_steps: int = 60
    inversion_seed: int = 0


@dataclass(frozen=True)
class GuidanceSection:
    omega: float = 3.5
    gamma_ref: float = IMAGE_WEIGHTS[0]
    gamma_c: float = IMAGE_WEIGHTS[1]
    gamma_reg: float = IMAGE_WEIGHTS[2]
    lambda_pe: float = 3.0
    clamp_lo: float = -1.0
    clamp_hi: float = 1.0
    swap_start: int = 10
    adain_start: int = 20
    feature_blocks: tuple = (2, 3)
    swap_layers: tuple = (3, 4)
    pe_mode: str = "2d"
    k_clusters: int = 2
    mask_seed: int = 0
    shuffle_correspondence: bool = False
    shuffle_seed: int = 0


@dataclass(frozen=True)
class PromptSection:
    context_prompt: str = ""
    reference_prompt: str = ""


@dataclass(frozen=True)
class IOSection:
    output_dir: str = "semantix-out"
    energy_log: bool = False
    image_size: int = 0


SECTIONS = {
    "denoiser": DenoiserSection,
    "schedule": ScheduleSection,
    "plan": PlanSection,
    "guidance": GuidanceSection,
    "prompts": PromptSection,
    "io": IOSection,
}


def kebab(name: str) -> str:
    return name.replace("_", "-")


def _coerce(section: str, f, value):
    where = f"{section}.{kebab(f.name)}"
    default = f.default
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if f.name == "tap_table":
        if not isinstance(value, (list, tuple)) or not all(isinstance(r, dict) for r in value):
            raise ConfigError(f"{where}: expected a list of tables")
        rows = []
        for r in value:
            unknown = set(r) - {"id", "stride", "channels", "heads"}
            if unknown or "id" not in r:
                raise ConfigError(f"{where}: rows need 'id' and may set stride/channels/heads (got {sorted(r)})")
            rows.append(tuple(sorted((k, int(v)) for k, v in r.items())))
        return tuple(rows)
    if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise ConfigError(f"{where}: expected a list of integers, got {value!r}")
    return tuple(value)


@dataclass(frozen=True)
class RunConfig:
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    plan: PlanSection = field(default_factory=PlanSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    prompts: PromptSection = field(default_factory=PromptSection)
    io: IOSection = field(default_factory=IOSection)

    @classmethod
    def video(cls) -> "RunConfig":
        g = GuidanceSection(**dict(zip(("gamma_ref", "gamma_c", "gamma_reg"), VIDEO_WEIGHTS)))
        return cls(guidance=g)

    # -- (de)serialisation ----------------------------------------------------

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            sec = getattr(self, name)
            vals = {}
            for f in fields(sec):
                v = getattr(sec, f.name)
                if f.name == "tap_table":
                    v = [dict(row) for row in v]
                elif isinstance(v, tuple):
                    v = list(v)
                vals[kebab(f.name)] = v
            out[name] = vals
        return out

    @classmethod
    def from_dict(cls, data: dict, base: "RunConfig | None" = None) -> "RunConfig":
        cfg = base or cls()
        if not isinstance(data, dict):
            raise ConfigError("config root must be a table")
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        for name, sec_cls in SECTIONS.items():
            raw = data.get(name, {})
            if not isinstance(raw, dict):
                raise ConfigError(f"section {name!r} must be a table")
            by_key = {kebab(f.name): f for f in fields(sec_cls)}
            bad = set(raw) - set(by_key)
            if bad:
                raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(bad))}")
            updates = {by_key[k].name: _coerce(name, by_key[k], v) for k, v in raw.items()}
            cfg = replace(cfg, **{name: replace(getattr(cfg, name), **updates)})
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
        try:
            data = json.loads(text) if path.suffix.lower() == ".json" else tomllib.loads(text)
        except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        return cls.from_dict(data, base)

    def with_overrides(self, section: str, **values) -> "RunConfig":
        sec = getattr(self, section)
        by_name = {f.name: f for f in fields(sec)}
        coerced = {k: _coerce(section, by_name[k], v) for k, v in values.items()}
        cfg = replace(self, **{section: replace(sec, **coerced)})
        cfg.validate()
        return cfg

    def with_env_seed(self, environ=None) -> "RunConfig":
        """Apply ``SEMANTIX_SEED`` to every seed when it is set."""
        environ = os.environ if environ is None else environ
        raw = environ.get(SEED_ENV)
        if raw is None or raw == "":
            return self
        try:
            seed = int(raw)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc
        return replace(
            self,
            denoiser=replace(self.denoiser, seed=seed),
            plan=replace(self.plan, inversion_seed=seed),
            guidance=replace(self.guidance, mask_seed=seed, shuffle_seed=seed),
        )

    # -- validation / derived objects -------------------------------------------

    def validate(self) -> None:
        d, s, p, g, io = self.denoiser, self.schedule, self.plan, self.guidance, self.io
        if d.kind not in ("toy", "adapter"):
            raise ConfigError(f"denoiser.kind must be 'toy' or 'adapter', got {d.kind!r}")
        if d.kind == "adapter" and not d.adapter:
            raise ConfigError("denoiser.adapter must name a registered adapter when kind = 'adapter'")
        if d.downscale < 1:
            raise ConfigError("denoiser.downscale must be >= 1")
        if s.sigma_variant not in SIGMA_VARIANTS:
            raise ConfigError(f"schedule.sigma-variant must be one of {SIGMA_VARIANTS}")
        try:
            make_schedule(s.train_steps, s.beta_spec, s.eta, s.sigma_variant)
        except ValueError as exc:
            raise ConfigError(f"schedule: {exc}") from exc
        if not 1 <= p.n_steps <= p.t_start <= s.train_steps:
            raise ConfigError(
                f"plan needs 1 <= n-steps ({p.n_steps}) <= t-start ({p.t_start}) <= train-steps ({s.train_steps})"
            )
        if not g.feature_blocks:
            raise ConfigError("guidance.feature-blocks must not be empty")
        if g.k_clusters < 1:
            raise ConfigError("guidance.k-clusters must be >= 1")
        if io.image_size < 0:
            raise ConfigError("io.image-size must be >= 0")
        try:
            self.energy_config().validate_for(p.n_steps)
        except ValueError as exc:
            raise ConfigError(f"guidance: {exc}") from exc

    def energy_config(self) -> EnergyConfig:
        g = self.guidance
        return EnergyConfig(
            gamma_ref=g.gamma_ref, gamma_c=g.gamma_c, gamma_reg=g.gamma_reg, lambda_pe=g.lambda_pe,
            omega=g.omega, clamp=(g.clamp_lo, g.clamp_hi), swap_start_step=g.swap_start,
            adain_start_step=g.adain_start, feature_blocks=g.feature_blocks, swap_layers=g.swap_layers,
            pe_mode=g.pe_mode, k_clusters=g.k_clusters, mask_seed=g.mask_seed,
            shuffle_correspondence=g.shuffle_correspondence, shuffle_seed=g.shuffle_seed,
        )

    def make_schedule(self):
        s = self.schedule
        return make_schedule(s.train_steps, s.beta_spec, s.eta, s.sigma_variant)

    def image_size(self) -> int:
        """Square resize target; 0 keeps the input size."""
        return ADAPTER_IMAGE_SIZE if self.denoiser.kind == "adapter" else self.io.image_size

    def build_backend(self, image_hw: tuple) -> Denoiser:
        """Backend for inputs of size ``image_hw`` (after any resize)."""
        from .validation import check_toy_size

        d = self.denoiser
        if d.kind == "adapter":
            factory = get_adapter(d.adapter)
            return factory(seed=d.seed, image_size=image_hw, tap_table=[dict(r) for r in d.tap_table])
        lh, lw = check_toy_size(image_hw[0], image_hw[1], d.downscale)
        shape = (3, lh, lw)
        table = tap_table_from_overrides(shape, [dict(r) for r in d.tap_table])
        return toy_backend(seed=d.seed, latent_shape=shape, tap_table=table, downscale=d.downscale)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def option_table() -> list:
    """``(section, field)`` pairs; each leaf becomes a ``--<kebab>`` flag."""
    rows = []
    for name, sec_cls in SECTIONS.items():
        for f in fields(sec_cls):
            rows.append((name, f))
    names = [kebab(f.name) for _, f in rows]
    assert len(names) == len(set(names)), "config leaf names must be unique"
    return rows
