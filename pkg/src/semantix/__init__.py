"""Energy-guided semantic style transfer with diffusion features."""

__version__ = "0.1.0"

from .config import ConfigError, RunConfig
from .correspondence import (
    CorrespondenceMap,
    FeatureMap,
    PositionalField,
    RegionMask,
    add_positional_encoding,
    cluster_mask,
    make_positional_field,
    match_features,
    pca_components,
    rearrange,
    shuffle_assignment,
)
from .denoiser import Condition, Denoiser, KVInjection, Taps, ToyDenoiser, toy_backend
from .energy import EnergyBreakdown, EnergyConfig, EnergyContext, energy_gradient, evaluate_energy
from .estimator import SemantixTransfer
from .inversion import InversionRecord, cfg_combine, invert, load_record, reconstruct, save_record
from .metrics import MetricReport, gram_loss, ssim
from .sampler import adain_latents, guided_step, run_transfer, start_session
from .schedule import Schedule, TimestepPlan, make_plan, make_schedule, sigma

__all__ = [
    "ConfigError", "RunConfig", "CorrespondenceMap", "FeatureMap", "PositionalField", "RegionMask",
    "add_positional_encoding", "cluster_mask", "make_positional_field", "match_features", "pca_components",
    "rearrange", "shuffle_assignment", "Condition", "Denoiser", "KVInjection", "Taps", "ToyDenoiser",
    "toy_backend", "EnergyBreakdown", "EnergyConfig", "EnergyContext", "energy_gradient", "evaluate_energy",
    "SemantixTransfer", "InversionRecord", "cfg_combine", "invert", "load_record", "reconstruct",
    "save_record", "MetricReport", "gram_loss", "ssim", "adain_latents", "guided_step", "run_transfer",
    "start_session", "Schedule", "TimestepPlan", "make_plan", "make_schedule", "sigma",
]
