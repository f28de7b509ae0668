"""scikit-learn style wrapper around the transfer pipeline."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .denoiser import Condition
from .inversion import invert
from .sampler import run_transfer
from .schedule import make_plan
from .validation import check_images


class SemantixTransfer(TransformerMixin, BaseEstimator):
    """Style transfer as a transformer.

    ``fit(reference)`` inverts the reference image once; ``transform(X)``
    stylizes each context image in ``X`` (``[N, H, W, 3]`` in [0, 1]) with it
    and returns an array of the same shape. With ``video=True`` the rows of
    ``X`` are frames of one clip and share masks, AdaIN statistics and
    (under ``pe_mode="3d"``) matching.

    Attributes set by ``fit``: ``reference_record_``, ``backend_``,
    ``schedule_``, ``plan_``, ``config_``. ``transform`` sets
    ``energy_logs_`` (one list of per-step records per transfer).
    """

    def __init__(self, gamma_ref=3.0, gamma_c=0.9, gamma_reg=1.0, omega=3.5, lambda_pe=3.0,
                 t_start=601, n_steps=60, swap_start=10, adain_start=20, pe_mode="2d",
                 shuffle_correspondence=False, shuffle_seed=0, seed=0, denoiser_seed=0, downscale=2,
                 context_prompt="", reference_prompt="", video=False):
        self.gamma_ref = gamma_ref
        self.gamma_c = gamma_c
        self.gamma_reg = gamma_reg
        self.omega = omega
        self.lambda_pe = lambda_pe
        self.t_start = t_start
        self.n_steps = n_steps
        self.swap_start = swap_start
        self.adain_start = adain_start
        self.pe_mode = pe_mode
        self.shuffle_correspondence = shuffle_correspondence
        self.shuffle_seed = shuffle_seed
        self.seed = seed
        self.denoiser_seed = denoiser_seed
        self.downscale = downscale
        self.context_prompt = context_prompt
        self.reference_prompt = reference_prompt
        self.video = video

    def run_config(self) -> RunConfig:
        return RunConfig.from_dict({
            "denoiser": {"seed": self.denoiser_seed, "downscale": self.downscale},
            "plan": {"t-start": self.t_start, "n-steps": self.n_steps, "inversion-seed": self.seed},
            "guidance": {
                "gamma-ref": float(self.gamma_ref), "gamma-c": float(self.gamma_c),
                "gamma-reg": float(self.gamma_reg), "omega": float(self.omega),
                "lambda-pe": float(self.lambda_pe), "swap-start": self.swap_start,
                "adain-start": self.adain_start, "pe-mode": self.pe_mode,
                "shuffle-correspondence": bool(self.shuffle_correspondence), "shuffle-seed": self.shuffle_seed,
            },
            "prompts": {"context-prompt": self.context_prompt, "reference-prompt": self.reference_prompt},
        })

    def fit(self, X, y=None):
        ref = check_images(X, "reference")
        if ref.shape[0] != 1:
            raise ValueError(f"fit expects a single reference image, got {ref.shape[0]}")
        cfg = self.run_config()
        self.config_ = cfg
        self.backend_ = cfg.build_backend(ref.shape[1:3])
        self.schedule_ = cfg.make_schedule()
        self.plan_ = make_plan(self.schedule_, cfg.plan.t_start, cfg.plan.n_steps)
        self.reference_shape_ = ref.shape[1:]
        self.reference_record_ = invert(
            self.backend_.encode(ref), self.backend_, Condition(self.reference_prompt), self.schedule_,
            self.plan_, float(self.omega), self.seed + 1,
        )
        self.n_features_in_ = int(np.prod(ref.shape[1:]))
        return self

    def _transfer(self, ctx):
        return run_transfer(
            ctx, None, (self.context_prompt, self.reference_prompt), self.backend_, self.schedule_,
            self.config_.energy_config(), self.plan_, seed=self.seed, reference_record=self.reference_record_,
        )

    def transform(self, X):
        check_is_fitted(self, "reference_record_")
        X = check_images(X)
        if X.shape[1:] != self.reference_shape_:
            raise ValueError(f"context shape {X.shape[1:]} differs from the fitted reference {self.reference_shape_}")
        if self.video:
            res = self._transfer(X)
            self.energy_logs_ = [res.energy_log]
            return res.output
        outs, logs = [], []
        for img in X:
            res = self._transfer(img[None])
            outs.append(res.output[0])
            logs.append(res.energy_log)
        self.energy_logs_ = logs
        return np.stack(outs)
