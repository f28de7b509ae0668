"""Denoiser backend contract and the deterministic toy backend.

A backend predicts conditional and unconditional noise for a latent batch and
exposes decoder taps: feature maps, self-attention, cross-attention and
self-attention keys/values. Keys/values captured from one pass can be injected
into another, replacing the layer's own (the reference-to-output KV swap).

Real models are bound by subclassing :class:`Denoiser` and registering a
factory under a name, either with :func:`register_adapter` or through the
``semantix.adapters`` entry-point group.
"""
from __future__ import annotations

import abc
import hashlib
from dataclasses import dataclass, field
from importlib import metadata
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .correspondence import FeatureMap

ADAPTER_ENTRY_POINT_GROUP = "semantix.adapters"
DEFAULT_FEATURE_BLOCKS = (2, 3)


@dataclass(frozen=True)
class Condition:
    """Text condition. ``Condition.null()`` is the unconditional token."""

    prompt: str = ""
    is_null: bool = False

    @classmethod
    def null(cls) -> "Condition":
        return cls(prompt="", is_null=True)

    @property
    def key(self) -> str:
        return "<null>" if self.is_null else f"prompt:{self.prompt}"


@dataclass(frozen=True)
class Taps:
    """Which decoder quantities to return, by block/layer id."""

    features: tuple = ()
    self_attn: tuple = ()
    cross_attn: tuple = ()
    kv: tuple = ()

    def ids(self) -> set:
        return set(self.features) | set(self.self_attn) | set(self.cross_attn) | set(self.kv)


@dataclass(frozen=True)
class TapSpec:
    block_id: int
    stride: int
    channels: int
    heads: int
    spatial: tuple

    @property
    def positions(self) -> int:
        return self.spatial[0] * self.spatial[1]

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


@dataclass(frozen=True)
class KVInjection:
    """Keys/values ``[B, heads, n, d_head]`` per self-attention layer."""

    layer_ids: frozenset
    source_keys: Mapping[int, torch.Tensor]
    source_values: Mapping[int, torch.Tensor]

    def __post_init__(self):
        object.__setattr__(self, "layer_ids", frozenset(self.layer_ids))
        missing = self.layer_ids - set(self.source_keys) | self.layer_ids - set(self.source_values)
        if missing:
            raise ValueError(f"injection lacks keys/values for layers {sorted(missing)}")

    def select(self, index) -> "KVInjection":
        """Slice the batch axis (e.g. pick the reference track)."""
        return KVInjection(
            self.layer_ids,
            {k: self.source_keys[k][index] for k in self.layer_ids},
            {k: self.source_values[k][index] for k in self.layer_ids},
        )


@dataclass
class DenoiserOutput:
    eps_cond: torch.Tensor
    eps_uncond: torch.Tensor
    features: dict = field(default_factory=dict)
    self_attn: dict = field(default_factory=dict)
    cross_attn: dict = field(default_factory=dict)
    keys: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)


class Denoiser(abc.ABC):
    """Contract every backend satisfies."""

    differentiable: bool = False

    @property
    @abc.abstractmethod
    def latent_shape(self) -> tuple:
        """``(C, H, W)`` of one latent."""

    @property
    @abc.abstractmethod
    def tap_table(self) -> Mapping[int, TapSpec]:
        ...

    @abc.abstractmethod
    def predict(self, x_t, t: int, c, taps: Taps | None = None, injection: KVInjection | None = None) -> DenoiserOutput:
        ...

    @abc.abstractmethod
    def encode(self, images: np.ndarray) -> torch.Tensor:
        """``[B, H, W, 3]`` images in [0, 1] to latents ``[B, C, h, w]``."""

    @abc.abstractmethod
    def decode(self, latents: torch.Tensor) -> np.ndarray:
        ...

    def capture_kv(self, x_t, t: int, c, layer_ids: Iterable[int]) -> KVInjection:
        layer_ids = tuple(sorted(set(layer_ids)))
        out = self.predict(x_t, t, c, Taps(kv=layer_ids))
        return KVInjection(frozenset(layer_ids), out.keys, out.values)

    def gradient(self, fn: Callable[[DenoiserOutput], torch.Tensor], x_t, t, c, taps=None, injection=None):
        """Gradient of a scalar function of the prediction w.r.t. ``x_t``."""
        if not self.differentiable:
            raise TypeError(f"{type(self).__name__} does not provide gradients")
        x = torch.as_tensor(x_t).detach().clone().requires_grad_(True)
        value = fn(self.predict(x, t, c, taps, injection))
        (g,) = torch.autograd.grad(value, x)
        return g

    def check_taps(self, ids: Iterable[int], what: str = "tap") -> None:
        for k in ids:
            if k not in self.tap_table:
                raise ValueError(f"unknown {what} id {k!r}; backend provides {sorted(self.tap_table)}")


def _seed_for(*parts) -> int:
    h = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little")


def default_tap_table(latent_shape: Sequence[int], channels=(32, 32, 16, 16), heads: int = 2) -> dict:
    """Four decoder blocks at strides 8, 4, 2, 1 of the latent grid."""
    _, H, W = latent_shape
    table = {}
    for k, (stride, ch) in enumerate(zip((8, 4, 2, 1), channels), start=1):
        if H % stride or W % stride:
            raise ValueError(f"latent {H}x{W} is not divisible by block {k} stride {stride}")
        table[k] = TapSpec(block_id=k, stride=stride, channels=ch, heads=heads, spatial=(H // stride, W // stride))
    return table


def tap_table_from_overrides(latent_shape, overrides: Sequence[Mapping]) -> dict:
    table = default_tap_table(latent_shape)
    _, H, W = latent_shape
    for row in overrides:
        k = int(row["id"])
        base = table.get(k)
        stride = int(row.get("stride", base.stride if base else 1))
        ch = int(row.get("channels", base.channels if base else 16))
        heads = int(row.get("heads", base.heads if base else 2))
        if H % stride or W % stride:
            raise ValueError(f"tap {k}: stride {stride} does not divide latent {H}x{W}")
        if ch % heads:
            raise ValueError(f"tap {k}: channels {ch} not divisible by heads {heads}")
        table[k] = TapSpec(block_id=k, stride=stride, channels=ch, heads=heads, spatial=(H // stride, W // stride))
    return table


class ToyDenoiser(Denoiser):
    """Seeded stand-in with the full backend surface.

    Noise prediction is linear in the latent, ``W_t x + b(c, t)`` with ``W_t``
    a 3x3 convolution. Block ``k`` average-pools the latent by its stride,
    projects every 4x4 neighbourhood to ``channels`` dims and adds a residual
    self-attention over those tokens; the result is the tapped feature map.
    Cross-attention queries come from the features and keys from a hashed
    prompt embedding. All computations run in float64 torch and are
    differentiable in the latent.
    """

    differentiable = True
    n_tokens = 8
    embed_dim = 16

    def __init__(self, seed: int = 0, latent_shape=(3, 16, 16), tap_table: Mapping[int, TapSpec] | None = None,
                 downscale: int = 1):
        self.seed = int(seed)
        self._latent_shape = tuple(int(v) for v in latent_shape)
        self._tap_table = dict(tap_table) if tap_table is not None else default_tap_table(self._latent_shape)
        self.downscale = int(downscale)
        self._embed_cache = {}
        C = self._latent_shape[0]
        rng = np.random.default_rng(_seed_for("toy", self.seed))

        def t64(a):
            return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float64))

        center = np.zeros((C, C, 3, 3))
        center[np.arange(C), np.arange(C), 1, 1] = 1.0
        self._k0 = t64(0.5 * center + 0.05 * rng.standard_normal((C, C, 3, 3)))
        self._k1 = t64(0.4 * center + 0.05 * rng.standard_normal((C, C, 3, 3)))
        self._bias_proj = t64(rng.standard_normal((self.embed_dim, C)) / np.sqrt(self.embed_dim))
        self._blocks = {}
        for k, spec in sorted(self._tap_table.items()):
            c = spec.channels
            self._blocks[k] = {
                "proj": t64(rng.standard_normal((c, C, 4, 4)) / np.sqrt(16 * C)),
                "wq": t64(rng.standard_normal((c, c)) * 1.5 / np.sqrt(c)),
                "wk": t64(rng.standard_normal((c, c)) * 1.5 / np.sqrt(c)),
                "wv": t64(rng.standard_normal((c, c)) / np.sqrt(c)),
                "wo": t64(rng.standard_normal((c, c)) / np.sqrt(c)),
                "wqc": t64(rng.standard_normal((c, c)) / np.sqrt(c)),
                "wkc": t64(rng.standard_normal((self.embed_dim, c)) / np.sqrt(self.embed_dim)),
            }

    @property
    def latent_shape(self) -> tuple:
        return self._latent_shape

    @property
    def tap_table(self) -> Mapping[int, TapSpec]:
        return dict(self._tap_table)

    # -- condition embedding ------------------------------------------------

    def _token_vec(self, token: str) -> np.ndarray:
        return np.random.default_rng(_seed_for("tok", self.seed, token)).standard_normal(self.embed_dim)

    def embed(self, c: Condition) -> torch.Tensor:
        """Token embeddings ``[n_tokens, embed_dim]`` hashed from the prompt."""
        cached = self._embed_cache.get(c.key)
        if cached is not None:
            return cached
        if c.is_null:
            tokens = ["<bos>", "<null>"]
        else:
            tokens = ["<bos>"] + c.prompt.lower().split()[: self.n_tokens - 1]
        tokens += ["<pad>"] * (self.n_tokens - len(tokens))
        emb = torch.from_numpy(np.stack([self._token_vec(tok) for tok in tokens]))
        self._embed_cache[c.key] = emb
        return emb

    def _conditions(self, c, B: int) -> list:
        if isinstance(c, Condition):
            return [c] * B
        c = list(c)
        if len(c) != B:
            raise ValueError(f"got {len(c)} conditions for batch of {B}")
        return c

    # -- forward --------------------------------------------------------------

    def _check_latent(self, x_t) -> torch.Tensor:
        x = torch.as_tensor(x_t)
        if x.dtype != torch.float64:
            x = x.to(torch.float64)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or tuple(x.shape[1:]) != self._latent_shape:
            raise ValueError(f"latent shape {tuple(x.shape)} does not match backend {self._latent_shape}")
        if not bool(torch.isfinite(x.detach()).all()):
            raise ValueError("latent contains non-finite values")
        return x

    def _eps_kernel(self, t: int) -> torch.Tensor:
        return self._k0 + (t / 1000.0) * self._k1

    def _bias(self, conds: list, t: int) -> torch.Tensor:
        vecs = torch.stack([self.embed(c).mean(0) @ self._bias_proj for c in conds])
        return (0.1 * (1.0 + t / 1000.0) * vecs)[:, :, None, None]

    def patch_projection(self, x_t, block_id: int) -> torch.Tensor:
        """Pre-attention 4x4 patch projection ``[B, c, h', w']`` of one block."""
        self.check_taps([block_id])
        x = self._check_latent(x_t)
        stride = self._tap_table[block_id].stride
        h = F.avg_pool2d(x, stride) if stride > 1 else x
        return F.conv2d(F.pad(h, (1, 2, 1, 2)), self._blocks[block_id]["proj"])

    def _heads(self, a: torch.Tensor, spec: TapSpec) -> torch.Tensor:
        B, n, _ = a.shape
        return a.reshape(B, n, spec.heads, spec.head_dim).transpose(1, 2)

    def _run_block(self, x, k, conds, want_out: bool, want_ca: bool, injection: KVInjection | None):
        spec, w = self._tap_table[k], self._blocks[k]
        u = self.patch_projection(x, k)
        B, c, h, wd = u.shape
        tok = u.flatten(2).transpose(1, 2)  # [B, n, c]
        keys = self._heads(tok @ w["wk"], spec)
        values = self._heads(tok @ w["wv"], spec)
        res = {"keys": keys, "values": values}
        if not (want_out or want_ca):
            return res
        k_used, v_used = keys, values
        if injection is not None and k in injection.layer_ids:
            k_used, v_used = injection.source_keys[k], injection.source_values[k]
            for name, src, own in (("keys", k_used, keys), ("values", v_used, values)):
                if tuple(src.shape) != tuple(own.shape):
                    raise ValueError(
                        f"injected {name} for layer {k} have shape {tuple(src.shape)}, "
                        f"expected {tuple(own.shape)}"
                    )
            k_used, v_used = k_used.to(keys.dtype), v_used.to(values.dtype)
        q = self._heads(tok @ w["wq"], spec)
        attn = torch.softmax(q @ k_used.transpose(-1, -2) / np.sqrt(spec.head_dim), dim=-1)
        mixed = (attn @ v_used).transpose(1, 2).reshape(B, h * wd, c) @ w["wo"]
        feat_tok = tok + mixed
        res["self_attn"] = attn
        res["features"] = feat_tok.transpose(1, 2).reshape(B, c, h, wd)
        if want_ca:
            qc = self._heads(feat_tok @ w["wqc"], spec)
            emb = torch.stack([self.embed(cond) for cond in conds])  # [B, tokens, e]
            kc = self._heads(emb @ w["wkc"], spec)
            res["cross_attn"] = torch.softmax(qc @ kc.transpose(-1, -2) / np.sqrt(spec.head_dim), dim=-1)
        return res

    def predict(self, x_t, t: int, c, taps: Taps | None = None, injection: KVInjection | None = None) -> DenoiserOutput:
        x = self._check_latent(x_t)
        t = int(t)
        B = x.shape[0]
        conds = self._conditions(c, B)
        taps = taps or Taps()
        self.check_taps(taps.ids())
        if injection is not None:
            self.check_taps(injection.layer_ids, "injection layer")

        lin = F.conv2d(x, self._eps_kernel(t), padding=1)
        out = DenoiserOutput(
            eps_cond=lin + self._bias(conds, t),
            eps_uncond=lin + self._bias([Condition.null()] * B, t),
        )
        for k in sorted(taps.ids()):
            want_out = k in taps.features or k in taps.self_attn
            want_ca = k in taps.cross_attn
            res = self._run_block(x, k, conds, want_out, want_ca, injection)
            if k in taps.features:
                out.features[k] = FeatureMap(res["features"], block_id=k, timestep=t)
            if k in taps.self_attn:
                out.self_attn[k] = res["self_attn"]
            if want_ca:
                out.cross_attn[k] = res["cross_attn"]
            if k in taps.kv:
                out.keys[k] = res["keys"]
                out.values[k] = res["values"]
        return out

    # -- image <-> latent ---------------------------------------------------------

    def encode(self, images: np.ndarray) -> torch.Tensor:
        img = torch.from_numpy(np.asarray(images, dtype=np.float64))
        if img.ndim == 3:
            img = img[None]
        lat = img.permute(0, 3, 1, 2)
        if self.downscale > 1:
            lat = F.avg_pool2d(lat, self.downscale)
        return lat.contiguous()

    def decode(self, latents: torch.Tensor) -> np.ndarray:
        lat = torch.as_tensor(latents).detach().to(torch.float64)
        if self.downscale > 1:
            lat = F.interpolate(lat, scale_factor=self.downscale, mode="nearest")
        return lat.permute(0, 2, 3, 1).cpu().numpy()


def toy_backend(seed: int = 0, latent_shape=(3, 16, 16), tap_table=None, downscale: int = 1) -> ToyDenoiser:
    return ToyDenoiser(seed=seed, latent_shape=latent_shape, tap_table=tap_table, downscale=downscale)


_ADAPTERS: dict = {}


def register_adapter(name: str, factory: Callable[..., Denoiser]) -> None:
    _ADAPTERS[name] = factory


def get_adapter(name: str) -> Callable[..., Denoiser]:
    if name in _ADAPTERS:
        return _ADAPTERS[name]
    for ep in metadata.entry_points(group=ADAPTER_ENTRY_POINT_GROUP):
        if ep.name == name:
            factory = ep.load()
            _ADAPTERS[name] = factory
            return factory
    raise LookupError(
        f"no denoiser adapter registered as {name!r} (group {ADAPTER_ENTRY_POINT_GROUP!r})"
    )
