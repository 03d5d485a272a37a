"""Small classification transformer used by the synthetic tasks.

Token features -> linear embedding -> ``n_blocks`` x (attention + softplus MLP,
both residual) -> mean pool -> linear classifier. Every attention layer uses
the same positional scheme; HARoPE layers own their adaptation parameters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from harope import ConfigurationError
from harope import autodiff as ad
from harope.adapt import SIGMA_RAW_ONE, AdaptBank, AdaptVariant
from harope.attention import (PEScheme, SchemeTag, adapt_matrices_tape, make_scheme, mha_tape,
                              sigma_penalty_tape)
from harope.numerics import skew_size

ADAPT_FIELDS = ("skew_u", "skew_v", "sigma_raw", "dense")


@dataclass(frozen=True)
class ModelConfig:
    in_dim: int
    n_classes: int
    grid: tuple[int, ...]
    scheme: str = "HARoPE"
    variant: str = "SVD"
    shared: bool = False
    n_blocks: int = 2
    n_heads: int = 4
    head_dim: int = 16
    mlp_dim: int = 64
    base: float = 10000.0

    @property
    def model_dim(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def tag(self) -> SchemeTag:
        return SchemeTag.parse(self.scheme)

    @property
    def adapt_variant(self) -> AdaptVariant:
        return AdaptVariant.parse(self.variant)

    def validate(self) -> None:
        if self.tag.rotary and self.tag is not SchemeTag.ROPE_1D and self.head_dim % (2 * len(self.grid)):
            raise ConfigurationError(
                f"model.head_dim={self.head_dim} must be divisible by 2*axes={2 * len(self.grid)}")
        if self.tag is SchemeTag.ROPE_1D and self.head_dim % 2:
            raise ConfigurationError(f"model.head_dim={self.head_dim} must be even")
        if self.tag is SchemeTag.APE_SINUSOIDAL and self.model_dim % (2 * len(self.grid)):
            raise ConfigurationError("model_dim must be divisible by 2*axes for sinusoidal APE")
        for name in ("n_blocks", "n_heads", "head_dim", "mlp_dim", "in_dim", "n_classes"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"model.{name} must be positive")

    def scheme_obj(self) -> PEScheme:
        return make_scheme(self.tag, self.head_dim, self.model_dim, self.n_heads, self.grid,
                           variant=self.adapt_variant, shared=self.shared, base=self.base)


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Deterministic parameters.

    Weights shared by every scheme are drawn first from one stream, so models
    that differ only in their positional scheme start from identical weights.
    """
    cfg.validate()
    rng = np.random.default_rng([seed, 0])
    D, M = cfg.model_dim, cfg.mlp_dim

    def dense(n_in, n_out):
        return rng.standard_normal((n_in, n_out)) / math.sqrt(n_in)

    p = {"embed": dense(cfg.in_dim, D)}
    for b in range(cfg.n_blocks):
        for w in ("w_q", "w_k", "w_v", "w_o"):
            p[f"b{b}.{w}"] = dense(D, D)
        p[f"b{b}.mlp1"] = dense(D, M)
        p[f"b{b}.mlp1_b"] = np.zeros(M)
        p[f"b{b}.mlp2"] = dense(M, D) * 0.5
        p[f"b{b}.mlp2_b"] = np.zeros(D)
    p["cls"] = dense(D, cfg.n_classes)
    p["cls_b"] = np.zeros(cfg.n_classes)

    tag = cfg.tag
    if tag is SchemeTag.APE_LEARNED:
        p["ape"] = 0.02 * np.random.default_rng([seed, 1]).standard_normal((int(np.prod(cfg.grid)), D))
    if tag is SchemeTag.HAROPE:
        hb = 1 if cfg.shared else cfg.n_heads
        d, m = cfg.head_dim, skew_size(cfg.head_dim)
        v = cfg.adapt_variant
        for b in range(cfg.n_blocks):
            if v is AdaptVariant.SVD:
                p[f"b{b}.skew_u"] = np.zeros((hb, m))
                p[f"b{b}.skew_v"] = np.zeros((hb, m))
                p[f"b{b}.sigma_raw"] = np.full((hb, d), SIGMA_RAW_ONE)
            elif v is AdaptVariant.ORTHOGONAL:
                p[f"b{b}.skew_v"] = np.zeros((hb, m))
            elif v is AdaptVariant.NORMAL:
                p[f"b{b}.dense"] = np.tile(np.eye(d), (hb, 1, 1))
    return p


def forward(tape: ad.Tape, leaves: dict, cfg: ModelConfig, features: np.ndarray, positions: np.ndarray,
            scheme: PEScheme | None = None) -> tuple[ad.Var, ad.Var | None]:
    """Logits (B, n_classes) and the summed sigma penalty (None unless SVD HARoPE)."""
    scheme = scheme or cfg.scheme_obj()
    h = tape.const(features) @ leaves["embed"]
    penalty = None
    for b in range(cfg.n_blocks):
        w = {k: leaves[f"b{b}.{k}"] for k in ("w_q", "w_k", "w_v", "w_o")}
        adapt = None
        if scheme.tag is SchemeTag.HAROPE and cfg.adapt_variant is not AdaptVariant.IDENTITY:
            ap = {f: leaves[f"b{b}.{f}"] for f in ADAPT_FIELDS if f"b{b}.{f}" in leaves}
            adapt = adapt_matrices_tape(cfg.adapt_variant, ap, cfg.head_dim)
            if "sigma_raw" in ap:
                pen = sigma_penalty_tape(ap["sigma_raw"])
                penalty = pen if penalty is None else penalty + pen
        elif scheme.tag is SchemeTag.HAROPE:
            adapt = tape.const(np.eye(cfg.head_dim)[None])
        h = h + mha_tape(h, w, cfg.n_heads, scheme, positions, adapt, leaves.get("ape"))
        z = ad.softplus(h @ leaves[f"b{b}.mlp1"] + leaves[f"b{b}.mlp1_b"])
        h = h + (z @ leaves[f"b{b}.mlp2"] + leaves[f"b{b}.mlp2_b"])
    pooled = ad.mean(h, axis=1)
    return pooled @ leaves["cls"] + leaves["cls_b"], penalty


def loss_fn(tape: ad.Tape, leaves: dict, cfg: ModelConfig, features, positions, labels,
            sigma_weight: float = 0.0, scheme: PEScheme | None = None):
    """(total loss, cross-entropy, penalty value, logits) on the tape."""
    logits, penalty = forward(tape, leaves, cfg, features, positions, scheme)
    ce = ad.cross_entropy(logits, labels)
    total = ce if penalty is None or sigma_weight == 0.0 else ce + ad.scale(penalty, sigma_weight)
    pen_val = 0.0 if penalty is None else float(penalty.value)
    return total, ce, pen_val, logits


def predict_logits(params: dict, cfg: ModelConfig, features, positions, chunk: int = 512) -> np.ndarray:
    scheme = cfg.scheme_obj()
    out = []
    for i in range(0, features.shape[0], chunk):
        t = ad.Tape()
        leaves = {k: t.leaf(v, name=k) for k, v in params.items()}
        logits, _ = forward(t, leaves, cfg, features[i:i + chunk], positions, scheme)
        out.append(logits.value)
    return np.concatenate(out, axis=0)


def adapt_banks(params: dict, cfg: ModelConfig) -> list[AdaptBank]:
    """Per-block adaptation banks from a HARoPE model's parameters."""
    if cfg.tag is not SchemeTag.HAROPE:
        raise ConfigurationError(f"{cfg.scheme} models carry no adaptation matrices")
    banks = []
    for b in range(cfg.n_blocks):
        arrays = {f: params[f"b{b}.{f}"] for f in ADAPT_FIELDS if f"b{b}.{f}" in params}
        if cfg.adapt_variant is AdaptVariant.IDENTITY:
            banks.append(AdaptBank.identity(cfg.n_heads, cfg.head_dim, AdaptVariant.IDENTITY, cfg.shared))
        else:
            banks.append(AdaptBank.from_stacked(cfg.n_heads, cfg.shared, cfg.head_dim, cfg.adapt_variant, arrays))
    return banks


class Adam:
    """Adam with bias correction over a dict of arrays."""

    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            if self.lr != 0.0:
                params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
