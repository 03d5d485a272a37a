"""Multi-head scaled dot-product attention with pluggable positional schemes.

Two routes compute the same layer:

* :func:`mha_forward` / :func:`attention_scores` work on one token sequence in
  plain numpy, head by head, through :mod:`harope.rotary` and
  :mod:`harope.adapt`. They are the readable reference.
* :func:`mha_tape` records a batched version on an autodiff tape for training.

Weights act on row vectors: ``q = x @ W_q``. The positional map touches
queries and keys only; for HARoPE the adaptation comes first, then the
rotation. Attention is bidirectional (no mask) and scores are scaled by
1/sqrt(head_dim) after the positional map.
"""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field

import numpy as np

from harope import ConfigurationError, ShapeError
from harope import autodiff as ad
from harope import numerics as nx
from harope.adapt import AdaptBank, AdaptVariant
from harope.rotary import GridPosition, RotaryConfig, angles_nd, make_rotary_config, rotate_pairs


class SchemeTag(str, enum.Enum):
    APE_LEARNED = "APE_learned"
    APE_SINUSOIDAL = "APE_sinusoidal"
    ROPE_1D = "RoPE_1D"
    ROPE_ND = "RoPE_ND_axial"
    HAROPE = "HARoPE"

    @classmethod
    def parse(cls, tag: str) -> "SchemeTag":
        if isinstance(tag, cls):
            return tag
        for t in cls:
            if t.value.lower() == str(tag).lower():
                return t
        raise ConfigurationError(f"unknown positional scheme {tag!r}")

    @property
    def rotary(self) -> bool:
        return self in (SchemeTag.ROPE_1D, SchemeTag.ROPE_ND, SchemeTag.HAROPE)

    @property
    def absolute(self) -> bool:
        return self in (SchemeTag.APE_LEARNED, SchemeTag.APE_SINUSOIDAL)


@dataclass
class PEScheme:
    """A positional scheme plus whatever state it needs.

    ``grid`` is the integer grid shape used to index the learned APE table and
    to flatten multi-axis positions to a raster index for ``RoPE_1D``.
    """

    tag: SchemeTag
    rotary: RotaryConfig | None = None
    bank: AdaptBank | None = None
    grid: tuple[int, ...] = ()
    ape_table: np.ndarray | None = None

    def validate(self, head_dim: int, model_dim: int) -> None:
        if self.tag.rotary:
            if self.rotary is None or self.rotary.head_dim != head_dim:
                raise ConfigurationError(f"{self.tag.value} needs a rotary config with head_dim {head_dim}")
            if self.tag is SchemeTag.ROPE_1D and self.rotary.axes != 1:
                raise ConfigurationError("RoPE_1D uses a single-axis rotary config")
        if self.tag is SchemeTag.HAROPE:
            if self.bank is None or self.bank.dim != head_dim:
                raise ConfigurationError("HARoPE needs an adaptation bank with dim == head_dim")
        if self.tag is SchemeTag.APE_LEARNED:
            if self.ape_table is None or self.ape_table.shape != (int(np.prod(self.grid)), model_dim):
                raise ConfigurationError("APE_learned needs a table of shape (prod(grid), model_dim)")


def make_scheme(tag, head_dim: int, model_dim: int, n_heads: int, grid=(), *, axes: int | None = None,
                variant=AdaptVariant.SVD, shared: bool = False, base: float = 10000.0,
                rng: np.random.Generator | None = None) -> PEScheme:
    tag = SchemeTag.parse(tag) if isinstance(tag, str) else tag
    grid = tuple(int(g) for g in grid)
    if axes is None:
        axes = max(len(grid), 1)
    rot = bank = table = None
    if tag is SchemeTag.ROPE_1D:
        rot = make_rotary_config(head_dim, 1, base)
    elif tag in (SchemeTag.ROPE_ND, SchemeTag.HAROPE):
        rot = make_rotary_config(head_dim, axes, base)
    if tag is SchemeTag.HAROPE:
        variant = AdaptVariant.parse(variant) if isinstance(variant, str) else variant
        bank = AdaptBank.identity(n_heads, head_dim, variant, shared)
    if tag is SchemeTag.APE_LEARNED:
        rng = rng or np.random.default_rng(0)
        table = 0.02 * rng.standard_normal((int(np.prod(grid)), model_dim))
    s = PEScheme(tag, rot, bank, grid, table)
    s.validate(head_dim, model_dim)
    return s


def raster_index(coords, grid) -> np.ndarray:
    """Row-major flat index of integer grid coordinates (..., p)."""
    coords = np.asarray(coords)
    c = np.rint(coords).astype(np.int64)
    if coords.shape[-1] != len(grid) or not np.array_equal(c, coords):
        raise ShapeError("APE and RoPE_1D need integer coordinates matching the grid rank")
    if np.any(c < 0) or np.any(c >= np.asarray(grid)):
        raise IndexError(f"coordinates outside grid {grid}")
    return np.ravel_multi_index(tuple(np.moveaxis(c, -1, 0)), grid)


def sinusoidal_table(coords, model_dim: int, base: float = 10000.0) -> np.ndarray:
    """Fixed sin/cos embedding; the feature width is split evenly across axes."""
    coords = np.asarray(coords, dtype=np.float64)
    p = coords.shape[-1]
    if model_dim % (2 * p):
        raise ShapeError(f"model_dim {model_dim} not divisible by 2*axes")
    w = model_dim // p
    freqs = base ** (-np.arange(0, w, 2) / w)
    parts = []
    for a in range(p):
        ang = coords[..., a:a + 1] * freqs
        blk = np.empty(coords.shape[:-1] + (w,))
        blk[..., 0::2] = np.sin(ang)
        blk[..., 1::2] = np.cos(ang)
        parts.append(blk)
    return np.concatenate(parts, axis=-1)


@dataclass
class TokenBatch:
    features: np.ndarray  # (n_tokens, model_dim)
    positions: np.ndarray  # (n_tokens, axes)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim == 1:
            self.positions = self.positions[:, None]
        if self.features.ndim != 2 or self.features.shape[0] != self.positions.shape[0]:
            raise ShapeError(f"features {self.features.shape} and positions {self.positions.shape} disagree")

    @property
    def n_tokens(self) -> int:
        return self.features.shape[0]

    @property
    def model_dim(self) -> int:
        return self.features.shape[1]

    def grid_positions(self) -> list[GridPosition]:
        return [GridPosition(tuple(p)) for p in self.positions]

    def shifted(self, offset) -> "TokenBatch":
        return TokenBatch(self.features, self.positions + np.asarray(offset, dtype=np.float64))


@dataclass
class MHAConfig:
    n_heads: int
    head_dim: int
    scheme: PEScheme
    w_q: np.ndarray = field(repr=False)
    w_k: np.ndarray = field(repr=False)
    w_v: np.ndarray = field(repr=False)
    w_o: np.ndarray = field(repr=False)

    @property
    def model_dim(self) -> int:
        return self.n_heads * self.head_dim

    def validate(self) -> None:
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if np.shape(getattr(self, name)) != (self.model_dim, self.model_dim):
                raise ShapeError(f"{name} must be {self.model_dim}x{self.model_dim}")
        self.scheme.validate(self.head_dim, self.model_dim)

    @classmethod
    def random(cls, n_heads: int, head_dim: int, scheme: PEScheme, rng: np.random.Generator) -> "MHAConfig":
        D = n_heads * head_dim
        ws = [rng.standard_normal((D, D)) / math.sqrt(D) for _ in range(4)]
        return cls(n_heads, head_dim, scheme, *ws)


def _positional_input(batch: TokenBatch, scheme: PEScheme) -> np.ndarray:
    x = batch.features
    if scheme.tag is SchemeTag.APE_LEARNED:
        x = x + scheme.ape_table[raster_index(batch.positions, scheme.grid)]
    elif scheme.tag is SchemeTag.APE_SINUSOIDAL:
        x = x + sinusoidal_table(batch.positions, batch.model_dim)
    return x


def rotary_coords(positions: np.ndarray, scheme: PEScheme) -> np.ndarray:
    """Coordinates fed to the rotary map: raster index for RoPE_1D on a multi-axis grid."""
    if scheme.tag is SchemeTag.ROPE_1D and positions.shape[-1] != 1:
        return raster_index(positions, scheme.grid)[..., None].astype(np.float64)
    return positions


def _head_qk(batch: TokenBatch, cfg: MHAConfig, h: int, mats: list | None = None):
    x = _positional_input(batch, cfg.scheme)
    sl = slice(h * cfg.head_dim, (h + 1) * cfg.head_dim)
    q, k, v = x @ cfg.w_q[:, sl], x @ cfg.w_k[:, sl], x @ cfg.w_v[:, sl]
    scheme = cfg.scheme
    if scheme.tag is SchemeTag.HAROPE:
        a = (mats or scheme.bank.matrices())[h]
        q, k = q @ a.T, k @ a.T
    if scheme.tag.rotary:
        ang = angles_nd(rotary_coords(batch.positions, scheme), scheme.rotary)
        c, s = np.cos(ang), np.sin(ang)
        q, k = rotate_pairs(q, c, s), rotate_pairs(k, c, s)
    return q, k, v


def attention_scores(batch: TokenBatch, cfg: MHAConfig, head: int) -> np.ndarray:
    """Pre-softmax (n x n) score matrix of one head."""
    if not 0 <= head < cfg.n_heads:
        raise IndexError(f"head {head} out of range for {cfg.n_heads} heads")
    cfg.validate()
    if batch.model_dim != cfg.model_dim:
        raise ShapeError(f"batch width {batch.model_dim} != model_dim {cfg.model_dim}")
    q, k, _ = _head_qk(batch, cfg, head)
    return q @ k.T / math.sqrt(cfg.head_dim)


def softmax_rows(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def mha_forward(batch: TokenBatch, cfg: MHAConfig) -> TokenBatch:
    cfg.validate()
    if batch.model_dim != cfg.model_dim:
        raise ShapeError(f"batch width {batch.model_dim} != model_dim {cfg.model_dim}")
    outs = []
    mats = cfg.scheme.bank.matrices() if cfg.scheme.tag is SchemeTag.HAROPE else None
    for h in range(cfg.n_heads):
        q, k, v = _head_qk(batch, cfg, h, mats)
        outs.append(softmax_rows(q @ k.T / math.sqrt(cfg.head_dim)) @ v)
    return TokenBatch(np.concatenate(outs, axis=1) @ cfg.w_o, batch.positions)


# ---------------------------------------------------------------- tape route

def adapt_matrices_tape(variant: AdaptVariant, params: dict, dim: int) -> ad.Var:
    """Stacked (heads, dim, dim) adaptation matrices built on the tape."""
    if variant is AdaptVariant.NORMAL:
        return params["dense"]
    if variant is AdaptVariant.ORTHOGONAL:
        return ad.expm(ad.skew(params["skew_v"], dim))
    if variant is AdaptVariant.SVD:
        hb = params["skew_u"].shape[0]
        uv = ad.expm(ad.skew(ad.concat([params["skew_u"], params["skew_v"]]), dim))
        u, v = ad.take(uv, np.arange(hb)), ad.take(uv, np.arange(hb, 2 * hb))
        sig = ad.softplus(params["sigma_raw"])
        sig = ad.reshape(sig, sig.shape[:-1] + (1, dim))
        return ad.matmul(ad.mul(u, sig), ad.transpose(v))
    raise ConfigurationError(f"no tape adaptation for variant {variant.value}")


def sigma_penalty_tape(sigma_raw: ad.Var) -> ad.Var:
    t = ad.softplus(sigma_raw) - 1.0
    return ad.sum(ad.mul(t, t))


def rotary_tables(positions: np.ndarray, scheme: PEScheme) -> tuple[np.ndarray, np.ndarray]:
    ang = angles_nd(rotary_coords(positions, scheme), scheme.rotary)
    return np.cos(ang), np.sin(ang)


def mha_tape(x: ad.Var, w: dict, n_heads: int, scheme: PEScheme, positions: np.ndarray,
             adapt: ad.Var | None = None, ape: ad.Var | None = None) -> ad.Var:
    """Batched attention layer on the tape.

    ``x`` is (B, n, D); ``positions`` is (n, p) shared by the batch or
    (B, n, p); ``w`` maps w_q/w_k/w_v/w_o to Vars; ``adapt`` is the stacked
    (heads or 1, d, d) adaptation for HARoPE; ``ape`` is the learned table.
    """
    B, n, D = x.shape
    d = D // n_heads
    if scheme.tag is SchemeTag.APE_LEARNED:
        x = x + ad.take(ape, raster_index(positions, scheme.grid))
    elif scheme.tag is SchemeTag.APE_SINUSOIDAL:
        x = x + sinusoidal_table(positions, D)

    def heads(t):
        return ad.transpose(ad.reshape(t, (B, n, n_heads, d)), (0, 2, 1, 3))

    q, k, v = heads(x @ w["w_q"]), heads(x @ w["w_k"]), heads(x @ w["w_v"])
    if scheme.tag is SchemeTag.HAROPE:
        at = ad.transpose(adapt)
        q, k = q @ at, k @ at
    if scheme.tag.rotary:
        c, s = rotary_tables(positions, scheme)
        if c.ndim == 3:  # per-sample positions: insert the head axis
            c, s = c[:, None], s[:, None]
        q, k = ad.rotary(q, c, s), ad.rotary(k, c, s)
    p = ad.softmax(ad.scale(q @ ad.transpose(k), 1.0 / math.sqrt(d)))
    o = ad.reshape(ad.transpose(p @ v, (0, 2, 1, 3)), (B, n, D))
    return o @ w["w_o"]


def score_matrix_csv(scores: np.ndarray) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow([f"k{j}" for j in range(scores.shape[1])])
    for row in scores:
        wr.writerow([nx.format_float(v) for v in row])
    return buf.getvalue()
