"""Head-wise adaptation matrices applied to queries and keys before rotation.

A head's matrix is built from one of four parameterizations:

* ``IDENTITY``: no parameters, A = I.
* ``NORMAL``: an unconstrained dense matrix.
* ``ORTHOGONAL``: A = expm(S_v) for a skew-symmetric generator S_v.
* ``SVD``: A = expm(S_u) diag(softplus(sigma_raw)) expm(S_v)^T.

The same A multiplies the query and the key, so the rotated score still
depends on positions only through their offset.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from harope import ConfigurationError, DomainError, ShapeError
from harope import numerics as nx
from harope.rotary import GridPosition, RotaryConfig, apply_rotary_nd, rotation_matrix_nd

# softplus(SIGMA_RAW_ONE) == 1
SIGMA_RAW_ONE = math.log(math.e - 1.0)
DEFAULT_SIGMA_WEIGHT = 1e-3


class AdaptVariant(str, enum.Enum):
    IDENTITY = "Identity"
    NORMAL = "Normal"
    ORTHOGONAL = "Orthogonal"
    SVD = "SVD"

    @classmethod
    def parse(cls, tag: str) -> "AdaptVariant":
        if isinstance(tag, cls):
            return tag
        for v in cls:
            if v.value.lower() == str(tag).lower():
                return v
        raise ConfigurationError(f"unknown adaptation variant {tag!r}")


_FIELDS = {
    AdaptVariant.IDENTITY: set(),
    AdaptVariant.NORMAL: {"dense"},
    AdaptVariant.ORTHOGONAL: {"skew_v"},
    AdaptVariant.SVD: {"skew_u", "skew_v", "sigma_raw"},
}


@dataclass
class HeadAdaptParams:
    dim: int
    variant: AdaptVariant
    skew_u: np.ndarray | None = None
    skew_v: np.ndarray | None = None
    sigma_raw: np.ndarray | None = None
    dense: np.ndarray | None = None

    def present_fields(self) -> set[str]:
        return {f for f in ("skew_u", "skew_v", "sigma_raw", "dense") if getattr(self, f) is not None}

    def validate(self) -> None:
        want = _FIELDS[self.variant]
        have = self.present_fields()
        if have != want:
            raise ConfigurationError(
                f"{self.variant.value} params need fields {sorted(want)}, got {sorted(have)}"
            )
        m = nx.skew_size(self.dim)
        shapes = {"skew_u": (m,), "skew_v": (m,), "sigma_raw": (self.dim,), "dense": (self.dim, self.dim)}
        for f in have:
            if np.shape(getattr(self, f)) != shapes[f]:
                raise ConfigurationError(f"{f} has shape {np.shape(getattr(self, f))}, expected {shapes[f]}")

    def copy(self) -> "HeadAdaptParams":
        return replace(self, **{f: np.array(getattr(self, f)) for f in self.present_fields()})

    def vector(self) -> np.ndarray:
        """All parameters flattened in field order (skew_u, skew_v, sigma_raw, dense)."""
        parts = [np.ravel(getattr(self, f)) for f in ("skew_u", "skew_v", "sigma_raw", "dense")
                 if getattr(self, f) is not None]
        return np.concatenate(parts) if parts else np.zeros(0)

    def with_vector(self, vec) -> "HeadAdaptParams":
        vec = np.asarray(vec, dtype=np.float64)
        out, i = {}, 0
        for f in ("skew_u", "skew_v", "sigma_raw", "dense"):
            cur = getattr(self, f)
            if cur is not None:
                n = np.size(cur)
                out[f] = vec[i:i + n].reshape(np.shape(cur)).copy()
                i += n
        if i != vec.size:
            raise ShapeError(f"expected {i} parameters, got {vec.size}")
        return replace(self, **out)


def init_identity(dim: int, variant: AdaptVariant | str) -> HeadAdaptParams:
    if dim < 2:
        raise DomainError(f"adaptation dim must be >= 2, got {dim}")
    variant = AdaptVariant.parse(variant) if isinstance(variant, str) else variant
    m = nx.skew_size(dim)
    if variant is AdaptVariant.IDENTITY:
        return HeadAdaptParams(dim, variant)
    if variant is AdaptVariant.NORMAL:
        return HeadAdaptParams(dim, variant, dense=np.eye(dim))
    if variant is AdaptVariant.ORTHOGONAL:
        return HeadAdaptParams(dim, variant, skew_v=np.zeros(m))
    return HeadAdaptParams(dim, variant, skew_u=np.zeros(m), skew_v=np.zeros(m),
                           sigma_raw=np.full(dim, SIGMA_RAW_ONE))


def svd_factors(p: HeadAdaptParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(U, sigma, V) of an SVD-parameterized head."""
    if p.variant is not AdaptVariant.SVD:
        raise ConfigurationError(f"svd_factors needs SVD params, got {p.variant.value}")
    p.validate()
    u = nx.expm(nx.skew_to_matrix(p.skew_u, p.dim))
    v = nx.expm(nx.skew_to_matrix(p.skew_v, p.dim))
    return u, nx.softplus(p.sigma_raw), v


def build_adapt_matrix(p: HeadAdaptParams) -> np.ndarray:
    p.validate()
    if p.variant is AdaptVariant.IDENTITY:
        return np.eye(p.dim)
    if p.variant is AdaptVariant.NORMAL:
        return np.array(p.dense, dtype=np.float64)
    if p.variant is AdaptVariant.ORTHOGONAL:
        return nx.expm(nx.skew_to_matrix(p.skew_v, p.dim))
    u, sigma, v = svd_factors(p)
    return (u * sigma) @ v.T


def sigma_regularizer(p: HeadAdaptParams) -> float:
    """sum_i (softplus(sigma_raw_i) - 1)^2."""
    if p.variant is not AdaptVariant.SVD:
        raise ConfigurationError(f"sigma_regularizer applies to SVD params, got {p.variant.value}")
    return float(np.sum((nx.softplus(p.sigma_raw) - 1.0) ** 2))


def _check_qk(q, k, p: HeadAdaptParams, cfg: RotaryConfig):
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if not (q.shape == k.shape == (cfg.head_dim,)) or p.dim != cfg.head_dim:
        raise ShapeError(
            f"q {q.shape}, k {k.shape}, adaptation dim {p.dim} and head_dim {cfg.head_dim} disagree"
        )
    return q, k


def apply_harope(q, k, pos_q: GridPosition, pos_k: GridPosition, p: HeadAdaptParams,
                 cfg: RotaryConfig, a: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return (R(pos_q) A q, R(pos_k) A k). Pass a prebuilt ``a`` to skip rebuilding."""
    q, k = _check_qk(q, k, p, cfg)
    if a is None:
        a = build_adapt_matrix(p)
    return apply_rotary_nd(a @ q, pos_q, cfg), apply_rotary_nd(a @ k, pos_k, cfg)


def adapted_score(q, k, delta: GridPosition, p: HeadAdaptParams, cfg: RotaryConfig,
                  a: np.ndarray | None = None) -> float:
    """q^T A^T R(delta) A k, with delta = pos_k - pos_q."""
    q, k = _check_qk(q, k, p, cfg)
    if a is None:
        a = build_adapt_matrix(p)
    return float(q @ a.T @ rotation_matrix_nd(delta, cfg) @ a @ k)


@dataclass
class AdaptBank:
    """Adaptation parameters for all heads of one attention layer."""

    heads: int
    shared: bool
    params: list[HeadAdaptParams] = field(default_factory=list)

    def __post_init__(self):
        want = 1 if self.shared else self.heads
        if len(self.params) != want:
            raise ConfigurationError(
                f"bank with heads={self.heads}, shared={self.shared} needs {want} params, got {len(self.params)}"
            )

    @classmethod
    def identity(cls, heads: int, dim: int, variant, shared: bool = False) -> "AdaptBank":
        n = 1 if shared else heads
        return cls(heads, shared, [init_identity(dim, variant) for _ in range(n)])

    @property
    def variant(self) -> AdaptVariant:
        return self.params[0].variant

    @property
    def dim(self) -> int:
        return self.params[0].dim

    def head_params(self, h: int) -> HeadAdaptParams:
        if not 0 <= h < self.heads:
            raise IndexError(f"head {h} out of range for {self.heads} heads")
        return self.params[0 if self.shared else h]

    def matrices(self) -> list[np.ndarray]:
        """Built A for each head (length ``heads`` even when shared)."""
        built = [build_adapt_matrix(p) for p in self.params]
        return [built[0 if self.shared else h] for h in range(self.heads)]

    def regularizer(self) -> float:
        if self.variant is not AdaptVariant.SVD:
            return 0.0
        return sum(sigma_regularizer(p) for p in self.params)

    # stacked arrays, one leading row per stored head
    def stacked(self) -> dict[str, np.ndarray]:
        return {f: np.stack([getattr(p, f) for p in self.params]) for f in self.params[0].present_fields()}

    @classmethod
    def from_stacked(cls, heads: int, shared: bool, dim: int, variant: AdaptVariant,
                     arrays: dict[str, np.ndarray]) -> "AdaptBank":
        n = 1 if shared else heads
        params = []
        for i in range(n):
            p = HeadAdaptParams(dim, variant, **{f: np.array(a[i], dtype=np.float64) for f, a in arrays.items()})
            p.validate()
            params.append(p)
        return cls(heads, shared, params)


# ---------------------------------------------------------------- checkpoints

class CheckpointFormatError(ValueError):
    """A checkpoint document could not be parsed; carries the byte offset."""

    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte {offset})")
        self.offset = offset


CHECKPOINT_MAGIC = "harope-checkpoint 1"


def _fmt(values) -> str:
    return " ".join(nx.format_float(v) for v in np.ravel(values))


def dump_checkpoint(banks: list[AdaptBank]) -> str:
    """Text document: a header line, then one ``bank`` line per layer and one record per stored head.

    Each head record is a ``head`` line followed by one line per parameter
    field (``dense`` spans ``dim`` lines, one per row). Floats use 17
    significant digits so loading reproduces the values bit for bit.
    """
    lines = [CHECKPOINT_MAGIC]
    for b, bank in enumerate(banks):
        lines.append(f"bank {b} heads={bank.heads} shared={'true' if bank.shared else 'false'}")
        for h, p in enumerate(bank.params):
            p.validate()
            lines.append(f"head {h} variant={p.variant.value} dim={p.dim}")
            for f in ("skew_u", "skew_v", "sigma_raw"):
                if getattr(p, f) is not None:
                    lines.append(f"{f} {_fmt(getattr(p, f))}".rstrip())
            if p.dense is not None:
                for row in p.dense:
                    lines.append(f"dense {_fmt(row)}")
    return "\n".join(lines) + "\n"


def _kv(tokens, offset, keys):
    out = {}
    for t in tokens:
        k, sep, v = t.partition("=")
        if not sep or k not in keys:
            raise CheckpointFormatError(f"unexpected token {t!r}", offset)
        out[k] = v
    if set(out) != set(keys):
        raise CheckpointFormatError(f"expected keys {sorted(keys)}", offset)
    return out


def _floats(tokens, offset, n):
    try:
        vals = np.array([float(t) for t in tokens], dtype=np.float64)
    except ValueError as e:
        raise CheckpointFormatError(f"bad number: {e}", offset) from None
    if vals.size != n:
        raise CheckpointFormatError(f"expected {n} values, got {vals.size}", offset)
    if not np.all(np.isfinite(vals)):
        raise CheckpointFormatError("non-finite value", offset)
    return vals


def parse_checkpoint(text: str | bytes) -> list[AdaptBank]:
    data = text.encode() if isinstance(text, str) else bytes(text)
    raw_lines, offsets, pos = [], [], 0
    for line in data.split(b"\n"):
        raw_lines.append(line)
        offsets.append(pos)
        pos += len(line) + 1
    try:
        lines = [ln.decode("ascii") for ln in raw_lines]
    except UnicodeDecodeError as e:
        bad = next(i for i, ln in enumerate(raw_lines) if not ln.isascii())
        raise CheckpointFormatError(f"non-ASCII content: {e.reason}", offsets[bad] + e.start) from None
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("missing checkpoint header", 0)

    banks: list[AdaptBank] = []
    i = 1
    n = len(lines)
    while i < n:
        line, off = lines[i], offsets[i]
        if line == "" and i == n - 1:
            break
        tok = line.split(" ")
        if tok[0] != "bank" or len(tok) != 4 or tok[1] != str(len(banks)):
            raise CheckpointFormatError("expected 'bank <index> heads=<n> shared=<bool>'", off)
        kv = _kv(tok[2:], off, {"heads", "shared"})
        if kv["shared"] not in ("true", "false") or not kv["heads"].isdigit():
            raise CheckpointFormatError("bad bank header values", off)
        heads, shared = int(kv["heads"]), kv["shared"] == "true"
        i += 1
        params = []
        for h in range(1 if shared else heads):
            if i >= n:
                raise CheckpointFormatError("truncated bank", len(data))
            line, off = lines[i], offsets[i]
            tok = line.split(" ")
            if tok[0] != "head" or len(tok) != 4 or tok[1] != str(h):
                raise CheckpointFormatError(f"expected record for head {h}", off)
            kv = _kv(tok[2:], off, {"variant", "dim"})
            try:
                variant = AdaptVariant.parse(kv["variant"])
            except ConfigurationError:
                raise CheckpointFormatError(f"unknown variant {kv['variant']!r}", off) from None
            if not kv["dim"].isdigit() or int(kv["dim"]) < 2:
                raise CheckpointFormatError("bad dim", off)
            dim = int(kv["dim"])
            i += 1
            fields = {}
            for f in ("skew_u", "skew_v", "sigma_raw", "dense"):
                if f not in _FIELDS[variant]:
                    continue
                rows = dim if f == "dense" else 1
                size = dim if f in ("sigma_raw", "dense") else nx.skew_size(dim)
                got = []
                for _ in range(rows):
                    if i >= n:
                        raise CheckpointFormatError("truncated head record", len(data))
                    tok = lines[i].split(" ") if lines[i] else [""]
                    if tok[0] != f:
                        raise CheckpointFormatError(f"expected field {f!r}", offsets[i])
                    got.append(_floats(tok[1:], offsets[i], size))
                    i += 1
                fields[f] = np.stack(got) if f == "dense" else got[0]
            params.append(HeadAdaptParams(dim, variant, **fields))
        try:
            banks.append(AdaptBank(heads, shared, params))
        except ConfigurationError as e:
            raise CheckpointFormatError(str(e), off) from None
    return banks
