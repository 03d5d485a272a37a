"""Rotary position maps: 1-D RoPE and the axial multi-dimensional extension.

Rotary planes are adjacent coordinate pairs ``(v[2i], v[2i+1])``. With several
axes, axis ``k`` owns the ``k``-th contiguous block of ``head_dim / axes``
features and rotates it with its own spectrum and coordinate. Positions may be
real-valued; keep ``|pos| <= 1e6`` for the stated accuracy.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from harope import DomainError, ShapeError

DEFAULT_BASE = 10000.0


@dataclass(frozen=True)
class FreqSpectrum:
    dim: int
    base: float
    thetas: np.ndarray = field(repr=False, compare=False)


def make_spectrum(dim: int, base: float = DEFAULT_BASE) -> FreqSpectrum:
    """thetas[i] = base ** (-2 i / dim) for i < dim / 2."""
    if dim < 2 or dim % 2:
        raise ShapeError(f"spectrum dim must be even and >= 2, got {dim}")
    if not base > 0:
        raise DomainError(f"base must be positive, got {base}")
    i = np.arange(dim // 2, dtype=np.float64)
    thetas = float(base) ** (-2.0 * i / dim)
    thetas[0] = 1.0
    return FreqSpectrum(dim, float(base), thetas)


def custom_spectrum(thetas) -> FreqSpectrum:
    """Spectrum with explicitly given frequencies (base recorded as NaN)."""
    thetas = np.asarray(thetas, dtype=np.float64).ravel()
    return FreqSpectrum(2 * thetas.size, float("nan"), thetas)


@dataclass(frozen=True)
class GridPosition:
    coords: tuple[float, ...]

    @classmethod
    def of(cls, *coords) -> "GridPosition":
        return cls(tuple(float(c) for c in coords))

    def __add__(self, other: "GridPosition") -> "GridPosition":
        return GridPosition(tuple(a + b for a, b in zip(self.coords, other.coords, strict=True)))

    def __sub__(self, other: "GridPosition") -> "GridPosition":
        return GridPosition(tuple(a - b for a, b in zip(self.coords, other.coords, strict=True)))


@dataclass(frozen=True)
class RotaryConfig:
    axes: int
    head_dim: int
    base_per_axis: tuple[float, ...]
    spectra: tuple[FreqSpectrum, ...] = field(repr=False, compare=False)

    @property
    def block(self) -> int:
        return self.head_dim // self.axes


def make_rotary_config(head_dim: int, axes: int = 1, base=DEFAULT_BASE) -> RotaryConfig:
    if axes < 1 or head_dim % (2 * axes):
        raise ShapeError(f"head_dim {head_dim} is not divisible by 2*axes = {2 * axes}")
    bases = tuple(float(b) for b in np.broadcast_to(np.asarray(base, dtype=np.float64), (axes,)))
    spectra = tuple(make_spectrum(head_dim // axes, b) for b in bases)
    return RotaryConfig(axes, head_dim, bases, spectra)


def _rot2(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def rotation_matrix(pos: float, spec: FreqSpectrum) -> np.ndarray:
    """Block-diagonal matrix of 2x2 rotations by ``pos * thetas[i]``."""
    r = np.zeros((spec.dim, spec.dim))
    for i, theta in enumerate(spec.thetas):
        r[2 * i:2 * i + 2, 2 * i:2 * i + 2] = _rot2(pos * theta)
    return r


def rotation_matrix_nd(pos: GridPosition, cfg: RotaryConfig) -> np.ndarray:
    _check_pos(pos, cfg)
    r = np.zeros((cfg.head_dim, cfg.head_dim))
    b = cfg.block
    for k, (x, spec) in enumerate(zip(pos.coords, cfg.spectra)):
        r[k * b:(k + 1) * b, k * b:(k + 1) * b] = rotation_matrix(x, spec)
    return r


def rotate_pairs(v: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate adjacent pairs of the last axis of ``v``; ``cos``/``sin`` have half its width."""
    x0, x1 = v[..., 0::2], v[..., 1::2]
    out = np.empty(np.broadcast_shapes(v.shape, cos.shape[:-1] + (v.shape[-1],)))
    out[..., 0::2] = cos * x0 - sin * x1
    out[..., 1::2] = sin * x0 + cos * x1
    return out


def apply_rotary_1d(v, pos: float, spec: FreqSpectrum) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != spec.dim:
        raise ShapeError(f"vector length {v.shape[-1]} != spectrum dim {spec.dim}")
    ang = pos * spec.thetas
    return rotate_pairs(v, np.cos(ang), np.sin(ang))


def _check_pos(pos: GridPosition, cfg: RotaryConfig) -> None:
    if len(pos.coords) != cfg.axes:
        raise ShapeError(f"position has {len(pos.coords)} coords, config has {cfg.axes} axes")


def angles_nd(coords, cfg: RotaryConfig) -> np.ndarray:
    """Rotation angles for an array of positions.

    ``coords`` has shape (..., axes); the result has shape (..., head_dim / 2),
    laid out as the concatenation of the per-axis blocks.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[-1] != cfg.axes:
        raise ShapeError(f"coords carry {coords.shape[-1]} axes, config has {cfg.axes}")
    return np.concatenate(
        [coords[..., k:k + 1] * spec.thetas for k, spec in enumerate(cfg.spectra)], axis=-1
    )


def apply_rotary_nd(v, pos: GridPosition, cfg: RotaryConfig) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != cfg.head_dim:
        raise ShapeError(f"vector length {v.shape[-1]} != head_dim {cfg.head_dim}")
    _check_pos(pos, cfg)
    ang = angles_nd(pos.coords, cfg)
    return rotate_pairs(v, np.cos(ang), np.sin(ang))


def separable_score(q, k, pos_q: GridPosition, pos_k: GridPosition, cfg: RotaryConfig) -> float:
    """Rotated score summed axis by axis: sum_k q_k^T R_k(offset_k) k_k."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != (cfg.head_dim,) or k.shape != (cfg.head_dim,):
        raise ShapeError(f"q, k must have shape ({cfg.head_dim},)")
    _check_pos(pos_q, cfg)
    _check_pos(pos_k, cfg)
    b = cfg.block
    total = 0.0
    for a, spec in enumerate(cfg.spectra):
        sl = slice(a * b, (a + 1) * b)
        delta = pos_k.coords[a] - pos_q.coords[a]
        total += float(q[sl] @ apply_rotary_1d(k[sl], delta, spec))
    return total
