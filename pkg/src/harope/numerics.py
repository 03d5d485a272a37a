"""Dense float64 kernels backing the adaptation parameterization.

Matrices are plain 2-D ``numpy.ndarray`` values of dtype float64.
"""
from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import numpy as np
from scipy.special import expit

from harope import DomainError, ShapeError

TAYLOR_ORDER = 18
# scaling target: ||M / 2**s||_1 <= 0.5
SCALE_TARGET = 0.5
SMALLEST_NORMAL = np.finfo(np.float64).tiny


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def skew_size(dim: int) -> int:
    """Number of free entries of a ``dim x dim`` skew-symmetric matrix."""
    return dim * (dim - 1) // 2


def skew_dim(n_entries: int) -> int:
    """Inverse of :func:`skew_size`."""
    d = int(round((1 + math.sqrt(1 + 8 * n_entries)) / 2))
    if skew_size(d) != n_entries:
        raise ShapeError(f"{n_entries} is not a triangular number d(d-1)/2")
    return d


def skew_to_matrix(entries, dim: int | None = None) -> np.ndarray:
    """Fill the strict upper triangle row-major from ``entries`` and mirror with a sign flip."""
    entries = np.asarray(entries, dtype=np.float64).ravel()
    if dim is None:
        dim = skew_dim(entries.size)
    if entries.size != skew_size(dim):
        raise ShapeError(f"dim {dim} needs {skew_size(dim)} entries, got {entries.size}")
    s = np.zeros((dim, dim))
    iu = np.triu_indices(dim, k=1)
    s[iu] = entries
    return s - s.T


def matrix_to_skew(s) -> np.ndarray:
    s = as_matrix(s)
    return s[np.triu_indices(s.shape[0], k=1)].copy()


def scaling_power(m: np.ndarray) -> int:
    """Smallest s >= 0 with ||m / 2**s||_1 <= SCALE_TARGET."""
    norm = float(np.abs(m).sum(axis=-2).max()) if m.size else 0.0
    if norm <= SCALE_TARGET:
        return 0
    return max(0, int(math.ceil(math.log2(norm / SCALE_TARGET))))


def expm(m) -> np.ndarray:
    """Matrix exponential by scaling and squaring of an order-18 Taylor polynomial."""
    m = as_matrix(m)
    n, k = m.shape
    if n != k:
        raise ShapeError(f"expm needs a square matrix, got {m.shape}")
    s = scaling_power(m)
    x = m / 2.0**s
    eye = np.eye(n)
    # Horner: I + X(I + X/2(I + X/3(...)))
    p = eye + x / TAYLOR_ORDER
    for j in range(TAYLOR_ORDER - 1, 0, -1):
        p = eye + (x @ p) / j
    for _ in range(s):
        p = p @ p
    return p


def softplus(x):
    """log(1 + e^x), never returning 0.

    Works on scalars and arrays. Where the exact value drops below the smallest
    positive normal double (x < about -708) that normal is returned instead.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))), SMALLEST_NORMAL)
    return out[()] if out.ndim == 0 else out


def softplus_inv(y):
    """Inverse of softplus for y > 0: log(e^y - 1)."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise DomainError("softplus_inv needs strictly positive input")
    out = y + np.log(-np.expm1(-y))
    return out[()] if out.ndim == 0 else out


def sigmoid(x):
    out = expit(np.asarray(x, dtype=np.float64))
    return out[()] if out.ndim == 0 else out


def orthogonality_defect(u) -> float:
    """Frobenius norm of U^T U - I."""
    u = as_matrix(u)
    if u.shape[0] != u.shape[1]:
        raise ShapeError(f"orthogonality_defect needs a square matrix, got {u.shape}")
    return float(np.linalg.norm(u.T @ u - np.eye(u.shape[0])))


def det_lu(m) -> float:
    """Determinant from a partially pivoted LU factorization."""
    a = as_matrix(m).copy()
    n = a.shape[0]
    if a.shape[1] != n:
        raise ShapeError(f"det needs a square matrix, got {a.shape}")
    sign = 1.0
    for j in range(n):
        piv = j + int(np.argmax(np.abs(a[j:, j])))
        if a[piv, j] == 0.0:
            return 0.0
        if piv != j:
            a[[j, piv]] = a[[piv, j]]
            sign = -sign
        a[j + 1:, j:] -= np.outer(a[j + 1:, j] / a[j, j], a[j, j:])
    return sign * float(np.prod(np.diag(a)))


def format_float(x: float) -> str:
    return f"{float(x):.17g}"


def matrix_to_csv(m) -> str:
    m = as_matrix(m)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in m:
        w.writerow([format_float(v) for v in row])
    return buf.getvalue()


def matrix_from_csv(text: str) -> np.ndarray:
    rows = [[float(v) for v in row] for row in csv.reader(io.StringIO(text)) if row]
    if rows and any(len(r) != len(rows[0]) for r in rows):
        raise ShapeError("ragged CSV matrix")
    return np.array(rows, dtype=np.float64).reshape(len(rows), -1 if rows else 0)


def save_matrix_csv(m, path) -> None:
    Path(path).write_text(matrix_to_csv(m))


def load_matrix_csv(path) -> np.ndarray:
    return matrix_from_csv(Path(path).read_text())
