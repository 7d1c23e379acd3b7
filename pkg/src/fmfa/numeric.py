"""Dense float64 kernels shared by the alignment losses.

Everything here operates on plain numpy arrays in 64-bit precision and is
pure: no hidden state, deterministic for fixed inputs. Each differentiable
kernel has a backward companion that computes the vector-Jacobian product
for the hand-rolled gradient chain, living next to its forward op so the
two can be reviewed together.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "as_matrix",
    "as_vector",
    "cosine_similarity_matrix",
    "cosine_similarity_backward",
    "row_softmax",
    "row_softmax_backward",
    "minmax_normalize_rows",
    "minmax_normalize_rows_backward",
    "lse_pool",
    "lse_pool_backward",
    "softmax_1d",
]


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a finite float64 2-D array or raise ValueError."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size and not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_vector(x, name: str = "vector") -> np.ndarray:
    """Coerce ``x`` to a finite float64 1-D array or raise ValueError."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size and not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _unit_rows(x: np.ndarray, name: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"{name} row {zero[0]} has zero norm")
    return x / norms[:, None], norms


def cosine_similarity_matrix(a, c) -> np.ndarray:
    """Pairwise cosine similarity between the rows of ``a`` and ``c``.

    Returns a (rows_a, rows_c) matrix. Any zero-norm row is rejected with
    an error naming the offending argument and row index.
    """
    a = as_matrix(a, "a")
    c = as_matrix(c, "c")
    if a.shape[1] != c.shape[1]:
        raise ValueError(f"dimension mismatch: a has {a.shape[1]} columns, c has {c.shape[1]}")
    an, _ = _unit_rows(a, "a")
    cn, _ = _unit_rows(c, "c")
    return an @ cn.T


def cosine_similarity_backward(a, c, grad_s) -> tuple[np.ndarray, np.ndarray]:
    """Vector-Jacobian product of :func:`cosine_similarity_matrix`.

    ``grad_s`` is the upstream gradient on the similarity matrix; the
    return value is ``(grad_a, grad_c)``.
    """
    a = as_matrix(a, "a")
    c = as_matrix(c, "c")
    grad_s = as_matrix(grad_s, "grad_s")
    an, a_norms = _unit_rows(a, "a")
    cn, c_norms = _unit_rows(c, "c")
    s = an @ cn.T
    gs = grad_s * s
    grad_a = (grad_s @ cn - gs.sum(axis=1, keepdims=True) * an) / a_norms[:, None]
    grad_c = (grad_s.T @ an - gs.sum(axis=0)[:, None] * cn) / c_norms[:, None]
    return grad_a, grad_c


def row_softmax(s, tau: float) -> np.ndarray:
    """Row-wise softmax of ``s / tau`` with max subtraction for stability."""
    s = as_matrix(s, "s")
    if tau <= 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    z = s / tau
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def row_softmax_backward(p, grad_p, tau: float) -> np.ndarray:
    """Vector-Jacobian product of :func:`row_softmax` given its output ``p``."""
    p = as_matrix(p, "p")
    grad_p = as_matrix(grad_p, "grad_p")
    inner = (grad_p * p).sum(axis=1, keepdims=True)
    return p * (grad_p - inner) / tau


def minmax_normalize_rows(s) -> np.ndarray:
    """Rescale each row to [0, 1] by its own min and max.

    A degenerate row whose entries are all equal maps to all ones, so the
    row maximum is preserved as fully relevant rather than discarded.
    """
    s = as_matrix(s, "s")
    mn = s.min(axis=1, keepdims=True)
    span = s.max(axis=1, keepdims=True) - mn
    out = np.ones_like(s)
    live = span[:, 0] > 0.0
    if live.any():
        out[live] = (s[live] - mn[live]) / span[live]
    return out


def minmax_normalize_rows_backward(s, grad_out) -> np.ndarray:
    """Vector-Jacobian product of :func:`minmax_normalize_rows`.

    The min and max positions act as fixed anchor indices (first occurrence
    on ties); degenerate rows get zero gradient.
    """
    s = as_matrix(s, "s")
    grad_out = as_matrix(grad_out, "grad_out")
    grad_s = np.zeros_like(s)
    mn = s.min(axis=1)
    mx = s.max(axis=1)
    jmin = s.argmin(axis=1)
    jmax = s.argmax(axis=1)
    for i in range(s.shape[0]):
        span = mx[i] - mn[i]
        if span == 0.0:
            continue
        g = grad_out[i]
        norm = (s[i] - mn[i]) / span
        grad_s[i] = g / span
        grad_s[i, jmin[i]] += (g * (norm - 1.0)).sum() / span
        grad_s[i, jmax[i]] -= (g * norm).sum() / span
    return grad_s


def softmax_1d(z) -> np.ndarray:
    """Stable softmax of a single vector."""
    z = as_vector(z, "z")
    if z.size == 0:
        raise ValueError("softmax of an empty vector")
    e = np.exp(z - z.max())
    return e / e.sum()


def lse_pool(maxima, lam: float) -> float:
    """Smooth maximum (1/lam) * log(sum(exp(lam * maxima))).

    Bounded between max(maxima) and max(maxima) + log(len)/lam, and
    converges to the hard maximum as lam grows.
    """
    m = as_vector(maxima, "maxima")
    if m.size == 0:
        raise ValueError("lse_pool of an empty vector")
    if lam <= 0.0:
        raise ValueError(f"lam must be positive, got {lam}")
    top = m.max()
    return float(top + np.log(np.exp(lam * (m - top)).sum()) / lam)


def lse_pool_backward(maxima, lam: float, upstream: float = 1.0) -> np.ndarray:
    """Gradient of :func:`lse_pool` with respect to its input vector."""
    m = as_vector(maxima, "maxima")
    if m.size == 0:
        raise ValueError("lse_pool of an empty vector")
    if lam <= 0.0:
        raise ValueError(f"lam must be positive, got {lam}")
    return upstream * softmax_1d(lam * m)
