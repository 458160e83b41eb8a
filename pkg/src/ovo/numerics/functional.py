"""Cosine similarity and softmax, scalar and row-batched."""
from __future__ import annotations

import numba
import numpy as np

NORM_EPS = 1e-12


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= NORM_EPS or nb <= NORM_EPS:
        raise ValueError("degenerate feature")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def row_cosine(x: np.ndarray, t: np.ndarray):
    """Row-wise cosine between (N, D) arrays.

    Returns ``(cos, cache)``; pass the cache to :func:`row_cosine_backward`.
    """
    nx = np.linalg.norm(x, axis=1)
    nt = np.linalg.norm(t, axis=1)
    if np.any(nx <= NORM_EPS) or np.any(nt <= NORM_EPS):
        raise ValueError("degenerate feature")
    cos = np.einsum("ij,ij->i", x, t) / (nx * nt)
    return cos, (x, t, nx, nt, cos)


def row_cosine_backward(cache, gcos: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``x`` given upstream gradient on each row's cosine."""
    x, t, nx, nt, cos = cache
    # d cos / dx = t / (|x||t|) - cos * x / |x|^2
    a = gcos / (nx * nt)
    b = gcos * cos / (nx * nx)
    return a[:, None] * t - b[:, None] * x


@numba.njit(cache=True, nogil=True)
def _weighted_cosine_kernel(x, t, w, grad):
    n, d = x.shape
    terms = np.empty(n)
    for i in range(n):
        xx = 0.0
        tt = 0.0
        xt = 0.0
        for k in range(d):
            xx += x[i, k] * x[i, k]
            tt += t[i, k] * t[i, k]
            xt += x[i, k] * t[i, k]
        nx = np.sqrt(xx)
        nt = np.sqrt(tt)
        if nx <= NORM_EPS or nt <= NORM_EPS:
            return terms, False
        cos = xt / (nx * nt)
        terms[i] = w[i] * (1.0 - cos)
        a = -w[i] / (nx * nt)
        b = -w[i] * cos / xx
        for k in range(d):
            grad[i, k] = a * t[i, k] - b * x[i, k]
    return terms, True


def weighted_cosine_loss(x: np.ndarray, t: np.ndarray, w: np.ndarray):
    """``sum_i w_i (1 - cos(x_i, t_i))`` and its gradient w.r.t. ``x`` in one fused pass."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    t = np.ascontiguousarray(t, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    grad = np.empty_like(x)
    terms, ok = _weighted_cosine_kernel(x, t, w, grad)
    if not ok:
        raise ValueError("degenerate feature")
    return float(np.sum(terms)), grad


def cosine_matrix(x: np.ndarray, bank: np.ndarray) -> np.ndarray:
    """(N, D) x (K, D) -> (N, K) cosine similarities."""
    nx = np.linalg.norm(x, axis=1)
    nb = np.linalg.norm(bank, axis=1)
    if np.any(nx <= NORM_EPS) or np.any(nb <= NORM_EPS):
        raise ValueError("degenerate feature")
    return (x / nx[:, None]) @ (bank / nb[:, None]).T


def softmax(scores, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0 or s.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    z = s / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)
