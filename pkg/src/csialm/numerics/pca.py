"""Principal components via cyclic Jacobi eigendecomposition of the scatter matrix."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from ..errors import ParameterError
from .tensor import Tensor


def jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 60):
    """Eigenvalues (descending) and column eigenvectors of a symmetric matrix."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ParameterError(f"jacobi_eigh needs a square matrix, got {a.shape}")
    v = np.eye(n)
    scale = max(np.abs(a).max(), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = np.sqrt((np.triu(a, 1) ** 2).sum())
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def _fix_signs(rows: np.ndarray, tol: float) -> np.ndarray:
    rows = rows.copy()
    for i, row in enumerate(rows):
        nz = np.flatnonzero(np.abs(row) > tol)
        if nz.size and row[nz[0]] < 0:
            rows[i] = -row
    return rows


class PCAResult(NamedTuple):
    directions: np.ndarray  # unit rows [d x D]
    singular_values: np.ndarray
    explained_variance_ratio: np.ndarray
    mean: np.ndarray


def pca(m, d: int) -> PCAResult:
    m = np.asarray(m.data if isinstance(m, Tensor) else m, dtype=np.float64)
    v, dim = m.shape
    if not 1 <= d <= min(v, dim):
        raise ParameterError(f"component count d={d} outside [1, {min(v, dim)}]")
    mu = m.mean(axis=0)
    centered = m - mu
    scatter = centered.T @ centered
    w, vecs = jacobi_eigh(scatter)
    w = np.clip(w, 0.0, None)
    w[w < max(v, dim) * np.finfo(float).eps * w[0]] = 0.0
    total = w.sum()
    ratio = w / total if total > 0 else np.zeros_like(w)
    tol = 1e-12 * max(1.0, np.abs(vecs).max())
    directions = _fix_signs(vecs[:, :d].T, tol)
    return PCAResult(directions, np.sqrt(w[:d]), ratio[:d], mu)


def pca_reduce(m, d: int) -> Tensor:
    """Top-``d`` principal directions of the rows of ``m``, each scaled by its singular value.

    Returns a [d x D] constant tensor in the embedding space of ``m``.
    """
    res = pca(m, d)
    out = res.directions * res.singular_values[:, None]
    dtype = m.dtype if isinstance(m, (Tensor, np.ndarray)) and m.dtype.kind == "f" else None
    return Tensor(out, dtype=dtype)
