"""Dense Hermitian linear-algebra kernels shared by the channel and beamforming code."""

from __future__ import annotations

import numpy as np


def hpd_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a @ x = b for stacked Hermitian positive-definite a.

    Cholesky factorization with explicit forward/back substitution, so stacked
    systems of small order (antenna counts) solve in one shot without forming
    inverses. Raises numpy.linalg.LinAlgError when a is not positive definite
    (e.g. a pilot correlation matrix assembled with zero noise power).
    """
    a = np.asarray(a)
    b = np.asarray(b)
    n = a.shape[-1]
    if b.shape[-2] != n:
        raise ValueError(f"shape mismatch: a is {a.shape}, b is {b.shape}")
    chol = np.linalg.cholesky(a)
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    chol = np.broadcast_to(chol, batch + (n, n))
    b = np.broadcast_to(b, batch + b.shape[-2:])
    dtype = np.result_type(chol, b)

    # forward substitution: chol @ y = b
    y = np.empty(b.shape, dtype=dtype)
    for i in range(n):
        acc = b[..., i, :].astype(dtype, copy=True)
        for j in range(i):
            acc -= chol[..., i, j, None] * y[..., j, :]
        y[..., i, :] = acc / chol[..., i, i, None]

    # back substitution: chol^H @ x = y
    x = np.empty(b.shape, dtype=dtype)
    for i in reversed(range(n)):
        acc = y[..., i, :].copy()
        for j in range(i + 1, n):
            acc -= np.conj(chol[..., j, i, None]) * x[..., j, :]
        x[..., i, :] = acc / np.conj(chol[..., i, i, None])
    return x


def hermitian_sqrt(m: np.ndarray, neg_tol: float = 1e-12) -> np.ndarray:
    """Principal square root of stacked Hermitian PSD matrices.

    Eigenvalues in [-neg_tol * tr(m)/n, 0) are clipped to zero; anything more
    negative raises ValueError because the input is then not a covariance.
    """
    m = np.asarray(m)
    n = m.shape[-1]
    w, v = np.linalg.eigh(m)
    scale = np.einsum("...ii->...", m).real / n
    floor = -neg_tol * np.maximum(scale, 0.0)
    if np.any(w < floor[..., None]):
        raise ValueError("matrix has a significantly negative eigenvalue; not PSD")
    w = np.clip(w, 0.0, None)
    return np.einsum("...ij,...j,...kj->...ik", v, np.sqrt(w), np.conj(v))


def trace_prod(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """tr(a @ b) for stacked square matrices, without forming the product."""
    return np.einsum("...ij,...ji->...", a, b)
