"""Dense kernels: QR, thin SVD, Gaussian sketches, triangular solves, conditioning.

Matrices are plain C-ordered ``float64`` numpy arrays.
"""

from typing import NamedTuple

import numpy as np
import scipy.linalg

from .errors import DimensionError, NumericalError, SingularSystemError

SVD_TRUNCATION = 1e-12


class QrFactors(NamedTuple):
    q: np.ndarray
    r: np.ndarray


class ThinSvd(NamedTuple):
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray


def _as_matrix(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-d matrix, got shape {a.shape}")
    return a


def _check_finite(a, what="matrix"):
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"{what} contains non-finite entries")


def householder_qr(a):
    """Economy QR factorization ``a = q @ r`` with a non-negative diagonal of ``r``.

    LAPACK ``geqrf`` (Householder reflections) does the work; the column
    signs are normalized afterwards so the factors are deterministic.
    """
    a = _as_matrix(a)
    n, k = a.shape
    if k < 1 or n < k:
        raise DimensionError(f"householder_qr needs rows >= cols >= 1, got {n}x{k}")
    _check_finite(a)
    q, r = np.linalg.qr(a, mode="reduced")
    signs = np.where(np.diag(r) < 0.0, -1.0, 1.0)
    q *= signs
    r *= signs[:, None]
    return QrFactors(np.ascontiguousarray(q), np.ascontiguousarray(r))


def thin_svd_tall(a, rtol=SVD_TRUNCATION):
    """Thin SVD of a matrix whose one side is much shorter than the other.

    The long side is first compressed by a Householder QR, ``a^T = Q R``
    (for short-fat ``a``), and the small square factor is decomposed
    densely, so the cost stays linear in the long dimension without
    squaring the condition number. Singular values below
    ``rtol * sigma_max`` are dropped together with their vectors.
    """
    a = _as_matrix(a)
    if min(a.shape) < 1:
        raise DimensionError(f"thin_svd_tall needs a non-empty matrix, got {a.shape}")
    _check_finite(a)
    wide = a.shape[0] <= a.shape[1]
    b = a.T if wide else a
    q, r = householder_qr(b)
    # b = q r and r = u_r s w^T, hence b = (q u_r) s w^T
    u_r, sigma, wt = np.linalg.svd(r)
    smax = sigma[0]
    keep = sigma > rtol * smax if smax > 0 else np.zeros(sigma.shape, dtype=bool)
    sigma = sigma[keep]
    long_ = q @ u_r[:, keep]
    short = wt[keep].T
    if wide:
        return ThinSvd(short, sigma, long_)
    return ThinSvd(long_, sigma, short)


def gaussian_sketch(rows, cols, seed):
    """Standard-normal ``rows x cols`` matrix from a seeded Philox stream."""
    if rows < 1 or cols < 1:
        raise DimensionError(f"sketch dimensions must be positive, got {rows}x{cols}")
    rng = np.random.Generator(np.random.Philox(int(seed)))
    return rng.standard_normal((rows, cols))


def solve_triangular(r, z):
    r = _as_matrix(r)
    z = np.asarray(z, dtype=np.float64)
    k = r.shape[0]
    if r.shape != (k, k) or z.shape[0] != k:
        raise DimensionError(f"incompatible shapes {r.shape} and {z.shape}")
    diag = np.abs(np.diag(r))
    dmax = diag.max() if k else 0.0
    bad = np.flatnonzero(diag < 1e-14 * dmax) if dmax > 0 else np.arange(k)
    if bad.size:
        raise SingularSystemError(int(bad[0]))
    return scipy.linalg.solve_triangular(r, z, lower=False, check_finite=False)


def condition_number(a):
    """Ratio of extreme singular values; ``inf`` when the smallest one vanishes."""
    a = _as_matrix(a)
    n, r = a.shape
    if r < 1:
        raise DimensionError("condition_number needs at least one column")
    if n < r:
        raise DimensionError(f"condition_number needs rows >= cols, got {n}x{r}")
    _check_finite(a)
    _, rf = householder_qr(a)
    s = np.linalg.svd(rf, compute_uv=False)
    smax, smin = s[0], s[-1]
    if smax == 0.0:
        return np.inf
    if smin == 0.0 or smin < smax * np.finfo(float).tiny:
        return np.inf
    with np.errstate(over="ignore"):
        k = smax / smin
    return float(k) if np.isfinite(k) else np.inf


def lstsq_qr(a, b):
    """Least-squares solution of ``a x ~= b`` via Householder QR."""
    q, r = householder_qr(a)
    return solve_triangular(r, q.T @ np.asarray(b, dtype=np.float64))
