"""Dense matrix helpers plus the two factorizations the initializers need.

Factorizations always run in float64. ``svd`` is a one-sided (Hestenes)
Jacobi iteration with round-robin pair ordering so every round rotates
n/2 disjoint column pairs at once; ``sym_eig`` defers to LAPACK.
"""
from typing import NamedTuple

import numpy as np

from .errors import InvalidInput, NumericalFailure, ShapeError

_EPS = np.finfo(np.float64).eps


class SvdResult(NamedTuple):
    U: np.ndarray
    singular_values: np.ndarray
    V: np.ndarray


class SymEigResult(NamedTuple):
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def _as_finite_matrix(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidInput(f"expected a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInput("matrix contains NaN or Inf")
    return a


def _round_robin(n):
    """Yield (p, q) index arrays covering all n*(n-1)/2 pairs in n-1 rounds (n even)."""
    players = np.arange(n)
    for _ in range(n - 1):
        half = n // 2
        p = players[:half]
        q = players[n - 1:half - 1:-1]
        yield np.minimum(p, q), np.maximum(p, q)
        # keep player 0 fixed, rotate the rest
        players = np.concatenate(([players[0]], [players[-1]], players[1:-1]))


def _jacobi_columns(a, max_sweeps):
    """Orthogonalize the columns of ``a`` (rows >= cols); returns W = A V and V."""
    rows, cols = a.shape
    n = cols + (cols % 2)
    w = np.zeros((rows, n))
    w[:, :cols] = a
    v = np.eye(n)
    tol = 10 * _EPS
    for _ in range(max_sweeps):
        rotated = False
        for p, q in _round_robin(n):
            wp, wq = w[:, p], w[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            wp, wq = w[:, p], w[:, q]
            w[:, p], w[:, q] = c * wp - s * wq, s * wp + c * wq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            return w[:, :cols], v[:cols, :cols]
    raise NumericalFailure(f"Jacobi SVD did not converge in {max_sweeps} sweeps")


def _complete_basis(u_good, rows, extra):
    if extra == 0:
        return u_good
    q, _ = np.linalg.qr(np.hstack([u_good, np.eye(rows)]))
    k = u_good.shape[1]
    return np.hstack([u_good, q[:, k:k + extra]])


def _fix_signs(v, u=None):
    """Flip columns so the first non-negligible entry of each column of v is >= 0."""
    scale = np.abs(v).max(axis=0, keepdims=True)
    significant = np.abs(v) > 1e-12 * np.maximum(scale, 1e-300)
    first = significant.argmax(axis=0)
    signs = np.where(v[first, np.arange(v.shape[1])] < 0, -1.0, 1.0)
    v = v * signs
    if u is not None:
        u = u * signs
    return v, u


def svd(a, max_sweeps=60):
    """Thin SVD ``a = U diag(s) V^T`` with ``s`` descending.

    Each column of V has its first non-negligible entry made non-negative,
    so the result (and anything derived from V) is reproducible.
    """
    a = _as_finite_matrix(a)
    rows, cols = a.shape
    if rows < cols:
        u_t, s, v_t = svd(a.T, max_sweeps)
        v, u = _fix_signs(u_t, v_t)
        return SvdResult(u, s, v)

    # QR first so the Jacobi sweeps run on a cols x cols triangle
    q, r = np.linalg.qr(a)
    w, v = _jacobi_columns(r, max_sweeps)
    s = np.linalg.norm(w, axis=0)
    order = np.argsort(-s, kind="stable")
    s, w, v = s[order], w[:, order], v[:, order]

    cutoff = s[0] * max(rows, cols) * _EPS if s[0] > 0 else 0.0
    good = int(np.count_nonzero(s > cutoff))
    u_r = w[:, :good] / s[:good]
    u_r = _complete_basis(u_r, cols, cols - good)
    s[good:] = np.where(s[good:] > 0, s[good:], 0.0)
    u = q @ u_r
    v, u = _fix_signs(v, u)
    return SvdResult(u, s, v)


def sym_eig(a, rtol=1e-10):
    """Eigenpairs of a symmetric matrix, eigenvalues descending."""
    a = _as_finite_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise InvalidInput(f"sym_eig needs a square matrix, got {a.shape}")
    scale = np.abs(a).max()
    if np.abs(a - a.T).max() > rtol * max(scale, np.finfo(np.float64).tiny):
        raise InvalidInput("matrix is not symmetric")
    lam, vec = np.linalg.eigh(0.5 * (a + a.T))
    lam, vec = lam[::-1].copy(), vec[:, ::-1].copy()
    vec, _ = _fix_signs(vec)
    return SymEigResult(lam, vec)


def matmul(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def transpose(a):
    a = np.asarray(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.ndim}-D")
    return a.T.copy()


def gather(a, axis, indices):
    """Sub-tensor of ``a`` at strictly increasing ``indices`` along ``axis``."""
    a = np.asarray(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for {a.ndim}-D input")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("indices must be one-dimensional")
    size = a.shape[axis]
    if idx.size and (idx[0] < 0 or idx[-1] >= size):
        raise ShapeError(f"indices out of bounds for axis of size {size}")
    if np.any(np.diff(idx) <= 0):
        raise ShapeError("indices must be strictly increasing")
    return np.take(a, idx, axis=axis)


def slice_rows(a, start, stop):
    a = np.asarray(a)
    if a.ndim != 2 or not 0 <= start <= stop <= a.shape[0]:
        raise ShapeError(f"bad row slice [{start}, {stop}) for shape {a.shape}")
    return a[start:stop].copy()


def slice_cols(a, start, stop):
    a = np.asarray(a)
    if a.ndim != 2 or not 0 <= start <= stop <= a.shape[1]:
        raise ShapeError(f"bad column slice [{start}, {stop}) for shape {a.shape}")
    return a[:, start:stop].copy()
