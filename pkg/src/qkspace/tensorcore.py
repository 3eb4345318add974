"""Dense linear algebra kernels and seeded randomness.

Matrices are plain ``float64`` numpy arrays. The SVD is a one-sided (Hestenes)
Jacobi iteration, which is accurate and simple at the sizes used here (at most
a few dozen columns).
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericalError

MAX_SWEEPS = 100
ROTATION_TOL = 1e-12


def as_matrix(a, name="matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} has non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise NumericalError("matmul overflowed")
    return out


# --------------------------------------------------------------------------
# randomness

def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream keys must be non-negative")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def make_rng(seed: int, *path) -> np.random.Generator:
    """Return a generator for the sub-stream ``(seed, *path)``.

    Path components may be ints or strings. The same seed and path always give
    the same stream, independent of how many other streams were created.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.PCG64(ss))


# --------------------------------------------------------------------------
# SVD

@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray   # m x k
    s: np.ndarray   # k, descending
    vt: np.ndarray  # k x n

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.vt


def _complete_columns(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns not flagged ``good`` by an orthonormal completion.

    Each fill is the unit vector with the largest residual after projecting
    out the columns kept so far, so the completion never stalls.
    """
    m, k = u.shape
    basis = np.array([u[:, j] for j in range(k) if good[j]]).reshape(-1, m)
    out = u.copy()
    for j in np.flatnonzero(~good):
        cand = np.eye(m)
        for _ in range(2):
            cand = cand - (cand @ basis.T) @ basis
        norms = np.linalg.norm(cand, axis=1)
        w = cand[int(np.argmax(norms))]
        w = w / np.linalg.norm(w)
        out[:, j] = w
        basis = np.vstack([basis, w])
    return out


def _jacobi_tall(a: np.ndarray):
    m, n = a.shape
    w = np.array(a, dtype=np.float64, order="F")
    v = np.eye(n, order="F")
    # columns this small are numerically zero; rotating them only churns noise
    negligible = (np.finfo(np.float64).eps * np.linalg.norm(w)) ** 2
    for _ in range(MAX_SWEEPS):
        rotated = False
        for i in range(n - 1):
            wi = w[:, i]
            for j in range(i + 1, n):
                wj = w[:, j]
                alpha = wi @ wi
                beta = wj @ wj
                gamma = wi @ wj
                if gamma == 0.0 or min(alpha, beta) <= negligible:
                    continue
                if abs(gamma) <= ROTATION_TOL * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.hypot(1.0, zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                wi_old = wi.copy()
                wi[:] = c * wi_old - s * wj
                wj[:] = s * wi_old + c * wj
                vi_old = v[:, i].copy()
                v[:, i] = c * vi_old - s * v[:, j]
                v[:, j] = s * vi_old + c * v[:, j]
        if not rotated:
            break
    else:
        raise NumericalError(f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps")

    s = np.linalg.norm(w, axis=0)
    order = np.argsort(-s, kind="stable")
    s = s[order]
    w = w[:, order]
    v = v[:, order]
    good = s ** 2 > negligible
    u = np.zeros_like(w)
    u[:, good] = w[:, good] / s[good]
    if not good.all():
        u = _complete_columns(u, good)
    return np.ascontiguousarray(u), s, np.ascontiguousarray(v.T)


def svd(a) -> SvdResult:
    """Thin SVD ``a = u @ diag(s) @ vt`` with a deterministic sign convention.

    In every left singular vector the entry of largest magnitude is positive
    (first index wins on ties); the matching row of ``vt`` is flipped with it.
    """
    a = as_matrix(a, "a")
    m, n = a.shape
    if m == 0 or n == 0:
        k = min(m, n)
        return SvdResult(np.zeros((m, k)), np.zeros(k), np.zeros((k, n)))
    if m >= n:
        u, s, vt = _jacobi_tall(a)
    else:
        u2, s, vt2 = _jacobi_tall(a.T)
        u, vt = vt2.T.copy(), u2.T.copy()
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[idx, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    return SvdResult(u * signs, s, vt * signs[:, None])


# --------------------------------------------------------------------------
# PCA

def _centered(points, k):
    x = as_matrix(points, "points")
    n, d = x.shape
    if n < 2:
        raise DimensionError("PCA needs at least two points")
    if k > d or k < 0:
        raise DimensionError(f"k={k} out of range for dimension {d}")
    return x - x.mean(axis=0)


def pca(points, k: int) -> np.ndarray:
    """Scores of ``points`` (n x d) on the top-``k`` principal axes."""
    xc = _centered(points, k)
    res = svd(xc)
    return xc @ res.vt[:k].T


def explained_variance_ratio(points) -> np.ndarray:
    xc = _centered(points, 0)
    s2 = svd(xc).s ** 2
    total = s2.sum()
    return s2 / total if total > 0 else s2


# --------------------------------------------------------------------------
# orthonormal bases

def orthonormalize(a, tol: float = 1e-8) -> np.ndarray:
    """Gram-Schmidt on the columns of ``a``, dropping dependent columns.

    A column is dropped when its residual after projecting out the earlier
    columns is below ``tol`` times its original norm. Column order is kept.
    """
    a = as_matrix(a, "a")
    cols = []
    for j in range(a.shape[1]):
        col = a[:, j]
        nrm0 = np.linalg.norm(col)
        if nrm0 == 0.0:
            continue
        w = col.copy()
        for _ in range(2):
            for b in cols:
                w -= (b @ w) * b
        nrm = np.linalg.norm(w)
        if nrm > tol * nrm0:
            cols.append(w / nrm)
    if not cols:
        return np.zeros((a.shape[0], 0))
    return np.column_stack(cols)


def random_orthonormal(rng: np.random.Generator, d: int, r: int) -> np.ndarray:
    """A d x r matrix with orthonormal columns from a Gaussian draw."""
    if r > d or r < 0:
        raise DimensionError(f"cannot draw {r} orthonormal vectors in R^{d}")
    g = rng.standard_normal((d, r))
    q, rr = np.linalg.qr(g)
    # fix the QR sign ambiguity so the draw is a function of g alone
    return q * np.where(np.diag(rr) < 0, -1.0, 1.0)


def random_orthonormal_stack(rng: np.random.Generator, n: int, d: int, r: int) -> np.ndarray:
    """``n`` independent d x r orthonormal bases, shape (n, d, r)."""
    if r > d or r < 0:
        raise DimensionError(f"cannot draw {r} orthonormal vectors in R^{d}")
    g = rng.standard_normal((n, d, r))
    q, rr = np.linalg.qr(g)
    sign = np.where(np.diagonal(rr, axis1=1, axis2=2) < 0, -1.0, 1.0)
    return q * sign[:, None, :]


def projector(basis) -> np.ndarray:
    """Orthogonal projector onto the span of orthonormal columns."""
    b = as_matrix(basis, "basis")
    return b @ b.T
