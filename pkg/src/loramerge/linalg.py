"""Deterministic dense linear algebra: SVD, Frobenius products, effective rank.

All computations are in float64. The SVD is a one-sided Jacobi iteration on
the smaller dimension, which is bitwise deterministic for identical input and
accurate for small singular values. A fixed sign convention makes singular
vectors reproducible across runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Relative threshold below which singular values are treated as zero.
EPS_ZERO = 1e-12

_MAX_SWEEPS = 60
_CONV_REL = 1e-14


class LinalgError(ValueError):
    pass


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD X = U diag(sigma) V^T with q = min(rows, cols)."""

    u: np.ndarray       # (d, q), orthonormal columns
    sigma: np.ndarray   # (q,), non-increasing, nonnegative
    v: np.ndarray       # (n, q), orthonormal columns

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


def _as_matrix(x, name: str = "matrix") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise LinalgError(f"{name} must be 2-D, got ndim={a.ndim}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise LinalgError(f"{name} must have positive dimensions, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise LinalgError(f"{name} contains non-finite entries")
    return a


def _jacobi_orthogonalize(w: np.ndarray, off_tol: float):
    """One-sided Jacobi: rotate column pairs of w until columns are orthogonal.

    Returns (w, v) with w = original @ v and v orthogonal. Converged when the
    off-diagonal mass of w^T w drops below off_tol (absolute, in squared-norm
    units) or no pair needed rotation in a full sweep.
    """
    n = w.shape[1]
    v = np.eye(n)
    for _ in range(_MAX_SWEEPS):
        off = 0.0
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                wp = w[:, p]
                wq = w[:, q]
                app = float(wp @ wp)
                aqq = float(wq @ wq)
                apq = float(wp @ wq)
                off += apq * apq
                # compare |cos| without squaring, which underflows for tiny columns
                if apq == 0.0 or abs(apq) <= 1e-15 * np.sqrt(app) * np.sqrt(aqq):
                    continue
                rotated = True
                tau = (aqq - app) / (2.0 * apq)
                t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau)) if tau != 0.0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                wp_new = c * wp - s * wq
                wq_new = s * wp + c * wq
                w[:, p] = wp_new
                w[:, q] = wq_new
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        if not rotated or np.sqrt(off) <= off_tol:
            break
    return w, v


def _complete_orthonormal(u: np.ndarray, filled: int) -> np.ndarray:
    """Deterministically fill columns filled..q-1 of u with an orthonormal complement."""
    d, q = u.shape
    col = filled
    for j in range(d):
        if col >= q:
            break
        cand = np.zeros(d)
        cand[j] = 1.0
        cand -= u[:, :col] @ (u[:, :col].T @ cand)
        nrm = np.linalg.norm(cand)
        if nrm > 0.5:
            u[:, col] = cand / nrm
            col += 1
    if col < q:
        raise LinalgError("failed to complete orthonormal basis")
    return u


def svd(x) -> SvdResult:
    """Thin SVD by one-sided Jacobi on the smaller dimension.

    Singular values are sorted descending. Sign convention: the entry of
    largest magnitude in each left singular vector is positive (ties broken
    by lowest index); the right vector is flipped to match.
    """
    a = _as_matrix(x)
    d, m = a.shape
    transposed = m > d
    b = a.T.copy() if transposed else a.copy()   # (big, small)
    n = b.shape[1]
    # prescale to unit Frobenius norm so squared quantities inside the
    # iteration cannot underflow for very small inputs
    fro = np.sqrt(float(np.sum(b * b)))
    if fro > 0.0:
        b = b / fro
    # off-diagonal entries of w^T w scale like ||X||_F^2 = 1 after prescaling
    off_tol = _CONV_REL

    w, v = _jacobi_orthogonalize(b, off_tol)
    norms = np.sqrt(np.sum(w * w, axis=0))    # in prescaled units
    order = np.argsort(-norms, kind="stable")
    norms = norms[order]
    v = v[:, order]
    w = w[:, order]
    sigma = fro * norms

    cutoff = EPS_ZERO * norms[0] if norms[0] > 0 else 0.0
    u = np.zeros((b.shape[0], n))
    rank = 0
    for k in range(n):
        if norms[k] > cutoff:
            u[:, k] = w[:, k] / norms[k]
            rank = k + 1
    # columns below the cutoff get a deterministic orthonormal completion
    u = _complete_orthonormal(u, rank)

    if transposed:
        u, v = v, u

    # sign convention on the left vectors
    for k in range(n):
        i = int(np.argmax(np.abs(u[:, k])))
        if u[i, k] < 0:
            u[:, k] = -u[:, k]
            v[:, k] = -v[:, k]

    return SvdResult(u=u, sigma=sigma, v=v)


def singular_values_from_gram(gram: np.ndarray) -> np.ndarray:
    """Singular values of a matrix X given G = X X^T (rows as samples).

    G is symmetric PSD; its singular values equal its eigenvalues, so the
    singular values of X are their square roots.
    """
    g = _as_matrix(gram, "gram")
    if g.shape[0] != g.shape[1]:
        raise LinalgError("gram matrix must be square")
    eig = svd(g).sigma
    return np.sqrt(np.maximum(eig, 0.0))


def effective_rank(sigma) -> float:
    """Entropy-based effective rank of a nonnegative spectrum.

    erank = exp(-sum p_k log p_k) with p_k = sigma_k^2 / sum sigma_j^2,
    computed over singular values above EPS_ZERO * max(sigma).
    """
    s = np.asarray(sigma, dtype=np.float64).ravel()
    if s.size == 0 or np.any(s < 0) or not np.all(np.isfinite(s)):
        raise LinalgError("spectrum must be a finite nonnegative vector")
    top = float(np.max(s))
    if top <= 0.0:
        raise LinalgError("zero matrix has no effective rank")
    # normalize before squaring so tiny spectra do not underflow to zero
    s = s[s > EPS_ZERO * top] / top
    p = s * s
    p = p / np.sum(p)
    # 0*log 0 = 0 by the filter above; p entries are strictly positive here
    ent = -float(np.sum(p * np.log(p)))
    return float(np.exp(ent))


def frobenius_inner(a, b) -> float:
    """Frobenius inner product <A, B>_F = sum_ij A_ij B_ij."""
    x = _as_matrix(a, "a")
    y = _as_matrix(b, "b")
    if x.shape != y.shape:
        raise LinalgError(f"shape mismatch: {x.shape} vs {y.shape}")
    return float(np.sum(x * y))


def frobenius_norm(a) -> float:
    x = _as_matrix(a, "a")
    return float(np.sqrt(np.sum(x * x)))
