"""Small dense kernels shared by the block solvers.

Blocks are ``(n, m)`` float arrays, coefficients are ``(m, m)`` arrays.
Everything here is a pure function of its inputs.
"""
import numpy as np
import scipy.linalg

from .errors import (
    DimensionError,
    InvalidInputError,
    SingularGramError,
    SingularTriangularError,
)

__all__ = [
    "householder_qr",
    "cholesky_upper",
    "spd_solve",
    "tri_solve",
    "block_inner",
    "block_scale",
    "block_axpy",
    "symmetrize",
    "EPS_PD",
    "EPS_TRI",
]

EPS_PD = 1e-14
EPS_TRI = 1e-14


def _as_matrix(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-d, got shape {a.shape}")
    return a


def symmetrize(g):
    return 0.5 * (g + g.T)


def householder_qr(v):
    """Thin QR of an ``n x m`` block with ``n >= m``.

    Returns ``(q, r)`` with ``q`` having exactly ``m`` orthonormal columns and
    ``r`` upper triangular with a nonnegative diagonal. For a rank deficient
    ``v`` the Householder reflections still produce orthonormal ``q``; the
    extra columns are an arbitrary orthonormal completion and ``r`` is
    singular.
    """
    v = _as_matrix(v, "v")
    n, m = v.shape
    if n < m:
        raise DimensionError(f"householder_qr needs n >= m, got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("householder_qr: non-finite entries in input block")
    # LAPACK geqrf/orgqr: Householder based.
    q, r = np.linalg.qr(v, mode="reduced")
    signs = np.where(np.diag(r) < 0.0, -1.0, 1.0)
    q = q * signs
    r = signs[:, None] * r
    return q, np.triu(r)


def cholesky_upper(a):
    """Upper Cholesky factor ``R`` of a symmetric matrix, ``R.T @ R = a``.

    Raises :class:`SingularGramError` when a pivot falls to
    ``EPS_PD * ||a||_F`` or below.
    """
    a = _as_matrix(a, "a")
    m = a.shape[0]
    if a.shape != (m, m):
        raise DimensionError(f"cholesky_upper needs a square matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("cholesky_upper: non-finite entries")
    a = symmetrize(a)
    scale = np.linalg.norm(a)
    thresh = EPS_PD * scale
    r = np.zeros_like(a)
    for j in range(m):
        pivot = a[j, j] - r[:j, j] @ r[:j, j]
        if not pivot > thresh:
            raise SingularGramError(
                f"Gram matrix not numerically positive definite (pivot {j} = {pivot:.3e})",
                pivot=j,
            )
        r[j, j] = np.sqrt(pivot)
        if j + 1 < m:
            r[j, j + 1:] = (a[j, j + 1:] - r[:j, j] @ r[:j, j + 1:]) / r[j, j]
    return r


def tri_solve(r, rhs, side="left", trans=False):
    """Triangular solve with an upper triangular coefficient ``r``.

    ``side="left"`` computes ``r^{-1} rhs`` (``r^{-T} rhs`` with ``trans``);
    ``side="right"`` computes ``rhs r^{-1}`` (``rhs r^{-T}`` with ``trans``).
    """
    r = _as_matrix(r, "r")
    rhs = np.asarray(rhs, dtype=float)
    d = np.abs(np.diag(r))
    dmax = d.max() if d.size else 0.0
    small = np.flatnonzero(d <= EPS_TRI * dmax) if dmax > 0 else np.arange(d.size)
    if small.size:
        raise SingularTriangularError(
            f"triangular factor has a negligible pivot at index {small[0]}",
            pivot=int(small[0]),
        )
    if side == "left":
        if rhs.shape[0] != r.shape[0]:
            raise DimensionError(f"tri_solve: {r.shape} vs rhs {rhs.shape}")
        return scipy.linalg.solve_triangular(r, rhs, lower=False, trans="T" if trans else "N")
    if side == "right":
        # x r = rhs  <=>  r^T x^T = rhs^T
        rhs2 = np.atleast_2d(rhs)
        if rhs2.shape[1] != r.shape[0]:
            raise DimensionError(f"tri_solve: rhs {rhs.shape} vs {r.shape}")
        out = scipy.linalg.solve_triangular(r, rhs2.T, lower=False, trans="N" if trans else "T")
        return out.T
    raise ValueError(f"unknown side {side!r}")


def spd_solve(a, rhs):
    """Solve ``a x = rhs`` for symmetric positive definite ``a`` via Cholesky."""
    r = cholesky_upper(a)
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[0] != r.shape[0]:
        raise DimensionError(f"spd_solve: {r.shape} vs rhs {rhs.shape}")
    y = scipy.linalg.solve_triangular(r, rhs, lower=False, trans="T")
    return scipy.linalg.solve_triangular(r, y, lower=False)


def block_inner(x, y=None):
    """``x^T y``; symmetrized when ``y`` is omitted or is ``x`` itself."""
    x = _as_matrix(x, "x")
    if y is None or y is x:
        return symmetrize(x.T @ x)
    y = _as_matrix(y, "y")
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"block_inner: row mismatch {x.shape} vs {y.shape}")
    return x.T @ y


def block_scale(x, c):
    x = _as_matrix(x, "x")
    c = _as_matrix(c, "c")
    if x.shape[1] != c.shape[0]:
        raise DimensionError(f"block_scale: {x.shape} @ {c.shape}")
    return x @ c


def block_axpy(x, y, c):
    """``x + y c``."""
    x = _as_matrix(x, "x")
    yc = block_scale(y, c)
    if x.shape != yc.shape:
        raise DimensionError(f"block_axpy: {x.shape} vs {yc.shape}")
    return x + yc
