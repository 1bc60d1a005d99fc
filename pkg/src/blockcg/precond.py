"""SPD preconditioners ``M = L L^T`` with split and unsplit application."""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve_triangular

from .errors import DimensionError, PreconditionerError

__all__ = [
    "Preconditioner",
    "build_identity",
    "build_jacobi",
    "build_ic",
    "incomplete_cholesky",
    "build_preconditioner",
]

log = logging.getLogger(__name__)

MAX_SHIFT_ESCALATIONS = 6
# first nonzero shift tried when the user asked for none
ZERO_SHIFT_START = 1e-3


@dataclass(frozen=True)
class Preconditioner:
    """``M = L L^T``.

    ``lower`` holds the sparse factor for incomplete Cholesky; for Jacobi only
    ``diag_sqrt`` is stored; the identity stores neither.
    """

    kind: str
    n: int
    lower: Optional[sp.csr_array] = None
    diag_sqrt: Optional[np.ndarray] = None
    shift: float = 0.0

    @property
    def has_split(self):
        return True

    @property
    def has_inverse(self):
        return True

    @property
    def is_identity(self):
        return self.kind == "identity"

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.n:
            raise DimensionError(f"preconditioner n={self.n} vs block rows {x.shape[0]}")
        return x

    def _dscale(self, x, power):
        d = self.diag_sqrt ** power
        return x * (d[:, None] if x.ndim == 2 else d)

    def solve_lower(self, x):
        """``L^{-1} x``."""
        x = self._check(x)
        if self.kind == "identity":
            return x.copy()
        if self.kind == "jacobi":
            return self._dscale(x, -1)
        return spsolve_triangular(self.lower, x, lower=True)

    def solve_upper(self, x):
        """``L^{-T} x``."""
        x = self._check(x)
        if self.kind == "identity":
            return x.copy()
        if self.kind == "jacobi":
            return self._dscale(x, -1)
        return spsolve_triangular(self._upper, x, lower=False)

    def apply_inv(self, r):
        """``z = M^{-1} r``."""
        r = self._check(r)
        if self.kind == "identity":
            return r.copy()
        if self.kind == "jacobi":
            return self._dscale(r, -2)
        return self.solve_upper(self.solve_lower(r))

    def apply_lower(self, x):
        """``L x`` (maps a preconditioned residual back to the original one)."""
        x = self._check(x)
        if self.kind == "identity":
            return x.copy()
        if self.kind == "jacobi":
            return self._dscale(x, 1)
        return self.lower @ x

    @property
    def _upper(self):
        cached = self.__dict__.get("_upper_cache")
        if cached is None:
            cached = _int32_indices(sp.csr_array(self.lower.T))
            object.__setattr__(self, "_upper_cache", cached)
        return cached


def build_identity(n):
    return Preconditioner("identity", int(n))


def build_jacobi(a):
    d = a.diagonal()
    if np.any(d <= 0):
        raise PreconditionerError("Jacobi preconditioner needs a positive diagonal")
    return Preconditioner("jacobi", a.n, diag_sqrt=np.sqrt(d))


def incomplete_cholesky(a, shift=0.0, droptol=0.0):
    """Left-looking incomplete Cholesky of ``a + shift * diag(a)``.

    With ``droptol == 0`` the factor keeps the lower-triangular pattern of
    ``a`` (IC(0)). With ``droptol > 0`` fill is allowed and an off-diagonal
    entry ``(i, j)`` is dropped when its magnitude is below
    ``droptol * ||a[i, :]||_2``.

    Returns the lower factor as CSR; raises :class:`PreconditionerError` on a
    non-positive pivot.
    """
    csc = sp.csc_array(a.csr)
    n = a.n
    diag = a.diagonal()
    rownorm = np.sqrt(np.asarray(csc.multiply(csc).sum(axis=0)).ravel())
    ic0 = droptol == 0

    cols = [None] * n        # cols[j] = {row: value} for rows >= j
    row_links = [[] for _ in range(n)]  # row_links[i] = columns k < i with L[i, k] != 0
    for j in range(n):
        start, end = csc.indptr[j], csc.indptr[j + 1]
        rows_j = csc.indices[start:end]
        vals_j = csc.data[start:end]
        keep = rows_j >= j
        w = dict(zip(rows_j[keep].tolist(), vals_j[keep].tolist()))
        w[j] = w.get(j, 0.0) + shift * diag[j]
        for k in row_links[j]:
            col_k = cols[k]
            ljk = col_k[j]
            for i, lik in col_k.items():
                if i < j:
                    continue
                if i in w:
                    w[i] -= lik * ljk
                elif not ic0:
                    w[i] = -lik * ljk
        pivot = w.pop(j)
        if not pivot > 0.0:
            raise PreconditionerError(f"non-positive pivot {pivot:.3e} at column {j}")
        ljj = np.sqrt(pivot)
        col = {j: ljj}
        for i, v in w.items():
            v = v / ljj
            if v == 0.0 or (not ic0 and abs(v) < droptol * rownorm[i]):
                continue
            col[i] = v
            row_links[i].append(j)
        cols[j] = col

    nnz = sum(len(c) for c in cols)
    r = np.empty(nnz, dtype=np.int64)
    c = np.empty(nnz, dtype=np.int64)
    v = np.empty(nnz, dtype=float)
    pos = 0
    for j, col in enumerate(cols):
        k = len(col)
        r[pos:pos + k] = list(col.keys())
        c[pos:pos + k] = j
        v[pos:pos + k] = list(col.values())
        pos += k
    low = sp.csr_array((v, (r, c)), shape=(n, n))
    low.sum_duplicates()
    low.sort_indices()
    return _int32_indices(low)


def _int32_indices(m):
    # the sparse triangular solver only accepts C-int index arrays
    m.indices = m.indices.astype(np.int32)
    m.indptr = m.indptr.astype(np.int32)
    return m


def build_ic(a, shift=0.0, droptol=0.0):
    """Incomplete Cholesky preconditioner with diagonal-shift escalation.

    On pivot breakdown the relative diagonal shift is multiplied by 10 and
    the factorization retried, at most ``MAX_SHIFT_ESCALATIONS`` times.
    """
    if shift < 0 or droptol < 0:
        raise ValueError("shift and droptol must be nonnegative")
    current = float(shift)
    for attempt in range(MAX_SHIFT_ESCALATIONS + 1):
        try:
            low = incomplete_cholesky(a, shift=current, droptol=droptol)
        except PreconditionerError as exc:
            if attempt == MAX_SHIFT_ESCALATIONS:
                raise PreconditionerError(
                    f"incomplete Cholesky failed after {attempt} shift escalations "
                    f"(last shift {current:g}): {exc}"
                ) from exc
            nxt = current * 10 if current > 0 else ZERO_SHIFT_START
            log.warning("IC breakdown with shift %g (%s); retrying with %g", current, exc, nxt)
            current = nxt
            continue
        return Preconditioner("ic", a.n, lower=low, shift=current)
    raise AssertionError("unreachable")


def build_preconditioner(kind, a, shift=0.0, droptol=0.0):
    if kind in (None, "none", "identity"):
        return build_identity(a.n)
    if kind == "jacobi":
        return build_jacobi(a)
    if kind == "ic":
        return build_ic(a, shift=shift, droptol=droptol)
    raise ValueError(f"unknown preconditioner {kind!r}")
