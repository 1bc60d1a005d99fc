"""Sparse symmetric matrices, MatrixMarket I/O and right-hand side generation."""
import gzip
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import DimensionError, InvalidInputError, MatrixMarketError

__all__ = [
    "SparseSym",
    "RhsSpec",
    "load_matrix_market",
    "write_matrix_market",
    "spmm",
    "make_rhs",
    "make_rng",
    "dense_reference_solution",
]

SYM_RTOL = 1e-14
# matrices at least this dense (and not too large) also keep a dense copy for BLAS products
DENSE_FILL = 0.25
DENSE_MAX_N = 4000


def make_rng(seed):
    """PCG64 generator seeded through ``SeedSequence``; stable across platforms."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


class SparseSym:
    """Symmetric matrix in compressed row form with both triangles stored.

    The CSR arrays are canonical (sorted indices, no duplicates) and are not
    modified after construction.
    """

    def __init__(self, csr, name=None, check=True):
        csr = sp.csr_array(csr, dtype=float, copy=True)
        csr.sum_duplicates()
        csr.sort_indices()
        if csr.shape[0] != csr.shape[1]:
            raise DimensionError(f"matrix must be square, got {csr.shape}")
        self._csr = csr
        self.name = name
        for arr in (csr.indptr, csr.indices, csr.data):
            arr.flags.writeable = False
        if check:
            self._validate()
        n = csr.shape[0]
        self._dense = None
        if n <= DENSE_MAX_N and csr.nnz >= DENSE_FILL * n * n:
            self._dense = csr.toarray()
            self._dense.flags.writeable = False

    @classmethod
    def from_dense(cls, a, name=None, check=True):
        a = np.asarray(a, dtype=float)
        return cls(sp.csr_array(a), name=name, check=check)

    def _validate(self):
        a = self._csr
        if not np.all(np.isfinite(a.data)):
            raise InvalidInputError("matrix has non-finite entries")
        diff = a - a.T
        scale = np.abs(a.data).max() if a.nnz else 0.0
        # structural symmetry: pattern of a and a.T must coincide
        pat = (a != 0).astype(np.int8)
        if (pat - pat.T).count_nonzero():
            raise InvalidInputError("matrix is not structurally symmetric")
        if diff.nnz and np.abs(diff.data).max() > SYM_RTOL * scale:
            raise InvalidInputError("matrix values are not symmetric")
        d = a.diagonal()
        if np.any(d <= 0):
            i = int(np.flatnonzero(d <= 0)[0])
            raise InvalidInputError(f"diagonal entry {i} is not positive")

    @property
    def n(self):
        return self._csr.shape[0]

    @property
    def shape(self):
        return self._csr.shape

    @property
    def nnz(self):
        return self._csr.nnz

    @property
    def indptr(self):
        return self._csr.indptr

    @property
    def indices(self):
        return self._csr.indices

    @property
    def data(self):
        return self._csr.data

    @property
    def csr(self):
        return self._csr

    def diagonal(self):
        return self._csr.diagonal()

    def toarray(self):
        return self._csr.toarray()

    def norm_fro(self):
        return float(np.sqrt(np.sum(self._csr.data ** 2)))

    def __matmul__(self, x):
        return spmm(self, x)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<SparseSym{label} n={self.n} nnz={self.nnz}>"


def spmm(a, x):
    """Product of a sparse symmetric matrix with a block (or vector)."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != a.n:
        raise DimensionError(f"spmm: matrix n={a.n} vs block rows {x.shape[0]}")
    if a._dense is not None:
        return a._dense @ x
    return a.csr @ x


# -- MatrixMarket -----------------------------------------------------------

def _open_text(path):
    path = os.fspath(path)
    if path.endswith(".gz"):
        return gzip.open(path, "rt")
    return open(path, "r")


def load_matrix_market(path, name=None):
    """Read a real symmetric MatrixMarket coordinate file into a :class:`SparseSym`.

    Files declared ``general`` are accepted only if their values turn out to
    be symmetric. Duplicate entries are summed.
    """
    if name is None:
        base = os.path.basename(os.fspath(path))
        name = base.split(".")[0]
    with _open_text(path) as fh:
        header = fh.readline()
        lineno = 1
        parts = header.strip().split()
        if len(parts) != 5 or parts[0].lower() != "%%matrixmarket":
            raise MatrixMarketError("malformed MatrixMarket header", line=1)
        obj, fmt, field, symm = (p.lower() for p in parts[1:])
        if obj != "matrix" or fmt != "coordinate":
            raise MatrixMarketError(f"unsupported format '{obj} {fmt}'", line=1)
        if field not in ("real", "integer", "double"):
            raise MatrixMarketError(f"field '{field}' is not real", line=1)
        if symm not in ("symmetric", "general"):
            raise MatrixMarketError(f"symmetry '{symm}' not supported", line=1)

        size_line = None
        for line in fh:
            lineno += 1
            s = line.strip()
            if not s or s.startswith("%"):
                continue
            size_line = s
            break
        if size_line is None:
            raise MatrixMarketError("missing size line", line=lineno)
        try:
            nrows, ncols, nnz = (int(t) for t in size_line.split())
        except ValueError:
            raise MatrixMarketError(f"bad size line {size_line!r}", line=lineno) from None
        if nrows != ncols:
            raise MatrixMarketError(f"matrix is not square ({nrows}x{ncols})", line=lineno)

        rows = np.empty(nnz, dtype=np.int64)
        cols = np.empty(nnz, dtype=np.int64)
        vals = np.empty(nnz, dtype=float)
        k = 0
        for line in fh:
            lineno += 1
            s = line.strip()
            if not s or s.startswith("%"):
                continue
            if k >= nnz:
                raise MatrixMarketError("more entries than declared", line=lineno)
            tok = s.split()
            if len(tok) != 3:
                raise MatrixMarketError(f"expected 'i j value', got {s!r}", line=lineno)
            try:
                i, j, v = int(tok[0]), int(tok[1]), float(tok[2])
            except ValueError:
                raise MatrixMarketError(f"cannot parse entry {s!r}", line=lineno) from None
            if not (1 <= i <= nrows and 1 <= j <= ncols):
                raise MatrixMarketError(f"index ({i}, {j}) out of range", line=lineno)
            if symm == "symmetric" and j > i:
                # upper-triangle storage: mirror to lower
                i, j = j, i
            rows[k], cols[k], vals[k] = i - 1, j - 1, v
            k += 1
        if k != nnz:
            raise MatrixMarketError(f"expected {nnz} entries, found {k}", line=lineno)

    if symm == "symmetric":
        off = rows != cols
        r = np.concatenate([rows, cols[off]])
        c = np.concatenate([cols, rows[off]])
        v = np.concatenate([vals, vals[off]])
    else:
        r, c, v = rows, cols, vals
    coo = sp.coo_array((v, (r, c)), shape=(nrows, ncols))
    try:
        return SparseSym(coo.tocsr(), name=name)
    except InvalidInputError as exc:
        raise MatrixMarketError(str(exc)) from exc


def write_matrix_market(a, path, comment=None):
    """Write the lower triangle of ``a`` as a symmetric coordinate file."""
    low = sp.tril(a.csr, format="coo")
    order = np.lexsort((low.row, low.col))
    opener = gzip.open if os.fspath(path).endswith(".gz") else open
    with opener(path, "wt") as fh:
        fh.write("%%MatrixMarket matrix coordinate real symmetric\n")
        if comment:
            for line in comment.splitlines():
                fh.write(f"% {line}\n")
        fh.write(f"{a.n} {a.n} {low.nnz}\n")
        for k in order:
            fh.write(f"{low.row[k] + 1} {low.col[k] + 1} {float(low.data[k])!r}\n")


# -- right-hand sides -------------------------------------------------------

@dataclass(frozen=True)
class RhsSpec:
    """How to produce the block right-hand side.

    ``source`` is one of ``"random"`` (i.i.d. uniform(0, 1), no known
    solution), ``"solution"`` (random ``x_true`` and ``b = A x_true``),
    ``"duplicate"`` (random ``b`` whose last column repeats the first) or
    ``"file"`` (``.npy`` or whitespace separated text at ``path``).
    """

    m: int
    source: str = "solution"
    seed: int = 0
    path: Optional[str] = None

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("block width m must be >= 1")
        if self.source not in ("random", "solution", "duplicate", "file"):
            raise ValueError(f"unknown rhs source {self.source!r}")
        if self.source == "file" and not self.path:
            raise ValueError("file rhs needs a path")


def make_rhs(spec, a):
    """Return ``(b, x_true)``; ``x_true`` is ``None`` unless constructed."""
    n, m = a.n, spec.m
    if spec.source == "file":
        path = os.fspath(spec.path)
        b = np.load(path) if path.endswith(".npy") else np.loadtxt(path, ndmin=2)
        b = np.asarray(b, dtype=float).reshape(n, -1)
        if b.shape[1] != m:
            raise DimensionError(f"rhs file has {b.shape[1]} columns, expected {m}")
        return b, None
    rng = make_rng(spec.seed)
    if spec.source == "solution":
        x_true = rng.random((n, m))
        return spmm(a, x_true), x_true
    b = rng.random((n, m))
    if spec.source == "duplicate":
        if m < 2:
            raise ValueError("duplicate-column rhs needs m >= 2")
        b[:, -1] = b[:, 0]
    return b, None


def dense_reference_solution(a, b, refine=2):
    """Dense direct solve with a few steps of extended-precision refinement.

    Used to obtain ``x_true`` for error measurements when ``b`` was drawn at
    random. Residuals are accumulated in ``np.longdouble``.
    """
    ad = a.toarray()
    fac = scipy.linalg.lu_factor(ad)
    x = scipy.linalg.lu_solve(fac, b)
    ad_l = ad.astype(np.longdouble)
    b_l = np.asarray(b, dtype=np.longdouble)
    for _ in range(refine):
        res = b_l - ad_l @ x.astype(np.longdouble)
        x = x + scipy.linalg.lu_solve(fac, res.astype(float))
    return x
