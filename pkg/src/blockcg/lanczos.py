"""Block Lanczos tridiagonalization and block tridiagonal containers."""
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import DimensionError
from .linalg import block_inner, cholesky_upper, householder_qr, symmetrize

__all__ = [
    "BlockTridiag",
    "LanczosBasis",
    "LanczosResult",
    "block_lanczos",
    "verify_lanczos_relation",
    "densify",
    "BREAKDOWN_RTOL",
]

BREAKDOWN_RTOL = 1e-12


@dataclass
class BlockTridiag:
    """Symmetric block tridiagonal ``T_k``.

    ``alphas`` holds the ``k`` diagonal blocks, ``betas`` the ``k - 1``
    subdiagonal blocks ``beta_2 .. beta_k``. ``beta_next`` is the trailing
    ``beta_{k+1}`` coupling ``T_k`` to the next block, when known.
    """

    m: int
    beta1: Optional[np.ndarray] = None
    alphas: List[np.ndarray] = field(default_factory=list)
    betas: List[np.ndarray] = field(default_factory=list)
    beta_next: Optional[np.ndarray] = None

    @property
    def k(self):
        return len(self.alphas)

    def append(self, alpha, beta_next):
        """Add ``alpha_k`` and the freshly computed ``beta_{k+1}``."""
        if self.beta_next is not None and self.alphas:
            self.betas.append(self.beta_next)
        self.alphas.append(symmetrize(np.asarray(alpha, dtype=float)))
        self.beta_next = beta_next

    def truncated(self, k):
        """Leading ``k`` block rows/columns as a new object."""
        if not 1 <= k <= self.k:
            raise ValueError(f"cannot truncate T_{self.k} to {k} blocks")
        nxt = self.betas[k - 1] if k < self.k else self.beta_next
        return BlockTridiag(self.m, self.beta1, list(self.alphas[:k]), list(self.betas[:k - 1]), nxt)

    def dense(self):
        return densify(self)


@dataclass
class LanczosBasis:
    blocks: List[np.ndarray] = field(default_factory=list)

    def matrix(self, k=None):
        """``V_k = [v_1, ..., v_k]``; all stored blocks by default."""
        blocks = self.blocks if k is None else self.blocks[:k]
        return np.hstack(blocks)


@dataclass
class LanczosResult:
    tridiag: BlockTridiag
    basis: Optional[LanczosBasis]
    steps: int
    breakdown: bool


def densify(t):
    """Assemble the dense ``km x km`` symmetric matrix of a :class:`BlockTridiag`."""
    m, k = t.m, t.k
    out = np.zeros((k * m, k * m))
    for j, a in enumerate(t.alphas):
        out[j * m:(j + 1) * m, j * m:(j + 1) * m] = a
    for j, b in enumerate(t.betas[:k - 1]):
        lo, hi = (j + 1) * m, (j + 2) * m
        out[lo:hi, j * m:(j + 1) * m] = b
        out[j * m:(j + 1) * m, lo:hi] = b.T
    return out


def _matvec(a, x):
    return a @ x


def block_lanczos(a, v, k_max, orthog="mgs", keep_basis=False):
    """Run ``k_max`` steps of block Lanczos from the starting block ``v``.

    ``orthog`` selects how ``alpha_k`` is formed: ``"mgs"`` (from the partially
    orthogonalized block), ``"classical"`` (``v_k^T A v_k``) or ``"full"``
    (MGS plus two passes of reorthogonalization against every previous
    block). Stops early and flags a breakdown when ``beta_{k+1}`` becomes
    numerically singular.
    """
    if orthog not in ("mgs", "classical", "full"):
        raise ValueError(f"unknown orthogonalization {orthog!r}")
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    n, m = v.shape
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if k_max * m > n:
        raise DimensionError(f"k_max * m = {k_max * m} exceeds n = {n}")

    # rank check on the starting block; raises SingularGramError
    cholesky_upper(block_inner(v))
    v1, beta1 = householder_qr(v)

    t = BlockTridiag(m, beta1=beta1)
    keep = keep_basis or orthog == "full"
    blocks = [v1]
    v_prev, v_cur = None, v1
    beta_cur = None
    breakdown = False
    steps = 0
    for _ in range(k_max):
        av = _matvec(a, v_cur)
        if orthog == "classical":
            alpha = v_cur.T @ av
        w = av if v_prev is None else av - v_prev @ beta_cur.T
        if orthog != "classical":
            alpha = v_cur.T @ w
        alpha = symmetrize(alpha)
        w = w - v_cur @ alpha
        if orthog == "full":
            basis = np.hstack(blocks)
            for _ in range(2):
                w = w - basis @ (basis.T @ w)
        v_next, beta_next = householder_qr(w)
        t.append(alpha, beta_next)
        steps += 1
        d = np.abs(np.diag(beta_next))
        ref = max(d.max(), np.linalg.norm(alpha))
        if d.min() <= BREAKDOWN_RTOL * ref:
            breakdown = True
            if keep:
                blocks.append(v_next)
            break
        if keep:
            blocks.append(v_next)
        v_prev, v_cur, beta_cur = v_cur, v_next, beta_next
        if not keep:
            blocks = [v_cur]
    basis = LanczosBasis(blocks) if keep_basis else None
    return LanczosResult(t, basis, steps, breakdown)


def verify_lanczos_relation(a, basis, t):
    """Relative residual of ``A V_k = V_k T_k + v_{k+1} beta_{k+1} e_k^T``.

    Normalized by the Frobenius norm of ``A``.
    """
    k, m = t.k, t.m
    vk = basis.matrix(k)
    if len(basis.blocks) < k + 1:
        raise ValueError("basis must contain v_{k+1}")
    v_next = basis.blocks[k]
    res = _matvec(a, vk) - vk @ densify(t)
    res[:, (k - 1) * m:] -= v_next @ t.beta_next
    anorm = a.norm_fro() if hasattr(a, "norm_fro") else np.linalg.norm(a)
    return float(np.linalg.norm(res) / anorm)
