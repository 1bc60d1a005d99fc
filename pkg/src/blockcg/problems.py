"""Seeded test matrices for desk-scale experiments."""
import numpy as np
import scipy.sparse as sp

from .sparse import SparseSym, make_rng

__all__ = ["random_spd", "laplacian_1d", "poisson_2d", "spectrum"]


def spectrum(n, cond, kind="logspaced"):
    if kind == "logspaced":
        return np.logspace(0.0, np.log10(cond), n)
    if kind == "linear":
        return np.linspace(1.0, cond, n)
    raise ValueError(f"unknown spectrum {kind!r}")


def random_spd(n, cond=1e4, seed=0, kind="logspaced", name=None):
    """Dense SPD matrix ``Q diag(lambda) Q^T`` with a prescribed spectrum.

    ``Q`` is the orthogonal factor of a seeded Gaussian matrix, so the
    condition number is exactly ``cond`` up to rounding.
    """
    rng = make_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = spectrum(n, cond, kind)
    a = (q * lam) @ q.T
    a = 0.5 * (a + a.T)
    return SparseSym.from_dense(a, name=name or f"randspd_n{n}_c{cond:g}_s{seed}")


def laplacian_1d(n):
    a = sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1])
    return SparseSym(sp.csr_array(a), name=f"lap1d_{n}")


def poisson_2d(nx):
    """Five-point Laplacian on an ``nx x nx`` grid."""
    t = sp.diags([-np.ones(nx - 1), 2 * np.ones(nx), -np.ones(nx - 1)], [-1, 0, 1])
    eye = sp.identity(nx)
    a = sp.kron(eye, t) + sp.kron(t, eye)
    return SparseSym(sp.csr_array(a), name=f"poisson2d_{nx}")
