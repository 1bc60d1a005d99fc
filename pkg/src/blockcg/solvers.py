"""Block conjugate gradient variants.

Every variant is split into an ``init_*`` function that builds the solver
state from ``(a, b, x0)`` and a ``*_step`` function that advances the state
by one block iteration and returns a :class:`StepReport`. ``run_solver``
drives either of them until convergence.

Variants:

``ol`` / ``hs``
    O'Leary's block CG with a pluggable scaling ``phi_k``; ``hs`` is the
    choice ``phi_k = I`` and ``ol`` with ``phi_policy="qr"`` orthonormalizes
    each direction block.
``dr``
    Residual-regularized variant (QR of the residual block), split
    preconditioning ``M = L L^T``.
``dp``
    Direction-regularized variant (QR of the direction block), needs only
    ``M^{-1}``.
``bf``
    Breakdown-free variant: like ``dp`` but the direction block is the
    truncated left singular basis, so its width can shrink.
"""
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import BlockCGError, DimensionError, EmptyDirectionError
from .linalg import (
    block_inner,
    householder_qr,
    spd_solve,
    symmetrize,
    tri_solve,
)
from .precond import Preconditioner, build_identity
from .trace import ConvergenceTrace, ErrorMeter, IterationRecord

__all__ = [
    "VARIANTS",
    "SolverConfig",
    "SolverState",
    "OLState",
    "DRState",
    "DPState",
    "StepReport",
    "init_state",
    "ol_bcg_step",
    "dr_bcg_step",
    "dp_bcg_step",
    "bf_bcg_step",
    "step",
    "run_solver",
]

VARIANTS = ("hs", "ol", "dr", "dp", "bf")
# mirrors the "nearly singular" warning threshold of LU/Cholesky based solvers
ILL_COND_WARN = 1.0 / np.finfo(float).eps


@dataclass
class SolverConfig:
    variant: str = "dr"
    max_iters: int = 500
    tol: float = 1e-8
    phi_policy: str = "identity"
    bf_trunc_tol: float = 1e-8
    precond: Optional[Preconditioner] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not 0.0 <= self.tol < 1.0:
            raise ValueError("tol must lie in [0, 1)")
        if self.max_iters < 0:
            raise ValueError("max_iters must be nonnegative")
        if self.phi_policy not in ("identity", "qr"):
            raise ValueError(f"unknown phi_policy {self.phi_policy!r}")
        if not 1e-16 <= self.bf_trunc_tol <= 1e-2:
            raise ValueError("bf_trunc_tol must lie in [1e-16, 1e-2]")
        if self.variant == "hs":
            self.phi_policy = "identity"


@dataclass
class StepReport:
    iteration: int
    residual_norms: np.ndarray
    gram_cond: float = float("nan")
    warnings: List[str] = field(default_factory=list)
    coeffs: dict = field(default_factory=dict)


@dataclass
class SolverState:
    variant: str
    x: np.ndarray
    precond: Preconditioner
    iteration: int = 0
    matvecs: int = 0

    @property
    def m(self):
        return self.x.shape[1]

    def apply(self, a, x):
        """Operator application counted in this run's matvec tally."""
        self.matvecs += x.shape[1]
        return a @ x


@dataclass
class OLState(SolverState):
    r: np.ndarray = None
    z: np.ndarray = None
    p: np.ndarray = None
    gram_r: np.ndarray = None       # r^T M^{-1} r (r^T r unpreconditioned)
    phi: np.ndarray = None
    phi_inv: np.ndarray = None
    phi_policy: str = "identity"


@dataclass
class DRState(SolverState):
    w: np.ndarray = None
    s: np.ndarray = None
    sigma: np.ndarray = None
    zeta: Optional[np.ndarray] = None
    xi: Optional[np.ndarray] = None


@dataclass
class DPState(SolverState):
    r: np.ndarray = None
    z: np.ndarray = None
    p: np.ndarray = None
    psi: np.ndarray = None
    gamma: Optional[np.ndarray] = None
    delta: Optional[np.ndarray] = None
    trunc_tol: Optional[float] = None   # set for the breakdown-free variant


def _cond(g):
    with np.errstate(all="ignore"):
        c = np.linalg.cond(g)
    return float(c) if np.isfinite(c) else float("inf")


def _gram_warnings(name, cond):
    if cond > ILL_COND_WARN:
        return [f"{name} is close to singular (cond {cond:.2e})"]
    return []


def _col_norms(x):
    return np.linalg.norm(x, axis=0)


def _initial_residual(state, a, b):
    if np.any(state.x):
        return b - state.apply(a, state.x)
    return b.copy()


# -- initialization ---------------------------------------------------------

def init_state(variant, a, b, x0=None, precond=None, phi_policy="identity", bf_trunc_tol=None):
    """Build the iteration-0 state and report for ``variant``."""
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        b = b[:, None]
    n, m = b.shape
    if n != a.shape[0]:
        raise DimensionError(f"rhs has {n} rows, matrix is {a.shape}")
    if n < m:
        raise DimensionError("block width exceeds the problem size")
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float).reshape(n, m)
    if precond is None:
        precond = build_identity(n)
    if variant in ("hs", "ol"):
        return _init_ol(a, b, x, precond, "identity" if variant == "hs" else phi_policy, variant)
    if variant == "dr":
        return _init_dr(a, b, x, precond)
    if variant in ("dp", "bf"):
        return _init_dp(a, b, x, precond, variant, bf_trunc_tol)
    raise ValueError(f"unknown variant {variant!r}")


def _init_ol(a, b, x, precond, phi_policy, variant):
    st = OLState(variant, x, precond, phi_policy=phi_policy)
    st.r = _initial_residual(st, a, b)
    st.z = precond.apply_inv(st.r)
    st.gram_r = block_inner(st.r, st.z) if not precond.is_identity else block_inner(st.r)
    st.gram_r = symmetrize(st.gram_r)
    m = b.shape[1]
    if phi_policy == "qr":
        q, rf = householder_qr(st.z)
        st.phi = tri_solve(rf, np.eye(m))
        st.phi_inv = rf
        st.p = q
    else:
        st.phi = np.eye(m)
        st.phi_inv = np.eye(m)
        st.p = st.z.copy()
    rep = StepReport(0, _col_norms(st.r), coeffs={"gram_r": st.gram_r, "phi": st.phi})
    return st, rep


def _init_dr(a, b, x, precond):
    st = DRState("dr", x, precond)
    r0 = _initial_residual(st, a, b)
    st.w, st.sigma = householder_qr(precond.solve_lower(r0))
    st.s = precond.solve_upper(st.w)
    rep = StepReport(0, _dr_residual_norms(st), coeffs={"sigma": st.sigma})
    return st, rep


def _init_dp(a, b, x, precond, variant, trunc_tol):
    st = DPState(variant, x, precond)
    st.r = _initial_residual(st, a, b)
    st.z = precond.apply_inv(st.r)
    if variant == "bf":
        if trunc_tol is None:
            raise ValueError("bf variant needs a truncation tolerance")
        st.trunc_tol = trunc_tol
        st.p, st.psi = _truncated_basis(st.z, trunc_tol, st.z.shape[1])
    else:
        st.p, st.psi = householder_qr(st.z)
    cross = st.p.T @ st.r
    rep = StepReport(0, _col_norms(st.r), coeffs={"psi": st.psi, "cross": cross})
    return st, rep


# -- steps ------------------------------------------------------------------

def ol_bcg_step(state, a, phi_policy=None):
    """One iteration of O'Leary's block CG with scaling policy ``phi_policy``.

    ``phi_policy="identity"`` is the Hestenes-Stiefel form; ``"qr"`` scales the
    new direction block by the inverse R factor of its QR factorization.
    """
    st = state
    policy = phi_policy or st.phi_policy
    m = st.m
    ap = st.apply(a, st.p)
    pap = symmetrize(st.p.T @ ap)
    cond = _cond(pap)
    phi_prev, phi_prev_inv, gram_prev = st.phi, st.phi_inv, st.gram_r

    gamma = spd_solve(pap, phi_prev.T @ gram_prev)
    st.x = st.x + st.p @ gamma
    st.r = st.r - ap @ gamma
    st.z = st.precond.apply_inv(st.r)
    gram = block_inner(st.r) if st.precond.is_identity else symmetrize(block_inner(st.r, st.z))
    delta = phi_prev_inv @ spd_solve(gram_prev, gram)
    u = st.z + st.p @ delta
    if policy == "qr":
        q, rf = householder_qr(u)
        st.phi = tri_solve(rf, np.eye(m))
        st.phi_inv = rf
        st.p = q
    else:
        st.phi = np.eye(m)
        st.phi_inv = np.eye(m)
        st.p = u
    st.gram_r = gram
    st.iteration += 1
    return StepReport(
        st.iteration,
        _col_norms(st.r),
        gram_cond=cond,
        warnings=_gram_warnings("p^T A p", cond),
        coeffs={
            "gamma": gamma,
            "delta": delta,
            "phi": phi_prev,
            "phi_inv": phi_prev_inv,
            "gram_r": gram,
            "gram_r_prev": gram_prev,
            "pap": pap,
        },
    )


def _dr_residual_norms(st):
    # r_k = L w_k sigma_k; w_k has orthonormal columns
    if st.precond.is_identity:
        return _col_norms(st.sigma)
    return _col_norms(st.precond.apply_lower(st.w @ st.sigma))


def dr_bcg_step(state, a, precond=None):
    """One iteration of the residual-regularized variant.

    Only ``s^T A s`` is ever inverted; ``sigma_k`` may be singular.
    """
    st = state
    pc = precond or st.precond
    m = st.m
    as_ = st.apply(a, st.s)
    sas = symmetrize(st.s.T @ as_)
    cond = _cond(sas)
    xi = spd_solve(sas, np.eye(m))
    st.x = st.x + st.s @ (xi @ st.sigma)
    st.w, zeta = householder_qr(st.w - pc.solve_lower(as_ @ xi))
    st.s = pc.solve_upper(st.w) + st.s @ zeta.T
    st.sigma = zeta @ st.sigma
    st.zeta, st.xi = zeta, xi
    st.iteration += 1
    return StepReport(
        st.iteration,
        _dr_residual_norms(st),
        gram_cond=cond,
        warnings=_gram_warnings("s^T A s", cond),
        coeffs={"xi": xi, "zeta": zeta, "sas": sas, "sigma": st.sigma},
    )


def _truncated_basis(u, tol, max_width):
    """Left singular vectors of ``u`` with ``s_i / s_max > tol`` (at most ``max_width``)."""
    uu, s, vt = np.linalg.svd(u, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        raise EmptyDirectionError("direction block vanished")
    keep = int(np.count_nonzero(s / s[0] > tol))
    keep = min(keep, max_width)
    if keep == 0:
        raise EmptyDirectionError("all singular values truncated")
    # psi plays the role of the R factor: u ~= p @ psi
    psi = s[:keep, None] * vt[:keep]
    return uu[:, :keep], psi


def _dp_common(st, a):
    ap = st.apply(a, st.p)
    pap = symmetrize(st.p.T @ ap)
    cond = _cond(pap)
    # p^T r, not p^T z: equal without preconditioning, and only p^T r keeps
    # the iterates on the preconditioned CG path when M != I
    gamma = spd_solve(pap, st.p.T @ st.r)
    st.x = st.x + st.p @ gamma
    st.r = st.r - ap @ gamma
    st.z = st.precond.apply_inv(st.r)
    az = st.apply(a, st.z)
    delta = -spd_solve(pap, st.p.T @ az)
    return gamma, delta, pap, cond


def dp_bcg_step(state, a, precond=None):
    """One iteration of the direction-regularized variant (``M^{-1}`` only)."""
    st = state
    if precond is not None:
        st.precond = precond
    psi_prev = st.psi
    gamma, delta, pap, cond = _dp_common(st, a)
    st.p, st.psi = householder_qr(st.z + st.p @ delta)
    st.gamma, st.delta = gamma, delta
    st.iteration += 1
    return StepReport(
        st.iteration,
        _col_norms(st.r),
        gram_cond=cond,
        warnings=_gram_warnings("p^T A p", cond),
        coeffs={
            "gamma": gamma,
            "delta": delta,
            "psi_prev": psi_prev,
            "psi": st.psi,
            "cross": st.p.T @ st.r,
            "pap": pap,
        },
    )


def bf_bcg_step(state, a, precond=None, trunc_tol=None):
    """One iteration of the breakdown-free variant.

    The new direction block spans the left singular vectors of
    ``z_k + p_{k-1} delta_k`` whose relative singular value exceeds
    ``trunc_tol``; its width never grows.
    """
    st = state
    if precond is not None:
        st.precond = precond
    tol = trunc_tol if trunc_tol is not None else st.trunc_tol
    width = st.p.shape[1]
    gamma, delta, pap, cond = _dp_common(st, a)
    st.p, st.psi = _truncated_basis(st.z + st.p @ delta, tol, width)
    st.gamma, st.delta = gamma, delta
    st.iteration += 1
    warnings = _gram_warnings("p^T A p", cond)
    if st.p.shape[1] < width:
        warnings.append(f"direction block shrank from {width} to {st.p.shape[1]} columns")
    return StepReport(
        st.iteration,
        _col_norms(st.r),
        gram_cond=cond,
        warnings=warnings,
        coeffs={"gamma": gamma, "delta": delta, "psi": st.psi, "width": st.p.shape[1]},
    )


def step(state, a):
    """Advance ``state`` by one iteration of its own variant."""
    if state.variant in ("hs", "ol"):
        return ol_bcg_step(state, a)
    if state.variant == "dr":
        return dr_bcg_step(state, a)
    if state.variant == "dp":
        return dp_bcg_step(state, a)
    return bf_bcg_step(state, a)


# -- driver -----------------------------------------------------------------

def run_solver(config, a, b, x0=None, x_true=None, callbacks: Sequence[Callable] = (), meta=None):
    """Iterate until every column's relative residual is below ``config.tol``.

    Each callback is called as ``cb(state, report)`` after initialization
    (``report.iteration == 0``) and after every step. Solver failures
    (singular Gram matrices, empty direction blocks) end the run and are
    recorded in the returned trace; they are not raised.
    """
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        b = b[:, None]
    bnorm = _col_norms(b)
    bnorm = np.where(bnorm > 0, bnorm, 1.0)
    info = {
        "variant": config.variant,
        "n": int(b.shape[0]),
        "m": int(b.shape[1]),
        "tol": config.tol,
        "max_iters": config.max_iters,
        "precond": config.precond.kind if config.precond is not None else "identity",
    }
    if config.variant == "ol":
        info["phi_policy"] = config.phi_policy
    if config.variant == "bf":
        info["bf_trunc_tol"] = config.bf_trunc_tol
    info.update(meta or {})
    trace = ConvergenceTrace(meta=info)
    meter = ErrorMeter(a, x_true) if x_true is not None else None

    t0 = time.perf_counter()

    def record(state, rep):
        omega = aerr = None
        if meter is not None:
            omega, aerr = meter(state.x)
        trace.records.append(
            IterationRecord(
                iteration=rep.iteration,
                omega=omega,
                relres=rep.residual_norms / bnorm,
                anorm_err=aerr,
                matvecs=state.matvecs,
                wall_time=time.perf_counter() - t0,
                gram_cond=rep.gram_cond,
                warnings=list(rep.warnings),
            )
        )
        for cb in callbacks:
            cb(state, rep)

    try:
        state, rep = init_state(
            config.variant, a, b, x0, config.precond, config.phi_policy, config.bf_trunc_tol
        )
    except BlockCGError as exc:
        trace.fail(0, exc)
        return trace
    trace.state = state
    record(state, rep)
    while True:
        if np.all(trace.records[-1].relres <= config.tol):
            trace.termination = "converged"
            break
        if state.iteration >= config.max_iters:
            trace.termination = "max_iters"
            break
        x_last = state.x
        try:
            rep = step(state, a)
        except BlockCGError as exc:
            trace.fail(state.iteration + 1, exc)
            state.x = x_last
            break
        record(state, rep)
    trace.x = state.x
    return trace
