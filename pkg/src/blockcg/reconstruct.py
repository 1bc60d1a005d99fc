"""Block Lanczos coefficients recovered from inside the block CG variants.

The recurrences consume only quantities the solvers already compute (the
CG coefficients, the QR factors and small Gram matrices), so no operator
applications are added. ``JacobiRecorder`` wires them up as a per-step
callback for :func:`blockcg.solvers.run_solver`.

The second half of the module holds independent oracles: the residual
three-term relation with its coefficient matrix ``T_hat``, the normalized
residual matrix ``T_tilde`` with its unitary similarity to ``T_k``, and the
Galerkin solution ``x_0 + V_k Y_k``.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.linalg

from .errors import BlockCGError, SingularGramError
from .lanczos import BlockTridiag, LanczosBasis, densify
from .linalg import cholesky_upper, householder_qr, spd_solve, symmetrize, tri_solve

__all__ = [
    "LdlFactors",
    "ReconState",
    "recon_init",
    "recon_ol_step",
    "recon_dr_step",
    "check_residual_rank",
    "recon_dp_step",
    "lanczos_block",
    "JacobiRecorder",
    "CoefficientHistory",
    "assemble_that_oracle",
    "residual_recurrence_defect",
    "assemble_ttilde_oracle",
    "verify_unitary_similarity_oracle",
    "galerkin_solution_oracle",
]

log = logging.getLogger(__name__)

THETA_DRIFT_TOL = 1e-10


@dataclass
class LdlFactors:
    """Block ``L_k D_k L_k^T``: ``ells`` are the subdiagonal blocks of the unit
    lower bidiagonal factor, ``ds`` the diagonal blocks of ``D_k``."""

    m: int
    ells: List[np.ndarray] = field(default_factory=list)
    ds: List[np.ndarray] = field(default_factory=list)

    @property
    def k(self):
        return len(self.ds)

    def dense_l(self):
        m, k = self.m, self.k
        out = np.eye(k * m)
        for j, ell in enumerate(self.ells[:k - 1]):
            out[(j + 1) * m:(j + 2) * m, j * m:(j + 1) * m] = ell
        return out

    def dense_d(self):
        return scipy.linalg.block_diag(*self.ds) if self.ds else np.zeros((0, 0))

    def product(self):
        lo = self.dense_l()
        return lo @ self.dense_d() @ lo.T


@dataclass
class ReconState:
    m: int
    sigma: np.ndarray
    theta: np.ndarray
    ell: np.ndarray
    beta: np.ndarray
    tridiag: BlockTridiag
    ldl: LdlFactors
    steps: int = 0
    active: bool = True
    halt_reason: Optional[str] = None
    blocks: Optional[List[np.ndarray]] = None

    def halt(self, reason):
        self.active = False
        self.halt_reason = reason
        log.info("reconstruction stopped after %d steps: %s", self.steps, reason)


def recon_init(sigma0, keep_blocks=False):
    """``beta_1 = sigma_0``, ``theta_0 = I``, ``ell_0 = 0``."""
    sigma0 = np.asarray(sigma0, dtype=float)
    m = sigma0.shape[0]
    return ReconState(
        m=m,
        sigma=sigma0,
        theta=np.eye(m),
        ell=np.zeros((m, m)),
        beta=sigma0,
        tridiag=BlockTridiag(m, beta1=sigma0),
        ldl=LdlFactors(m),
        blocks=[] if keep_blocks else None,
    )


def _reorthonormalize(theta):
    if np.linalg.norm(theta.T @ theta - np.eye(theta.shape[0])) > THETA_DRIFT_TOL:
        theta, _ = householder_qr(theta)
    return theta


def _extend(recon, d, alpha, theta, beta_next, ell, sigma=None):
    recon.tridiag.append(alpha, beta_next)
    recon.ldl.ds.append(symmetrize(d))
    recon.ldl.ells.append(ell)
    recon.theta = _reorthonormalize(theta)
    recon.beta = beta_next
    recon.ell = ell
    if sigma is not None:
        recon.sigma = sigma
    recon.steps += 1


def _sigma_update(recon, tau, sigma_new, siginv_theta):
    """Shared tail of the residual-based recurrences (HS/OL and DP forms)."""
    theta_new, beta_next = householder_qr(sigma_new @ tau)
    ell = theta_new.T @ sigma_new @ siginv_theta
    return theta_new, beta_next, ell


def recon_ol_step(recon, gamma, phi, gram_r, phi_inv=None):
    """Advance the reconstruction by one step of O'Leary's block CG.

    ``gamma`` and ``phi`` are ``gamma_{j-1}``, ``phi_{j-1}``; ``gram_r`` is
    ``r_j^T r_j``.
    """
    if not recon.active:
        return recon
    if phi_inv is None:
        phi_inv = np.linalg.inv(phi)
    siginv_theta = tri_solve(recon.sigma, recon.theta)
    tau = np.linalg.solve(gamma, phi_inv @ siginv_theta)
    d = recon.theta.T @ recon.sigma @ tau
    alpha = d + recon.ell @ recon.beta.T
    try:
        sigma_new = cholesky_upper(gram_r)
    except SingularGramError as exc:
        recon.tridiag.append(alpha, None)
        recon.ldl.ds.append(symmetrize(d))
        recon.steps += 1
        recon.halt(f"r^T r singular: {exc}")
        return recon
    theta_new, beta_next, ell = _sigma_update(recon, tau, sigma_new, siginv_theta)
    _extend(recon, d, alpha, theta_new, beta_next, ell, sigma=sigma_new)
    return recon


def check_residual_rank(sigma):
    """Raise :class:`SingularGramError` if ``sigma`` (an R factor of a residual
    block) is rank deficient, using the same pivot test as ``r^T r``."""
    cholesky_upper(symmetrize(sigma.T @ sigma))


def recon_dr_step(recon, xi, zeta, sas=None, sigma=None):
    """One step for the residual-regularized variant.

    ``sas`` may pass ``xi^{-1} = s^T A s`` directly. ``sigma`` is never
    inverted; if the updated ``sigma_k`` is given it is only tested for rank,
    and reconstruction stops once the residual block loses rank.
    """
    if not recon.active:
        return recon
    tau = (sas @ recon.theta) if sas is not None else spd_solve(xi, recon.theta)
    d = recon.theta.T @ tau
    alpha = d + recon.ell @ recon.beta.T
    if sigma is not None:
        try:
            check_residual_rank(sigma)
        except SingularGramError as exc:
            recon.tridiag.append(alpha, None)
            recon.ldl.ds.append(symmetrize(d))
            recon.steps += 1
            recon.halt(f"residual block rank deficient: {exc}")
            return recon
    theta_new, beta_next = householder_qr(zeta @ tau)
    ell = theta_new.T @ zeta @ recon.theta
    _extend(recon, d, alpha, theta_new, beta_next, ell)
    return recon


def recon_dp_step(recon, gamma, psi_prev, psi, cross):
    """One step for the direction-regularized variant.

    ``cross`` is ``p_k^T r_k`` so that ``psi_k^T cross = r_k^T r_k``.
    """
    if not recon.active:
        return recon
    siginv_theta = tri_solve(recon.sigma, recon.theta)
    tau = np.linalg.solve(gamma, psi_prev @ siginv_theta)
    d = recon.theta.T @ recon.sigma @ tau
    alpha = d + recon.ell @ recon.beta.T
    try:
        sigma_new = cholesky_upper(symmetrize(psi.T @ cross))
    except SingularGramError as exc:
        recon.tridiag.append(alpha, None)
        recon.ldl.ds.append(symmetrize(d))
        recon.steps += 1
        recon.halt(f"residual block rank deficient: {exc}")
        return recon
    theta_new, beta_next, ell = _sigma_update(recon, tau, sigma_new, siginv_theta)
    _extend(recon, d, alpha, theta_new, beta_next, ell, sigma=sigma_new)
    return recon


def lanczos_block(recon, residual_or_w, k, regularized=False):
    """Lanczos block ``v_{k+1}`` after ``k`` reconstruction steps.

    With ``regularized=True`` the argument is the orthonormal ``w_k`` of the
    residual-regularized variant and ``v_{k+1} = (-1)^k w_k theta_k^{-T}``;
    otherwise it is ``r_k`` and ``v_{k+1} = (-1)^k r_k sigma_k^{-1} theta_k^{-T}``.
    """
    if recon.steps != k:
        raise ValueError(f"reconstruction is at step {recon.steps}, asked for k={k}")
    sign = -1.0 if k % 2 else 1.0
    # theta_k is orthogonal, so theta_k^{-T} = theta_k
    if regularized:
        return sign * (residual_or_w @ recon.theta)
    return sign * (tri_solve(recon.sigma, residual_or_w, side="right") @ recon.theta)


class JacobiRecorder:
    """Run-time callback building ``T_k`` and its block LDL^T factors.

    Pass an instance in ``callbacks`` of :func:`run_solver`. Reconstruction
    stops (without stopping the solver) when a residual block becomes rank
    deficient.
    """

    def __init__(self, keep_blocks=False):
        self.keep_blocks = keep_blocks
        self.recon = None
        self.variant = None

    @property
    def tridiag(self):
        return self.recon.tridiag

    @property
    def ldl(self):
        return self.recon.ldl

    def _initial_sigma(self, state, rep):
        if self.variant in ("hs", "ol"):
            return cholesky_upper(state.gram_r)
        if self.variant == "dr":
            check_residual_rank(state.sigma)
            return state.sigma
        if state.precond.is_identity:
            return state.psi
        return cholesky_upper(symmetrize(state.psi.T @ rep.coeffs["cross"]))

    def _store_block(self, state):
        rc = self.recon
        if rc.blocks is None or not rc.active:
            return
        try:
            if self.variant == "dr":
                rc.blocks.append(lanczos_block(rc, state.w, rc.steps, regularized=True))
            else:
                # preconditioned runs: the Lanczos vectors live in L^{-1} space
                r = state.r if state.precond.is_identity else state.precond.solve_lower(state.r)
                rc.blocks.append(lanczos_block(rc, r, rc.steps))
        except BlockCGError:
            pass

    def __call__(self, state, rep):
        if rep.iteration == 0:
            self.variant = state.variant
            if self.variant == "bf":
                raise ValueError("Jacobi reconstruction is not defined for the bf variant")
            try:
                sigma0 = self._initial_sigma(state, rep)
            except SingularGramError as exc:
                self.recon = recon_init(np.zeros((state.m, state.m)), self.keep_blocks)
                self.recon.halt(f"initial residual rank deficient: {exc}")
                return
            self.recon = recon_init(sigma0, self.keep_blocks)
            self._store_block(state)
            return
        rc = self.recon
        if not rc.active:
            return
        c = rep.coeffs
        try:
            if self.variant in ("hs", "ol"):
                recon_ol_step(rc, c["gamma"], c["phi"], c["gram_r"], phi_inv=c["phi_inv"])
            elif self.variant == "dr":
                recon_dr_step(rc, c["xi"], c["zeta"], sas=c["sas"], sigma=c["sigma"])
            else:
                recon_dp_step(rc, c["gamma"], c["psi_prev"], c["psi"], c["cross"])
        except (BlockCGError, np.linalg.LinAlgError) as exc:
            rc.halt(str(exc))
            return
        self._store_block(state)

    def basis(self):
        return LanczosBasis(list(self.recon.blocks or []))


class CoefficientHistory:
    """Callback keeping the per-step coefficients and residual blocks."""

    def __init__(self, keep_residuals=True):
        self.keep_residuals = keep_residuals
        self.coeffs = []
        self.residuals = []

    def __call__(self, state, rep):
        self.coeffs.append(dict(rep.coeffs))
        if self.keep_residuals and hasattr(state, "r") and state.r is not None:
            self.residuals.append(state.r.copy())

    def series(self, key, start=1):
        return [c[key] for c in self.coeffs[start:]]


# -- oracles ----------------------------------------------------------------

def _inv(a):
    return np.linalg.inv(a)


def assemble_that_oracle(gammas, deltas, phis, form="direct"):
    """Block tridiagonal ``T_hat_k`` of the residual three-term relation.

    ``gammas = [gamma_0 .. gamma_{k-1}]``, ``phis = [phi_0 .. phi_{k-1}]``,
    ``deltas = [delta_1 .. delta_{k-1}]`` (extra trailing entries ignored).
    ``form="factored"`` builds it as the product of a unit lower bidiagonal,
    a block diagonal of ``gamma^{-1} phi^{-1}`` and a unit upper bidiagonal
    with ``-phi delta`` blocks.
    """
    k = len(gammas)
    if k < 1:
        raise ValueError("need at least one step")
    m = np.shape(gammas[0])[0]
    gp = [_inv(g) @ _inv(p) for g, p in zip(gammas, phis)]
    out = np.zeros((k * m, k * m))

    def blk(i, j):
        return (slice(i * m, (i + 1) * m), slice(j * m, (j + 1) * m))

    if form == "direct":
        for i in range(k):
            diag = gp[i].copy()
            if i > 0:
                diag += _inv(gammas[i - 1]) @ deltas[i - 1]
            out[blk(i, i)] = diag
            if i + 1 < k:
                out[blk(i, i + 1)] = -_inv(gammas[i]) @ deltas[i]
                out[blk(i + 1, i)] = -gp[i]
        return out
    if form == "factored":
        lo = np.eye(k * m)
        up = np.eye(k * m)
        for i in range(k - 1):
            lo[blk(i + 1, i)] = -np.eye(m)
            up[blk(i, i + 1)] = -phis[i] @ deltas[i]
        return lo @ scipy.linalg.block_diag(*gp) @ up
    raise ValueError(f"unknown form {form!r}")


def residual_recurrence_defect(a, residuals, gammas, deltas, phis):
    """``||A R_k - R_k T_hat_k + r_k gamma_{k-1}^{-1} phi_{k-1}^{-1} e_k^T||_F``.

    ``residuals = [r_0 .. r_k]``. Returns ``(deviation, ||R_k||_F)``.
    """
    k = len(gammas)
    rk_mat = np.hstack(residuals[:k])
    m = residuals[0].shape[1]
    t_hat = assemble_that_oracle(gammas, deltas, phis)
    res = a @ rk_mat - rk_mat @ t_hat
    res[:, (k - 1) * m:] += residuals[k] @ _inv(gammas[k - 1]) @ _inv(phis[k - 1])
    return float(np.linalg.norm(res)), float(np.linalg.norm(rk_mat))


def assemble_ttilde_oracle(gammas, deltas, phis, rhos):
    """Dense ``T_tilde_k`` of the normalized residual blocks and its ``beta_tilde``.

    ``rhos = [rho_0 .. rho_{k-1}]`` (``rho_k`` optional, then the trailing
    ``beta_tilde_{k+1}`` is returned too). The lower blocks come from the
    ``phi`` form and the upper blocks independently from the ``delta`` form,
    so symmetry is a check rather than an assumption.

    Returns ``(T_tilde, [beta_tilde_2, ...])``.
    """
    k = len(gammas)
    m = np.shape(gammas[0])[0]
    ginv = [_inv(g) for g in gammas]
    pinv = [_inv(p) for p in phis]
    rinv = [_inv(r) for r in rhos]
    out = np.zeros((k * m, k * m))
    btil = []

    def blk(i, j):
        return (slice(i * m, (i + 1) * m), slice(j * m, (j + 1) * m))

    for j in range(k):
        a = rhos[j] @ ginv[j] @ pinv[j] @ rinv[j]
        if j > 0:
            a = a + rhos[j] @ ginv[j - 1] @ deltas[j - 1] @ rinv[j]
        out[blk(j, j)] = a
    for j in range(1, min(k + 1, len(rhos))):
        b = rhos[j] @ ginv[j - 1] @ pinv[j - 1] @ rinv[j - 1]
        btil.append(b)
        if j < k:
            out[blk(j, j - 1)] = b
            out[blk(j - 1, j)] = rhos[j - 1] @ ginv[j - 1] @ deltas[j - 1] @ rinv[j]
    return out, btil


def verify_unitary_similarity_oracle(t_lanczos, t_tilde, beta_tildes):
    """Max entrywise deviation between ``U_k^T T_tilde_k U_k`` and ``T_k``.

    ``U_k = diag(eta_1, ..., eta_k)`` with ``eta_1 = I`` and
    ``[eta_{j+1}, .] = qr(beta_tilde_{j+1} eta_j)``.
    """
    m, k = t_lanczos.m, t_lanczos.k
    etas = [np.eye(m)]
    for j in range(k - 1):
        eta, _ = householder_qr(beta_tildes[j] @ etas[-1])
        etas.append(eta)
    u = scipy.linalg.block_diag(*etas)
    tt = np.asarray(t_tilde)[: k * m, : k * m]
    return float(np.max(np.abs(u.T @ tt @ u - densify(t_lanczos))))


def galerkin_solution_oracle(t, basis, x0, beta1):
    """``x_0 + V_k Y_k`` with ``T_k Y_k = E_1 beta_1``."""
    k, m = t.k, t.m
    vk = basis.matrix(k)
    rhs = np.zeros((k * m, m))
    rhs[:m] = beta1
    tk = densify(t)
    y = scipy.linalg.solve(tk, rhs, assume_a="sym")
    return np.asarray(x0, dtype=float) + vk @ y
