import inspect
import re

import numpy as np
import pytest

from blockcg import solvers
from blockcg.errors import EmptyDirectionError
from blockcg.precond import build_ic, build_jacobi
from blockcg.problems import poisson_2d, random_spd
from blockcg.solvers import SolverConfig, init_state, run_solver, step
from blockcg.sparse import RhsSpec, make_rhs, make_rng


def _iterates(variant, a, b, k, precond=None, phi_policy="identity", x0=None):
    st, _ = init_state(variant, a, b, x0, precond, phi_policy, 1e-12)
    out = []
    for _ in range(k):
        step(st, a)
        out.append(st.x.copy())
    return out


@pytest.mark.parametrize("m", [1, 2, 4])
@pytest.mark.parametrize("pc", ["none", "jacobi", "ic"])
def test_variants_agree(m, pc):
    a = random_spd(150, 1e4, seed=10 + m, kind="linear") if pc != "ic" else poisson_2d(12)
    b, _ = make_rhs(RhsSpec(m=m, seed=m), a)
    precond = {"none": None, "jacobi": build_jacobi(a), "ic": build_ic(a)}[pc]
    runs = {
        "hs": _iterates("hs", a, b, 15, precond),
        "ol-qr": _iterates("ol", a, b, 15, precond, phi_policy="qr"),
        "dr": _iterates("dr", a, b, 15, precond),
        "dp": _iterates("dp", a, b, 15, precond),
        "bf": _iterates("bf", a, b, 15, precond),
    }
    ref = runs["hs"]
    for name, xs in runs.items():
        for k, (x, y) in enumerate(zip(xs, ref)):
            assert np.linalg.norm(x - y) <= 1e-8 * np.linalg.norm(y), (name, k)


@pytest.mark.parametrize("variant", ["hs", "dr", "dp", "bf", "ol"])
def test_anorm_error_monotone_per_column(variant):
    a = random_spd(120, 1e3, seed=3, kind="linear")
    b, x = make_rhs(RhsSpec(m=3, seed=5), a)
    tr = run_solver(SolverConfig(variant=variant, max_iters=60, tol=1e-12), a, b, x_true=x)
    errs = np.array([r.anorm_err for r in tr.records])
    assert np.all(errs[1:] <= errs[:-1] * (1 + 1e-12) + 1e-12 * errs[0])


@pytest.mark.parametrize("variant", ["hs", "dp", "dr"])
def test_local_orthogonality(variant):
    a = random_spd(150, 1e3, seed=4, kind="linear")
    b, _ = make_rhs(RhsSpec(m=4, seed=6), a)
    st, _ = init_state(variant, a, b)
    m = 4
    for _ in range(20):
        p_prev = (st.s if variant == "dr" else st.p).copy()
        step(st, a)
        r = b - a @ st.x
        assert np.linalg.norm(p_prev.T @ r) <= 1e-10 * np.linalg.norm(r) * np.sqrt(m) * np.linalg.norm(p_prev)


@pytest.mark.parametrize("variant,per_iter", [("hs", 1), ("ol", 1), ("dr", 1), ("dp", 2), ("bf", 2)])
@pytest.mark.parametrize("nonzero_x0", [False, True])
def test_matvec_accounting(variant, per_iter, nonzero_x0):
    a = poisson_2d(8)
    m = 3
    b, _ = make_rhs(RhsSpec(m=m, seed=1), a)
    x0 = make_rng(2).random((64, m)) if nonzero_x0 else None
    tr = run_solver(SolverConfig(variant=variant, max_iters=7, tol=0.0), a, b, x0=x0)
    k = tr.iterations
    assert k == 7
    assert tr.matvecs == per_iter * k * m + (m if nonzero_x0 else 0)
    assert [r.matvecs for r in tr.records][0] == (m if nonzero_x0 else 0)


class _CountingOp:
    def __init__(self, a):
        self.a, self.cols = a, 0
        self.shape = a.shape

    def __matmul__(self, x):
        self.cols += np.shape(x)[1] if np.ndim(x) == 2 else 1
        return self.a @ x


@pytest.mark.parametrize("variant", ["hs", "dr", "dp"])
def test_matvec_counter_matches_operator(variant):
    a = poisson_2d(6)
    b, _ = make_rhs(RhsSpec(m=2, seed=1), a)
    op = _CountingOp(a)
    st, _ = init_state(variant, op, b)
    for _ in range(5):
        step(st, op)
    assert st.matvecs == op.cols


def test_dr_never_inverts_sigma():
    src = inspect.getsource(solvers.dr_bcg_step) + inspect.getsource(solvers._init_dr)
    src += inspect.getsource(solvers._dr_residual_norms)
    assert not re.search(r"(inv|solve|tri_solve|spd_solve)\w*\([^)]*sigma", src)
    assert "sigma" in src


def test_dr_residual_norms_are_true_residuals():
    a = poisson_2d(10)
    b, x = make_rhs(RhsSpec(m=3, seed=2), a)
    for pc in (None, build_ic(a)):
        tr = run_solver(SolverConfig(variant="dr", max_iters=25, tol=0.0, precond=pc), a, b)
        r = b - a @ tr.x
        got = tr.records[-1].relres
        want = np.linalg.norm(r, axis=0) / np.linalg.norm(b, axis=0)
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-14)


@pytest.mark.parametrize("variant", ["hs", "ol", "dr", "dp", "bf"])
@pytest.mark.parametrize("pc", [None, "ic"])
def test_converges_and_stops(variant, pc):
    a = poisson_2d(10)
    b, x = make_rhs(RhsSpec(m=2, seed=3), a)
    precond = build_ic(a) if pc else None
    tr = run_solver(SolverConfig(variant=variant, tol=1e-9, max_iters=200, precond=precond), a, b, x_true=x)
    assert tr.termination == "converged"
    assert np.all(tr.records[-1].relres <= 1e-9)
    assert np.any(tr.records[-2].relres > 1e-9)
    assert np.linalg.norm(a @ tr.x - b) <= 1e-8 * np.linalg.norm(b)
    assert tr.final_omega < 1e-7


def test_hs_rank_deficiency_is_reported():
    a = random_spd(60, 1e3, seed=1, kind="linear")
    b, _ = make_rhs(RhsSpec(m=2, source="duplicate", seed=1), a)
    tr = run_solver(SolverConfig(variant="hs", max_iters=30), a, b)
    assert tr.termination == "failure"
    assert "SingularGramError" in tr.failure
    assert tr.failure_iteration == 1
    assert np.all(np.isfinite(tr.x))


def test_ol_qr_rank_deficiency_is_reported():
    a = random_spd(60, 1e3, seed=1, kind="linear")
    b, _ = make_rhs(RhsSpec(m=2, source="duplicate", seed=1), a)
    tr = run_solver(SolverConfig(variant="ol", phi_policy="qr", max_iters=30), a, b)
    assert tr.termination == "failure"
    assert "SingularTriangularError" in tr.failure


def test_bf_deflates_duplicate_column():
    a = random_spd(60, 1e3, seed=1, kind="linear")
    b, _ = make_rhs(RhsSpec(m=3, source="duplicate", seed=1), a)
    tr = run_solver(SolverConfig(variant="bf", max_iters=200, tol=1e-10, bf_trunc_tol=1e-8), a, b)
    assert tr.termination == "converged"
    st = tr.state
    assert st.p.shape[1] == 2
    assert st.psi.shape == (2, 3)
    assert all(r.relres.shape == (3,) for r in tr.records)


def test_bf_empty_direction():
    with pytest.raises(EmptyDirectionError):
        solvers._truncated_basis(np.zeros((5, 2)), 1e-8, 2)
    q, psi = solvers._truncated_basis(np.eye(4)[:, :2] @ np.diag([1.0, 1e-12]), 1e-8, 2)
    assert q.shape == (4, 1) and psi.shape == (1, 2)


def test_bf_failure_is_recorded():
    # exact solution after one step: the next direction block is empty
    a = poisson_2d(4)
    st, _ = init_state("bf", a, np.ones((16, 1)), bf_trunc_tol=1e-8)
    st.r[:] = 0.0
    st.z[:] = 0.0
    with pytest.raises(EmptyDirectionError):
        step(st, a)


def test_zero_tolerance_runs_to_max_iters():
    a = poisson_2d(5)
    b, _ = make_rhs(RhsSpec(m=1, seed=0), a)
    tr = run_solver(SolverConfig(variant="dr", max_iters=40, tol=0.0), a, b)
    assert tr.termination == "max_iters" and tr.iterations == 40


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(variant="cg")
    with pytest.raises(ValueError):
        SolverConfig(tol=1.0)
    with pytest.raises(ValueError):
        SolverConfig(tol=-1e-3)
    with pytest.raises(ValueError):
        SolverConfig(bf_trunc_tol=1e-1)
    with pytest.raises(ValueError):
        SolverConfig(max_iters=-1)
    assert SolverConfig(variant="hs", phi_policy="qr").phi_policy == "identity"


def test_meta_and_callbacks():
    a = poisson_2d(5)
    b, _ = make_rhs(RhsSpec(m=2, seed=0), a)
    seen = []
    tr = run_solver(
        SolverConfig(variant="dp", max_iters=3, tol=0.0), a, b,
        callbacks=[lambda st, rep: seen.append(rep.iteration)], meta={"matrix": "p5"},
    )
    assert seen == [0, 1, 2, 3]
    assert tr.meta["matrix"] == "p5" and tr.meta["variant"] == "dp" and tr.meta["m"] == 2
