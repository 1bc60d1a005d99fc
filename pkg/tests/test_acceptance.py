"""Acceptance gate: one PASS/FAIL line per criterion.

Tolerances and problem sizes are pinned here; do not loosen them to get a
green run.
"""
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.linalg

from blockcg.lanczos import block_lanczos, densify
from blockcg.linalg import cholesky_upper
from blockcg.problems import random_spd
from blockcg.reconstruct import (
    CoefficientHistory,
    JacobiRecorder,
    assemble_that_oracle,
    assemble_ttilde_oracle,
    residual_recurrence_defect,
    verify_unitary_similarity_oracle,
)
from blockcg.solvers import SolverConfig, init_state, run_solver, step
from blockcg.sparse import RhsSpec, dense_reference_solution, load_matrix_market, make_rhs, make_rng

HERE = Path(__file__).parent


# -- independent scalar oracles --------------------------------------------

def scalar_cg(a, b, k):
    """Textbook CG from x0 = 0; returns the iterates x_1..x_k."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    out = []
    for _ in range(k):
        ap = (a @ p[:, None])[:, 0]
        g = rr / (p @ ap)
        x = x + g * p
        r = r - g * ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
        out.append(x.copy())
    return out


def scalar_lanczos(a, b, k):
    """Three-term Lanczos without reorthogonalization: (alphas, betas_2..k+1)."""
    q_prev = np.zeros_like(b)
    q = b / np.linalg.norm(b)
    beta = 0.0
    alphas, betas = [], []
    for _ in range(k):
        w = (a @ q[:, None])[:, 0] - beta * q_prev
        alpha = q @ w
        w = w - alpha * q
        beta = np.linalg.norm(w)
        alphas.append(alpha)
        betas.append(beta)
        q_prev, q = q, w / beta
    return np.array(alphas), np.array(betas)


def _run_with(variant, a, b, k, phi_policy="identity"):
    st, rep = init_state(variant, a, b, None, None, phi_policy, 1e-12)
    rec, hist = JacobiRecorder(), CoefficientHistory()
    rec(st, rep)
    hist(st, rep)
    for _ in range(k):
        rep = step(st, a)
        rec(st, rep)
        hist(st, rep)
    return st, rec, hist


def _relerr(x, y):
    return np.linalg.norm(x - y) / np.linalg.norm(y)


# -- criterion 1 -------------------------------------------------------------

def test_c1_scalar_equivalence(acceptance):
    t0 = time.perf_counter()
    worst_x, worst_ab = 0.0, 0.0
    for seed in range(5):
        a = random_spd(100, 1e4, seed=seed, kind="linear")
        b = make_rng(1000 + seed).random(100)
        ref = scalar_cg(a, b, 30)
        alphas, betas = scalar_lanczos(a, b, 30)
        for variant in ("hs", "dr", "dp"):
            st, rec, _ = _run_with(variant, a, b[:, None], 0)
            for k in range(30):
                rep = step(st, a)
                rec(st, rep)
                worst_x = max(worst_x, _relerr(st.x[:, 0], ref[k]))
            t = rec.tridiag
            got_a = np.array([x[0, 0] for x in t.alphas[:30]])
            got_b = np.array([x[0, 0] for x in (t.betas + [t.beta_next])[:30]])
            worst_ab = max(worst_ab, np.max(np.abs(got_a - alphas) / np.abs(alphas)))
            worst_ab = max(worst_ab, np.max(np.abs(got_b - betas) / np.abs(betas)))
    elapsed = time.perf_counter() - t0
    ok = worst_x <= 1e-10 and worst_ab <= 1e-10 and elapsed < 5
    acceptance(
        "criterion 1 (m=1 equivalence)", ok,
        f"max iterate rel err {worst_x:.2e}, max alpha/beta rel err {worst_ab:.2e}, {elapsed:.2f}s",
    )
    assert ok


# -- criteria 2 and 3 --------------------------------------------------------

C2_INSTANCES = [(2, 11), (4, 12)]


def _c2_problem(m, seed):
    a = random_spd(200, 1e4, seed=seed, kind="linear")
    b, _ = make_rhs(RhsSpec(m=m, source="random", seed=seed), a)
    return a, b


def test_c2_jacobi_reconstruction(acceptance):
    t0 = time.perf_counter()
    worst_t, worst_ldl = 0.0, 0.0
    k = 10
    for m, seed in C2_INSTANCES:
        a, b = _c2_problem(m, seed)
        ref = densify(block_lanczos(a, b, k, orthog="full").tridiag)
        nref = np.linalg.norm(ref)
        for variant in ("hs", "dr", "dp"):
            _, rec, _ = _run_with(variant, a, b, k)
            got = rec.tridiag.dense()[: k * m, : k * m]
            worst_t = max(worst_t, np.abs(got - ref).max() / nref)
            prod = rec.ldl.product()
            full = rec.tridiag.dense()[: prod.shape[0], : prod.shape[0]]
            worst_ldl = max(worst_ldl, np.abs(prod - full).max() / np.linalg.norm(full))
    elapsed = time.perf_counter() - t0
    ok = worst_t <= 1e-7 and worst_ldl <= 1e-10 and elapsed < 10
    acceptance(
        "criterion 2 (Jacobi reconstruction)", ok,
        f"max |T_rec - T_lanczos|/||T|| {worst_t:.2e}, LDL rel err {worst_ldl:.2e}, {elapsed:.2f}s",
    )
    assert ok


def test_c3_residual_recurrence(acceptance):
    worst_rel, worst_sym = 0.0, 0.0
    k = 10
    for m, seed in C2_INSTANCES:
        a, b = _c2_problem(m, seed)
        dense_a = a.toarray()
        anorm = np.linalg.norm(dense_a, 2)
        for variant, policy in (("hs", "identity"), ("ol", "qr")):
            _, _, hist = _run_with(variant, a, b, k, phi_policy=policy)
            gam, dlt, phi = hist.series("gamma"), hist.series("delta"), hist.series("phi")
            dev, rnorm = residual_recurrence_defect(dense_a, hist.residuals, gam, dlt, phi)
            worst_rel = max(worst_rel, dev / (anorm * rnorm))
            t_hat = assemble_that_oracle(gam, dlt, phi)
            grams = scipy.linalg.block_diag(*[r.T @ r for r in hist.residuals[:k]])
            s = grams @ t_hat
            worst_sym = max(worst_sym, np.abs(s - s.T).max() / np.abs(s).max())
    ok = worst_rel <= 1e-9 and worst_sym <= 1e-10
    acceptance(
        "criterion 3 (residual three-term relation)", ok,
        f"relation residual / (||A|| ||R_k||) {worst_rel:.2e}, symmetry defect {worst_sym:.2e}",
    )
    assert ok


# -- criterion 4 -------------------------------------------------------------

def test_c4_unitary_similarity(acceptance):
    a = random_spd(40, 1e4, seed=4, kind="linear")
    b, _ = make_rhs(RhsSpec(m=2, source="random", seed=4), a)
    k = 6
    _, _, hist = _run_with("hs", a, b, k)
    rhos = [cholesky_upper(r.T @ r) for r in hist.residuals]
    t_tilde, beta_tildes = assemble_ttilde_oracle(
        hist.series("gamma"), hist.series("delta"), hist.series("phi"), rhos
    )
    t_lanczos = block_lanczos(a, b, k, orthog="full").tridiag
    dev = verify_unitary_similarity_oracle(t_lanczos, t_tilde, beta_tildes)
    rel = dev / np.linalg.norm(densify(t_lanczos))
    ok = rel <= 1e-7
    acceptance("criterion 4 (unitary similarity)", ok, f"max |U^T T~ U - T_k| / ||T_k|| {rel:.2e}")
    assert ok


# -- criterion 5 -------------------------------------------------------------

def test_c5_rank_deficiency(acceptance):
    a = random_spd(100, 1e4, seed=5, kind="linear")
    b, _ = make_rhs(RhsSpec(m=2, source="duplicate", seed=5), a)
    assert np.array_equal(b[:, 0], b[:, 1])
    hs = run_solver(SolverConfig(variant="hs", max_iters=60, tol=1e-10), a, b)
    hs_ok = (
        hs.termination == "failure"
        and "SingularGramError" in (hs.failure or "")
        and hs.failure_iteration == 1
    )
    parts = [f"hs {'singular-gram at step 1' if hs_ok else hs.termination}"]
    ok = hs_ok
    for variant in ("dr", "dp"):
        tr = run_solver(SolverConfig(variant=variant, max_iters=60, tol=1e-10), a, b)
        final = float(np.max(tr.records[-1].relres))
        v_ok = tr.termination == "converged" and final <= 1e-10
        ok &= v_ok
        parts.append(f"{variant} max relres {final:.2e} after {tr.iterations} it")
    acceptance("criterion 5 (rank deficiency)", ok, ", ".join(parts))
    assert ok


# -- criterion 6 -------------------------------------------------------------

def _find_bcsstk03():
    candidates = [os.environ.get("BLOCKCG_BCSSTK03")]
    candidates += [str(HERE / "data" / n) for n in ("bcsstk03.mtx", "bcsstk03.mtx.gz")]
    for c in candidates:
        if c and os.path.exists(c):
            return c
    return None


def _first_below(tr, threshold):
    it = tr.first_iteration_below(threshold)
    return np.inf if it is None else it


def test_c6_bcsstk03_ordering(acceptance):
    path = _find_bcsstk03()
    if path is None:
        acceptance(
            "criterion 6 (bcsstk03 ordering)", False,
            "bcsstk03 not found (set BLOCKCG_BCSSTK03 or add tests/data/bcsstk03.mtx[.gz])",
        )
        pytest.fail("bcsstk03.mtx is required for this criterion and is not available")
    t0 = time.perf_counter()
    a = load_matrix_market(path)
    assert a.n == 112
    results = {}
    for m in (1, 2, 4, 6):
        b, _ = make_rhs(RhsSpec(m=m, source="random", seed=m), a)
        x_true = dense_reference_solution(a, b)
        for variant in ("hs", "dp", "dr"):
            tr = run_solver(SolverConfig(variant=variant, max_iters=400, tol=0.0), a, b, x_true=x_true)
            results[variant, m] = tr
    finals = [results[v, 1].final_omega for v in ("hs", "dp", "dr")]
    ok_a = max(finals) <= 10 * min(finals)
    details = [f"m=1 final omega {', '.join(f'{f:.1e}' for f in finals)}"]
    ok_b = True
    for m in (4, 6):
        it = {v: _first_below(results[v, m], 1e-8) for v in ("hs", "dp", "dr")}
        om = {v: results[v, m].final_omega for v in ("hs", "dr")}
        ok_m = it["dr"] <= it["dp"] and it["dr"] <= it["hs"] and om["dr"] <= om["hs"] / 10
        ok_b &= ok_m
        details.append(
            f"m={m} it(omega<=1e-8) hs/dp/dr {it['hs']}/{it['dp']}/{it['dr']}, "
            f"final omega dr {om['dr']:.1e} vs hs {om['hs']:.1e}"
        )
    elapsed = time.perf_counter() - t0
    ok = ok_a and ok_b and elapsed < 30
    acceptance("criterion 6 (bcsstk03 ordering)", ok, "; ".join(details) + f"; {elapsed:.1f}s")
    assert ok


# -- criterion 7 -------------------------------------------------------------

C7_MAXIT = 1500


def test_c7_dp_vs_bf(acceptance):
    t0 = time.perf_counter()
    a = random_spd(1000, 1e8, seed=0, kind="logspaced")
    b, x_true = make_rhs(RhsSpec(m=16, source="solution", seed=1), a)

    def run(variant, trunc=1e-8):
        cfg = SolverConfig(variant=variant, max_iters=C7_MAXIT, tol=0.0, bf_trunc_tol=trunc)
        return run_solver(cfg, a, b, x_true=x_true)

    dp = run("dp")
    ok = dp.termination == "max_iters"
    parts = [f"dp {dp.final_omega:.3e}"]
    shrinks = 0
    for trunc in (1e-7, 1e-8, 1e-9, 1e-10):
        bf = run("bf", trunc)
        shrinks += sum(any("shrank" in w for w in r.warnings) for r in bf.records)
        ok &= bf.termination != "failure" and dp.final_omega <= bf.final_omega
        parts.append(f"bf({trunc:g}) {bf.final_omega:.3e}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 60
    acceptance(
        "criterion 7 (DP vs BF)", ok,
        f"final omega after {C7_MAXIT} it: {', '.join(parts)}; bf width reductions {shrinks}; {elapsed:.1f}s",
    )
    assert ok


# -- criterion 8 -------------------------------------------------------------

PROPERTY_MODULES = [
    "test_linalg.py",
    "test_sparse.py",
    "test_precond.py",
    "test_lanczos.py",
    "test_solvers.py",
    "test_reconstruct.py",
    "test_trace_cli.py",
]


def test_c8_property_suites(acceptance):
    t0 = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
         *[str(HERE / m) for m in PROPERTY_MODULES]],
        capture_output=True, text=True, cwd=HERE.parent,
    )
    elapsed = time.perf_counter() - t0
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = proc.returncode == 0 and elapsed < 120
    acceptance("criterion 8 (property suites)", ok, f"{summary.strip('= ')}; {elapsed:.1f}s")
    assert ok, proc.stdout[-3000:]
