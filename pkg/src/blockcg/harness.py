"""Experiment driver: runs variants over block sizes and writes traces."""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .precond import build_preconditioner
from .reconstruct import JacobiRecorder
from .solvers import SolverConfig, run_solver
from .sparse import RhsSpec, dense_reference_solution, make_rhs
from .trace import compute_omega, write_trace

__all__ = [
    "ExperimentSpec",
    "ExperimentResult",
    "run_experiment",
    "compare_traces",
    "format_table",
    "compute_omega",
    "DENSE_REFERENCE_MAX_N",
    "DEFAULT_THRESHOLDS",
]

log = logging.getLogger(__name__)

DENSE_REFERENCE_MAX_N = 2000
DEFAULT_THRESHOLDS = (1e-4, 1e-6, 1e-8, 1e-10, 1e-12)


@dataclass
class ExperimentSpec:
    m_values: Sequence[int]
    variants: Sequence[str]
    precond: str = "none"
    ic_shift: float = 0.0
    ic_droptol: float = 0.0
    tol: float = 1e-8
    maxit: int = 500
    seed: int = 0
    random_b: bool = False
    bf_tol: float = 1e-8
    phi_policy: str = "identity"
    out_dir: Optional[str] = None
    dump_jacobi: Optional[str] = None
    jobs: int = 1


@dataclass
class ExperimentResult:
    traces: List = field(default_factory=list)
    paths: List[str] = field(default_factory=list)
    jacobi_paths: List[str] = field(default_factory=list)

    @property
    def any_failure(self):
        return any(t.termination == "failure" for t in self.traces)


def _dump_jacobi(recorder, path):
    rc = recorder.recon
    if rc is None or rc.tridiag.k == 0:
        return None
    np.savez(
        path,
        T=rc.tridiag.dense(),
        L=rc.ldl.dense_l(),
        D=rc.ldl.dense_d(),
        beta1=rc.tridiag.beta1,
        steps=rc.steps,
        halt_reason=str(rc.halt_reason or ""),
    )
    return path


def run_experiment(a, spec):
    """Run every ``(variant, m)`` combination of ``spec`` on matrix ``a``.

    Returns an :class:`ExperimentResult`. Raises
    :class:`~blockcg.errors.PreconditionerError` if the preconditioner cannot
    be built; solver failures are recorded in the traces instead.
    """
    precond = build_preconditioner(spec.precond, a, spec.ic_shift, spec.ic_droptol)
    name = a.name or "matrix"
    if spec.out_dir:
        os.makedirs(spec.out_dir, exist_ok=True)
    if spec.dump_jacobi:
        os.makedirs(spec.dump_jacobi, exist_ok=True)

    problems = {}
    for m in spec.m_values:
        source = "random" if spec.random_b else "solution"
        b, x_true = make_rhs(RhsSpec(m=m, source=source, seed=spec.seed), a)
        if x_true is None and a.n <= DENSE_REFERENCE_MAX_N:
            x_true = dense_reference_solution(a, b)
        problems[m] = (b, x_true)

    jobs = [(v, m) for m in spec.m_values for v in spec.variants]

    def one(job):
        variant, m = job
        b, x_true = problems[m]
        cfg = SolverConfig(
            variant=variant,
            max_iters=spec.maxit,
            tol=spec.tol,
            phi_policy=spec.phi_policy,
            bf_trunc_tol=spec.bf_tol,
            precond=precond,
        )
        callbacks = []
        recorder = None
        if spec.dump_jacobi and variant != "bf":
            recorder = JacobiRecorder()
            callbacks.append(recorder)
        meta = {
            "matrix": name,
            "seed": spec.seed,
            "rhs": "random" if spec.random_b else "solution",
            "omega_available": x_true is not None,
        }
        if precond.kind == "ic":
            meta.update(ic_shift=precond.shift, ic_droptol=spec.ic_droptol)
        trace = run_solver(cfg, a, b, x_true=x_true, callbacks=callbacks, meta=meta)
        log.info(
            "%s m=%d: %s after %d iterations (omega %s)",
            variant, m, trace.termination, trace.iterations, trace.final_omega,
        )
        return job, trace, recorder

    if spec.jobs > 1:
        with ThreadPoolExecutor(max_workers=spec.jobs) as pool:
            outcomes = list(pool.map(one, jobs))
    else:
        outcomes = [one(j) for j in jobs]

    result = ExperimentResult()
    for (variant, m), trace, recorder in outcomes:
        result.traces.append(trace)
        stem = f"{name}_{variant}_m{m}"
        if spec.out_dir:
            path = os.path.join(spec.out_dir, stem + ".csv")
            write_trace(trace, path)
            result.paths.append(path)
        if recorder is not None:
            jp = _dump_jacobi(recorder, os.path.join(spec.dump_jacobi, stem + "_jacobi.npz"))
            if jp:
                result.jacobi_paths.append(jp)
    return result


def compare_traces(traces, thresholds=DEFAULT_THRESHOLDS):
    """One summary row per trace.

    Each row has the final and smallest attained ``omega`` (``None`` when the
    exact solution was unknown), the first iteration reaching each threshold
    (on ``omega`` if available, else on the max relative residual), the
    total matvec count and the termination reason.
    """
    rows = []
    for tr in traces:
        omegas = [r.omega for r in tr.records if r.omega is not None]
        use = "omega" if omegas else "relres"
        row = {
            "matrix": tr.meta.get("matrix"),
            "variant": tr.meta.get("variant"),
            "m": tr.meta.get("m"),
            "iterations": tr.iterations,
            "final_omega": omegas[-1] if omegas else None,
            "min_omega": min(omegas) if omegas else None,
            "final_relres": float(np.max(tr.records[-1].relres)) if tr.records else None,
            "matvecs": tr.matvecs,
            "termination": tr.termination,
            "measure": use,
        }
        for th in thresholds:
            row[f"it<= {th:g}"] = tr.first_iteration_below(th, use=use)
        rows.append(row)
    return rows


def format_table(rows):
    if not rows:
        return ""
    cols = list(rows[0].keys())

    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.3e}"
        return str(v)

    body = [[cell(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body)
    return "\n".join(lines)
