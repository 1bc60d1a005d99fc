"""Convergence traces, error measures and their CSV serialization.

A trace file is CSV with a single leading ``#``-prefixed JSON line carrying
the run metadata. The column set is fixed (``TRACE_COLUMNS``); per-column
quantities are ``;``-joined inside one field so that the header does not
depend on the block width.
"""
import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

__all__ = [
    "TRACE_SCHEMA",
    "TRACE_COLUMNS",
    "IterationRecord",
    "ConvergenceTrace",
    "compute_omega",
    "anorm_errors",
    "ErrorMeter",
    "write_trace",
    "read_trace",
]

TRACE_SCHEMA = "blockcg-trace/1"
TRACE_COLUMNS = (
    "iteration",
    "omega",
    "max_relres",
    "relres",
    "anorm_err",
    "matvecs",
    "gram_cond",
    "warnings",
    "wall_time",
)


def compute_omega(a, x_true, x_k):
    """``sqrt(trace(E^T A E) / trace(X^T A X))`` with ``E = X - X_k``."""
    if x_true is None:
        return None
    x_true = np.asarray(x_true, dtype=float).reshape(np.shape(x_k))
    e = x_true - x_k
    num = float(np.sum(e * (a @ e)))
    den = float(np.sum(x_true * (a @ x_true)))
    if den <= 0.0:
        return 0.0 if num == 0.0 else math.inf
    return math.sqrt(max(num, 0.0) / den)


def anorm_errors(a, x_true, x_k):
    """Per-column relative A-norm errors ``||x_i - x_k,i||_A / ||x_i||_A``."""
    x_true = np.asarray(x_true, dtype=float).reshape(np.shape(x_k))
    e = x_true - x_k
    num = np.sum(e * (a @ e), axis=0)
    den = np.sum(x_true * (a @ x_true), axis=0)
    den = np.where(den > 0, den, 1.0)
    return np.sqrt(np.maximum(num, 0.0) / den)


class ErrorMeter:
    """Error measures against a fixed exact solution, one operator product per call.

    Returns ``(omega, per_column_relative_anorm_error)``.
    """

    def __init__(self, a, x_true):
        self.a = a
        self.x_true = np.asarray(x_true, dtype=float)
        if self.x_true.ndim == 1:
            self.x_true = self.x_true[:, None]
        self.den_cols = np.sum(self.x_true * (a @ self.x_true), axis=0)
        self.den = float(np.sum(self.den_cols))

    def __call__(self, x_k):
        e = self.x_true - np.asarray(x_k, dtype=float).reshape(self.x_true.shape)
        num_cols = np.sum(e * (self.a @ e), axis=0)
        num = float(np.sum(num_cols))
        if self.den <= 0.0:
            omega = 0.0 if num == 0.0 else math.inf
        else:
            omega = math.sqrt(max(num, 0.0) / self.den)
        den = np.where(self.den_cols > 0, self.den_cols, 1.0)
        return omega, np.sqrt(np.maximum(num_cols, 0.0) / den)


@dataclass
class IterationRecord:
    iteration: int
    omega: Optional[float]
    relres: np.ndarray
    anorm_err: Optional[np.ndarray]
    matvecs: int
    wall_time: float = 0.0
    gram_cond: float = float("nan")
    warnings: List[str] = field(default_factory=list)


@dataclass
class ConvergenceTrace:
    meta: dict = field(default_factory=dict)
    records: List[IterationRecord] = field(default_factory=list)
    termination: Optional[str] = None
    failure: Optional[str] = None
    failure_iteration: Optional[int] = None
    x: Optional[np.ndarray] = None
    state: object = None

    def fail(self, iteration, exc):
        self.termination = "failure"
        self.failure = f"{type(exc).__name__}: {exc}"
        self.failure_iteration = iteration

    @property
    def iterations(self):
        return self.records[-1].iteration if self.records else 0

    @property
    def omegas(self):
        return np.array([np.nan if r.omega is None else r.omega for r in self.records])

    @property
    def relres(self):
        return np.array([r.relres for r in self.records])

    @property
    def final_omega(self):
        return self.records[-1].omega if self.records else None

    @property
    def matvecs(self):
        return self.records[-1].matvecs if self.records else 0

    def first_iteration_below(self, threshold, use="omega"):
        """First iteration whose ``omega`` (or max relative residual) is ``<= threshold``."""
        for rec in self.records:
            val = rec.omega if use == "omega" else float(np.max(rec.relres))
            if val is not None and val <= threshold:
                return rec.iteration
        return None

    def full_meta(self):
        meta = dict(self.meta)
        meta.update(
            schema=TRACE_SCHEMA,
            columns=list(TRACE_COLUMNS),
            termination=self.termination,
            failure=self.failure,
            failure_iteration=self.failure_iteration,
            iterations=self.iterations,
        )
        return meta


def _fmt(v):
    if v is None:
        return ""
    return repr(float(v))


def _fmt_vec(v):
    if v is None:
        return ""
    return ";".join(repr(float(t)) for t in np.asarray(v).ravel())


def trace_rows(trace):
    for rec in trace.records:
        yield [
            str(rec.iteration),
            _fmt(rec.omega),
            _fmt(np.max(rec.relres)),
            _fmt_vec(rec.relres),
            _fmt_vec(rec.anorm_err),
            str(rec.matvecs),
            _fmt(rec.gram_cond),
            " | ".join(rec.warnings),
            f"{rec.wall_time:.6f}",
        ]


def write_trace(trace, path_or_buf):
    """Write ``trace`` as CSV with a JSON metadata header line."""
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        fh.write("# " + json.dumps(trace.full_meta(), sort_keys=True, default=str) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in trace_rows(trace):
            w.writerow(row)
    finally:
        if own:
            fh.close()


def _parse_vec(s):
    return np.array([float(t) for t in s.split(";")]) if s else None


def read_trace(path_or_buf):
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "r", newline="") if own else path_or_buf
    try:
        first = fh.readline()
        if not first.startswith("#"):
            raise ValueError("trace file lacks the '#' metadata header")
        meta = json.loads(first[1:])
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
            raise ValueError(f"unexpected trace columns {reader.fieldnames}")
        records = []
        for row in reader:
            records.append(
                IterationRecord(
                    iteration=int(row["iteration"]),
                    omega=float(row["omega"]) if row["omega"] else None,
                    relres=_parse_vec(row["relres"]),
                    anorm_err=_parse_vec(row["anorm_err"]),
                    matvecs=int(row["matvecs"]),
                    wall_time=float(row["wall_time"]),
                    gram_cond=float(row["gram_cond"]),
                    warnings=row["warnings"].split(" | ") if row["warnings"] else [],
                )
            )
    finally:
        if own:
            fh.close()
    trace = ConvergenceTrace(meta=meta, records=records)
    trace.termination = meta.get("termination")
    trace.failure = meta.get("failure")
    trace.failure_iteration = meta.get("failure_iteration")
    return trace


def trace_to_string(trace):
    buf = io.StringIO()
    write_trace(trace, buf)
    return buf.getvalue()
