"""Block conjugate gradient solvers with block Lanczos reconstruction."""
from .errors import (
    BlockCGError,
    DimensionError,
    EmptyDirectionError,
    InvalidInputError,
    MatrixMarketError,
    PreconditionerError,
    SingularGramError,
    SingularTriangularError,
)
from .lanczos import BlockTridiag, LanczosBasis, block_lanczos, densify, verify_lanczos_relation
from .precond import Preconditioner, build_ic, build_identity, build_jacobi, build_preconditioner
from .reconstruct import CoefficientHistory, JacobiRecorder
from .solvers import SolverConfig, init_state, run_solver, step
from .sparse import RhsSpec, SparseSym, load_matrix_market, make_rhs, spmm, write_matrix_market
from .trace import ConvergenceTrace, compute_omega, read_trace, write_trace

__all__ = [
    "BlockCGError",
    "DimensionError",
    "EmptyDirectionError",
    "InvalidInputError",
    "MatrixMarketError",
    "PreconditionerError",
    "SingularGramError",
    "SingularTriangularError",
    "BlockTridiag",
    "LanczosBasis",
    "block_lanczos",
    "densify",
    "verify_lanczos_relation",
    "Preconditioner",
    "build_ic",
    "build_identity",
    "build_jacobi",
    "build_preconditioner",
    "CoefficientHistory",
    "JacobiRecorder",
    "SolverConfig",
    "init_state",
    "run_solver",
    "step",
    "RhsSpec",
    "SparseSym",
    "load_matrix_market",
    "make_rhs",
    "spmm",
    "write_matrix_market",
    "ConvergenceTrace",
    "compute_omega",
    "read_trace",
    "write_trace",
]

__version__ = "0.1.0"
