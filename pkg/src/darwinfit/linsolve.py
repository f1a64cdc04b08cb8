"""Sparse storage and linear solvers.

The conjugate-gradient loop runs in the compiled ``_ckernels`` extension when
it is importable and in the NumPy module ``_pykernels`` otherwise.  Set
``DARWINFIT_PURE_PYTHON=1`` to force the fallback.  Both implement the same
iteration; they agree to rounding, not bitwise.
"""
from __future__ import annotations

import os
import time
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import _pykernels

try:
    if os.environ.get("DARWINFIT_PURE_PYTHON"):
        raise ImportError("pure python requested")
    from . import _ckernels
except ImportError:  # pragma: no cover - depends on the build
    _ckernels = None

BACKEND = "cython" if _ckernels is not None else "python"

_PRECONDITIONERS = {"none": 0, "jacobi": 1, "ssor": 2}
_STATUS = {0: "converged", 1: "max_iter", 2: "breakdown"}

DENSE_ORACLE_LIMIT = 5000


class SolverError(RuntimeError):
    pass


class SingularMatrixError(np.linalg.LinAlgError):
    pass


def kernels(backend: str | None = None):
    """Kernel module for ``backend`` ("cython", "python" or None for default)."""
    backend = backend or BACKEND
    if backend == "cython":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built")
        return _ckernels
    if backend == "python":
        return _pykernels
    raise ValueError(f"unknown backend {backend!r}")


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """CSR matrix with sorted, duplicate-free columns and a symmetry flag."""

    csr: sp.csr_matrix
    symmetric: bool = False

    @classmethod
    def from_any(cls, m, symmetric: bool = False, check: bool = True, seed: int = 0) -> "SparseMatrix":
        csr = sp.csr_matrix(m, dtype=float)
        csr.sum_duplicates()
        csr.sort_indices()
        out = cls(csr, symmetric)
        if symmetric and check and not out.probe_symmetry(seed=seed):
            raise ValueError("matrix flagged symmetric fails the symmetry probe")
        return out

    @property
    def shape(self) -> tuple[int, int]:
        return self.csr.shape

    @cached_property
    def indptr(self) -> np.ndarray:
        return self.csr.indptr.astype(np.intp)

    @cached_property
    def indices(self) -> np.ndarray:
        return self.csr.indices.astype(np.intp)

    @property
    def data(self) -> np.ndarray:
        return self.csr.data

    @cached_property
    def diag(self) -> np.ndarray:
        return self.csr.diagonal()

    def matvec(self, x) -> np.ndarray:
        return self.csr @ x

    def __matmul__(self, x):
        return self.csr @ x

    @cached_property
    def equilibrated(self) -> tuple["SparseMatrix", np.ndarray]:
        """``(S A S, s)`` with ``S = diag(s)``, ``s = 1/sqrt(diag A)``; unit diagonal."""
        d = self.diag
        if np.any(d <= 0):
            raise SolverError("equilibration needs a strictly positive diagonal")
        s = 1.0 / np.sqrt(d)
        S = sp.diags(s)
        return SparseMatrix.from_any(S @ self.csr @ S, symmetric=self.symmetric, check=False), s

    def probe_symmetry(self, n_probes: int = 3, seed: int = 0) -> bool:
        """Exact check of ``y^T A x == x^T A y`` entrywise via ``A - A^T``."""
        if self.shape[0] != self.shape[1]:
            return False
        diff = (self.csr - self.csr.T).tocsr()
        diff.eliminate_zeros()
        if diff.nnz:
            return False
        rng = np.random.default_rng(seed)
        for _ in range(n_probes):
            x, y = rng.standard_normal((2, self.shape[0]))
            lhs, rhs = y @ (self.csr @ x), x @ (self.csr @ y)
            if not np.isclose(lhs, rhs, rtol=1e-12, atol=1e-300):
                return False
        return True


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    residual: float
    converged: bool
    wall_time: float
    status: str = "converged"


def _parse_preconditioner(preconditioner, omega):
    if isinstance(preconditioner, tuple):
        preconditioner, omega = preconditioner
    name = str(preconditioner).lower()
    if name.startswith("ssor(") and name.endswith(")"):
        name, omega = "ssor", float(name[5:-1])
    if name not in _PRECONDITIONERS:
        raise ValueError(f"unknown preconditioner {preconditioner!r}")
    if name == "ssor" and not 0.0 < omega < 2.0:
        raise ValueError("SSOR relaxation must lie in (0, 2)")
    return _PRECONDITIONERS[name], float(omega)


def cg_solve(A, b, x0=None, tol: float = 1e-10, max_iter: int | None = None,
             preconditioner="jacobi", omega: float = 1.5, callback=None,
             backend: str | None = None) -> tuple[np.ndarray, SolveReport]:
    """Preconditioned conjugate gradients for symmetric positive (semi-)definite ``A``.

    ``x0`` is the initial iterate; for singular consistent systems the kernel
    component of ``x0`` is carried through unchanged.  Non-convergence is
    reported, not raised.  ``callback(x)`` is called after every iteration and
    forces the NumPy backend.
    """
    if not isinstance(A, SparseMatrix):
        A = SparseMatrix.from_any(A)
    b = np.ascontiguousarray(b, dtype=float)
    n = A.shape[0]
    if b.shape != (n,):
        raise ValueError(f"right-hand side has shape {b.shape}, expected ({n},)")
    if not np.all(np.isfinite(b)):
        raise SolverError("right-hand side contains non-finite values")
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float, copy=True)
    kind, omega = _parse_preconditioner(preconditioner, omega)
    if max_iter is None:
        max_iter = max(10 * n, 100)
    diag = A.diag
    if kind != 0 and np.any(diag <= 0):
        raise SolverError("preconditioner needs a strictly positive diagonal")

    start = time.perf_counter()
    if callback is not None:
        it, res, status = _pykernels.pcg(A.indptr, A.indices, A.data, diag, b, x, tol,
                                         max_iter, kind, omega, callback=callback)
    else:
        k = kernels(backend)
        it, res, status = k.pcg(A.indptr, A.indices, A.data, diag, b, x, float(tol),
                                int(max_iter), kind, omega)
    report = SolveReport(int(it), float(res), status == 0 and res <= tol,
                         time.perf_counter() - start, _STATUS[status])
    return x, report


def _to_dense(A) -> np.ndarray:
    if isinstance(A, SparseMatrix):
        return A.csr.toarray()
    if sp.issparse(A):
        return A.toarray()
    return np.asarray(A, dtype=float)


class DenseLU:
    """Dense LU factorization with a conditioning check; reusable across solves."""

    def __init__(self, A, limit: int = DENSE_ORACLE_LIMIT, rcond_min: float | None = None):
        A = _to_dense(A)
        n = A.shape[0]
        if A.ndim != 2 or A.shape[1] != n:
            raise ValueError(f"matrix must be square, got {A.shape}")
        if n > limit:
            raise ValueError(f"dense oracle limited to {limit} unknowns, got {n}")
        self.A = A
        anorm = np.linalg.norm(A, 1)
        with warnings.catch_warnings():
            # singularity is detected and reported below
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            self.lu, self.piv = sla.lu_factor(A, check_finite=True)
        diag = np.abs(np.diag(self.lu))
        if anorm == 0 or diag.min() == 0:
            self.rcond = 0.0
        else:
            self.rcond = float(sla.lapack.dgecon(self.lu, anorm, norm="1")[0])
        if rcond_min is None:
            rcond_min = max(n, 1) * np.finfo(float).eps
        if self.rcond < rcond_min:
            raise SingularMatrixError(
                f"matrix is singular to working precision (rcond={self.rcond:.3e}); "
                "regularize the conductivity")

    def solve(self, b, rtol: float = 1e-10) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        x = sla.lu_solve((self.lu, self.piv), b)
        bnorm = np.linalg.norm(b)
        res = np.linalg.norm(b - self.A @ x)
        if res > rtol * max(bnorm, np.finfo(float).tiny):
            # one step of iterative refinement before giving up
            x = x + sla.lu_solve((self.lu, self.piv), b - self.A @ x)
            res = np.linalg.norm(b - self.A @ x)
            if res > rtol * max(bnorm, np.finfo(float).tiny):
                raise SingularMatrixError(f"LU residual {res / bnorm:.3e} exceeds {rtol:.1e}")
        return x


def dense_lu_solve(A, b, limit: int = DENSE_ORACLE_LIMIT) -> np.ndarray:
    return DenseLU(A, limit=limit).solve(b)


def direct_solve(A, b, x0=None, rtol: float = 1e-10) -> tuple[np.ndarray, SolveReport]:
    """Dense solve of a symmetric positive (semi-)definite system.

    Non-singular systems go through :class:`DenseLU`.  Singular consistent ones
    get the minimum-norm correction to ``x0``, so the kernel component of the
    initial iterate survives exactly as it does under CG.
    """
    start = time.perf_counter()
    Ad = _to_dense(A)
    b = np.asarray(b, dtype=float)
    x0 = np.zeros(b.size) if x0 is None else np.asarray(x0, dtype=float)
    bnorm = np.linalg.norm(b)
    try:
        x = DenseLU(Ad).solve(b, rtol=rtol)
    except SingularMatrixError:
        dx = sla.lstsq(Ad, b - Ad @ x0, cond=None, lapack_driver="gelsd")[0]
        x = x0 + dx
    res = np.linalg.norm(b - Ad @ x)
    rel = res / bnorm if bnorm > 0 else res
    if rel > rtol:
        raise SolverError(f"direct solve left relative residual {rel:.3e}; "
                          "singular system with inconsistent right-hand side")
    return x, SolveReport(1, float(rel), True, time.perf_counter() - start)
