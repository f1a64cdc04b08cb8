"""NumPy fallback for the compiled CSR kernels; same algorithm, same API."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve_triangular

NONE, JACOBI, SSOR = 0, 1, 2
CONVERGED, MAX_ITER, BREAKDOWN = 0, 1, 2

_ssor_cache: dict = {}


def _as_csr(indptr, indices, data):
    n = len(indptr) - 1
    return sp.csr_matrix((data, indices, indptr), shape=(n, n))


def csr_matvec(indptr, indices, data, x):
    return _as_csr(indptr, indices, data) @ np.asarray(x)


def _ssor_factors(indptr, indices, data, diag, omega):
    key = (id(data), omega)
    hit = _ssor_cache.get(key)
    if hit is not None and hit[0] is data:
        return hit[1], hit[2]
    A = _as_csr(indptr, indices, data)
    d = sp.diags(np.asarray(diag) / omega)
    lower = (sp.tril(A, k=-1) + d).tocsr()
    upper = (sp.triu(A, k=1) + d).tocsr()
    _ssor_cache.clear()
    _ssor_cache[key] = (data, lower, upper)
    return lower, upper


def _make_precond(kind, omega, indptr, indices, data, diag):
    if kind == NONE:
        return lambda r: r.copy()
    if kind == JACOBI:
        return lambda r: r / diag
    lower, upper = _ssor_factors(indptr, indices, data, diag, omega)
    scale = (2.0 - omega) / omega

    def apply(r):
        y = spsolve_triangular(lower, r, lower=True)
        y = y * (diag / omega)
        return scale * spsolve_triangular(upper, y, lower=False)
    return apply


def pcg(indptr, indices, data, diag, b, x, tol, max_iter, kind, omega, callback=None):
    """Run PCG in place on ``x``.  Returns (iterations, relres, status)."""
    A = _as_csr(indptr, indices, data)
    b = np.asarray(b, dtype=float)
    diag = np.asarray(diag, dtype=float)
    precond = _make_precond(kind, omega, indptr, indices, data, diag)
    r = b - A @ x
    bnorm = np.sqrt(np.dot(b, b))
    rnorm = np.sqrt(np.dot(r, r))
    if bnorm == 0.0:
        bnorm = rnorm
    it = 0
    status = MAX_ITER
    if rnorm <= tol * bnorm:
        status = CONVERGED
    else:
        z = precond(r)
        p = z.copy()
        rz = np.dot(r, z)
        while it < max_iter:
            it += 1
            q = A @ p
            pq = np.dot(p, q)
            if not (pq > 0.0 and np.isfinite(pq)):
                status = BREAKDOWN
                break
            alpha = rz / pq
            x += alpha * p
            r -= alpha * q
            if callback is not None:
                callback(x)
            rnorm = np.sqrt(np.dot(r, r))
            if not np.isfinite(rnorm):
                status = BREAKDOWN
                break
            if rnorm <= tol * bnorm:
                r = b - A @ x
                rnorm = np.sqrt(np.dot(r, r))
                if rnorm <= tol * bnorm:
                    status = CONVERGED
                    break
                z = precond(r)
                p = z.copy()
                rz = np.dot(r, z)
                continue
            z = precond(r)
            rz_new = np.dot(r, z)
            beta = rz_new / rz
            rz = rz_new
            p = z + beta * p
    r = b - A @ x
    rnorm = np.sqrt(np.dot(r, r))
    if bnorm == 0.0:
        return it, 0.0, status
    return it, rnorm / bnorm, status
