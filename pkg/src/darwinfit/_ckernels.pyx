# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled CSR kernels: mat-vec and preconditioned conjugate gradients.

Dot products are accumulated left to right in a single loop so that repeated
solves of the same system are bitwise reproducible.
"""
import numpy as np

from libc.math cimport sqrt, isfinite

cdef enum:
    NONE = 0
    JACOBI = 1
    SSOR = 2
    CONVERGED = 0
    MAX_ITER = 1
    BREAKDOWN = 2


cdef inline double _dot(const double[::1] a, const double[::1] b, Py_ssize_t n) noexcept nogil:
    cdef double s = 0.0
    cdef Py_ssize_t i
    for i in range(n):
        s += a[i] * b[i]
    return s


cdef void _matvec(const Py_ssize_t[::1] indptr, const Py_ssize_t[::1] indices,
                  const double[::1] data, const double[::1] x, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i, k, n = out.shape[0]
    cdef double s
    for i in range(n):
        s = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            s += data[k] * x[indices[k]]
        out[i] = s


cdef void _precond(int kind, double omega, const Py_ssize_t[::1] indptr,
                   const Py_ssize_t[::1] indices, const double[::1] data,
                   const double[::1] diag, const double[::1] r, double[::1] z) noexcept nogil:
    cdef Py_ssize_t i, k, j, n = r.shape[0]
    cdef double s, scale
    if kind == NONE:
        for i in range(n):
            z[i] = r[i]
    elif kind == JACOBI:
        for i in range(n):
            z[i] = r[i] / diag[i]
    else:
        # forward sweep with D/omega + L
        for i in range(n):
            s = r[i]
            for k in range(indptr[i], indptr[i + 1]):
                j = indices[k]
                if j < i:
                    s -= data[k] * z[j]
            z[i] = s * omega / diag[i]
        # multiply by D/omega
        for i in range(n):
            z[i] = z[i] * diag[i] / omega
        # backward sweep with D/omega + U
        for i in range(n - 1, -1, -1):
            s = z[i]
            for k in range(indptr[i], indptr[i + 1]):
                j = indices[k]
                if j > i:
                    s -= data[k] * z[j]
            z[i] = s * omega / diag[i]
        scale = (2.0 - omega) / omega
        for i in range(n):
            z[i] = z[i] * scale


def csr_matvec(const Py_ssize_t[::1] indptr, const Py_ssize_t[::1] indices,
               const double[::1] data, const double[::1] x):
    out = np.empty(indptr.shape[0] - 1)
    cdef double[::1] o = out
    with nogil:
        _matvec(indptr, indices, data, x, o)
    return out


def pcg(const Py_ssize_t[::1] indptr, const Py_ssize_t[::1] indices,
        const double[::1] data, const double[::1] diag, const double[::1] b,
        double[::1] x, double tol, Py_ssize_t max_iter, int kind, double omega):
    """Run PCG in place on ``x``.  Returns (iterations, relres, status)."""
    cdef Py_ssize_t n = b.shape[0], i, it = 0
    cdef double[::1] r = np.empty(n)
    cdef double[::1] z = np.empty(n)
    cdef double[::1] p = np.empty(n)
    cdef double[::1] q = np.empty(n)
    cdef double bnorm, rnorm, rz, rz_new, pq, alpha, beta
    cdef int status = MAX_ITER

    with nogil:
        _matvec(indptr, indices, data, x, q)
        for i in range(n):
            r[i] = b[i] - q[i]
        bnorm = sqrt(_dot(b, b, n))
        rnorm = sqrt(_dot(r, r, n))
        if bnorm == 0.0:
            bnorm = rnorm
        if rnorm <= tol * bnorm:
            status = CONVERGED
        else:
            _precond(kind, omega, indptr, indices, data, diag, r, z)
            for i in range(n):
                p[i] = z[i]
            rz = _dot(r, z, n)
            while it < max_iter:
                it += 1
                _matvec(indptr, indices, data, p, q)
                pq = _dot(p, q, n)
                if not (pq > 0.0 and isfinite(pq)):
                    status = BREAKDOWN
                    break
                alpha = rz / pq
                for i in range(n):
                    x[i] += alpha * p[i]
                    r[i] -= alpha * q[i]
                rnorm = sqrt(_dot(r, r, n))
                if not isfinite(rnorm):
                    status = BREAKDOWN
                    break
                if rnorm <= tol * bnorm:
                    # confirm against the true residual before stopping
                    _matvec(indptr, indices, data, x, q)
                    for i in range(n):
                        r[i] = b[i] - q[i]
                    rnorm = sqrt(_dot(r, r, n))
                    if rnorm <= tol * bnorm:
                        status = CONVERGED
                        break
                    _precond(kind, omega, indptr, indices, data, diag, r, z)
                    for i in range(n):
                        p[i] = z[i]
                    rz = _dot(r, z, n)
                    continue
                _precond(kind, omega, indptr, indices, data, diag, r, z)
                rz_new = _dot(r, z, n)
                beta = rz_new / rz
                rz = rz_new
                for i in range(n):
                    p[i] = z[i] + beta * p[i]
        _matvec(indptr, indices, data, x, q)
        for i in range(n):
            r[i] = b[i] - q[i]
        rnorm = sqrt(_dot(r, r, n))
    if bnorm == 0.0:
        return it, 0.0, status
    return it, rnorm / bnorm, status
