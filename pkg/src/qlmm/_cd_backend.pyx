# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled coordinate-descent kernel for the weighted Lasso.

Hot loop of the whole package: every fixed-effects fit, scaled-Lasso
alternation, cross-validation fold and nodewise regression lands here.
Semantics match ``_cd_python.cd_weighted_lasso`` exactly; see that module
for the contract.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs
from scipy.linalg.cython_blas cimport daxpy, dcopy, ddot, dgemv


cdef inline double _soft(double z, double t) nogil:
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


cdef double _sweep(double[::1, :] X, double[::1] beta, double[::1] resid,
                   double[::1] thresh, double[::1] gscale, double norm_const,
                   long[::1] indices, int n_idx) nogil:
    cdef int N = X.shape[0]
    cdef int one = 1
    cdef int k, j
    cdef double g, z, new, delta, neg_delta
    cdef double max_delta = 0.0
    for k in range(n_idx):
        j = <int> indices[k]
        g = gscale[j]
        if g <= 0.0:
            continue
        z = ddot(&N, &X[0, j], &one, &resid[0], &one) / norm_const + g * beta[j]
        new = _soft(z, thresh[j]) / g
        delta = new - beta[j]
        if delta != 0.0:
            neg_delta = -delta
            daxpy(&N, &neg_delta, &X[0, j], &one, &resid[0], &one)
            beta[j] = new
        if fabs(delta) > max_delta:
            max_delta = fabs(delta)
    return max_delta


cdef double _kkt_residual(double[::1, :] X, double[::1] y, double[::1] beta,
                          double[::1] resid, double[::1] thresh,
                          double norm_const, double[::1] grad) nogil:
    cdef int N = X.shape[0]
    cdef int p = X.shape[1]
    cdef int one = 1
    cdef int lda = N
    cdef double alpha = -1.0, bcoef = 1.0, gone = 1.0, gzero = 0.0
    cdef int j
    cdef double viol, worst = 0.0
    # resid = y - X @ beta, recomputed fresh to drop accumulated update drift
    dcopy(&N, &y[0], &one, &resid[0], &one)
    dgemv("N", &N, &p, &alpha, &X[0, 0], &lda, &beta[0], &one, &bcoef,
          &resid[0], &one)
    # grad = X.T @ resid / norm_const
    dgemv("T", &N, &p, &gone, &X[0, 0], &lda, &resid[0], &one, &gzero,
          &grad[0], &one)
    for j in range(p):
        if beta[j] > 0.0:
            viol = fabs(grad[j] / norm_const - thresh[j])
        elif beta[j] < 0.0:
            viol = fabs(grad[j] / norm_const + thresh[j])
        else:
            viol = fabs(grad[j] / norm_const) - thresh[j]
            if viol < 0.0:
                viol = 0.0
        if viol > worst:
            worst = viol
    return worst


def cd_weighted_lasso(double[::1, :] X, double[::1] y, double[::1] beta,
                      double[::1] resid, double[::1] thresh,
                      double[::1] gscale, double norm_const,
                      long max_sweeps, double tol, double kkt_tol):
    """See ``qlmm._cd_python.cd_weighted_lasso`` for the contract."""
    cdef int p = X.shape[1]
    cdef long sweeps = 0
    cdef bint converged = False
    cdef double kkt = np.inf
    cdef double max_delta, limit, bmax
    cdef int j, n_active

    all_idx_arr = np.arange(p, dtype=np.int64)
    active_arr = np.empty(p, dtype=np.int64)
    grad_arr = np.empty(p, dtype=np.float64)
    cdef long[::1] all_idx = all_idx_arr
    cdef long[::1] active = active_arr
    cdef double[::1] grad = grad_arr

    with nogil:
        while sweeps < max_sweeps:
            max_delta = _sweep(X, beta, resid, thresh, gscale, norm_const,
                               all_idx, p)
            sweeps += 1
            bmax = 1.0
            for j in range(p):
                if fabs(beta[j]) > bmax:
                    bmax = fabs(beta[j])
            limit = tol * bmax
            while max_delta > limit and sweeps < max_sweeps:
                n_active = 0
                for j in range(p):
                    if beta[j] != 0.0:
                        active[n_active] = j
                        n_active += 1
                if n_active == 0:
                    break
                max_delta = _sweep(X, beta, resid, thresh, gscale, norm_const,
                                   active, n_active)
                sweeps += 1
                bmax = 1.0
                for j in range(p):
                    if fabs(beta[j]) > bmax:
                        bmax = fabs(beta[j])
                limit = tol * bmax
            kkt = _kkt_residual(X, y, beta, resid, thresh, norm_const, grad)
            if kkt <= kkt_tol:
                converged = True
                break
        if not converged:
            kkt = _kkt_residual(X, y, beta, resid, thresh, norm_const, grad)
    return sweeps, bool(converged), kkt
