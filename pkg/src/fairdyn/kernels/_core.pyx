# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled LSVI replay kernels.

Semantics match fairdyn.kernels.reference exactly (shared optimism bonus,
upper clip at the horizon, max-subtracted softmax, V clipped into
[0, horizon]). The batch kernel performs one BLAS dgemm against the
combined matrix [gram_inv | w_r | w_g] and fuses the bonus, softmax, and
value reduction in a single C pass over the rows.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, fmax, fmin, sqrt
from scipy.linalg.cython_blas cimport dgemm, dgemv, dger

cnp.import_array()


cdef void _optimistic_q(double* x, int rows, int d, double* combined,
                        double* g_buf, double bonus, double horizon,
                        double* q_r, double* q_g) noexcept nogil:
    """q_buffers <- min(<w, phi> + bonus*sqrt(phi' gram_inv phi), horizon).

    x is (rows, d) row-major; combined is (d, d+2) row-major holding
    gram_inv columns then w_r then w_g; g_buf is (rows, d+2) scratch.
    Row-major arrays are handed to Fortran BLAS as their own transposes.
    """
    cdef int m = d + 2
    cdef int n = rows
    cdef int k = d
    cdef double one = 1.0
    cdef double zero = 0.0
    dgemm("N", "N", &m, &n, &k, &one, combined, &m, x, &k, &zero, g_buf, &m)
    cdef int i, j
    cdef double quad, spread
    for i in range(rows):
        quad = 0.0
        for j in range(d):
            quad += x[i * d + j] * g_buf[i * m + j]
        spread = bonus * sqrt(fmax(quad, 0.0))
        q_r[i] = fmin(g_buf[i * m + d] + spread, horizon)
        q_g[i] = fmin(g_buf[i * m + d + 1] + spread, horizon)


cdef cnp.ndarray _combined_matrix(object gram_inv, object w_r, object w_g):
    cdef cnp.ndarray[double, ndim=2] gi = np.ascontiguousarray(gram_inv, dtype=np.float64)
    cdef int d = gi.shape[0]
    out = np.empty((d, d + 2), dtype=np.float64)
    out[:, :d] = gi
    out[:, d] = np.asarray(w_r, dtype=np.float64)
    out[:, d + 1] = np.asarray(w_g, dtype=np.float64)
    return out


def locus_values(phi, gram_inv, w_r, w_g, double bonus, double horizon):
    """Optimistic (q_r, q_g) at one state's locus feature block (M, d)."""
    cdef cnp.ndarray[double, ndim=2] x = np.ascontiguousarray(phi, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] combined = _combined_matrix(gram_inv, w_r, w_g)
    cdef int rows = x.shape[0]
    cdef int d = x.shape[1]
    cdef cnp.ndarray[double, ndim=2] g_buf = np.empty((rows, d + 2), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] q_r = np.empty(rows, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] q_g = np.empty(rows, dtype=np.float64)
    with nogil:
        _optimistic_q(&x[0, 0], rows, d, &combined[0, 0], &g_buf[0, 0],
                      bonus, horizon, &q_r[0], &q_g[0])
    return q_r, q_g


def batch_state_values(blocks, gram_inv, w_r, w_g, double bonus,
                       double temperature, double nu, double horizon):
    """Policy values (V_r, V_g) over (N, M, d) locus feature blocks."""
    cdef cnp.ndarray[double, ndim=3] b = np.ascontiguousarray(blocks, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] combined = _combined_matrix(gram_inv, w_r, w_g)
    cdef int n_states = b.shape[0]
    cdef int m_loci = b.shape[1]
    cdef int d = b.shape[2]
    cdef int rows = n_states * m_loci
    cdef cnp.ndarray[double, ndim=2] g_buf = np.empty((rows, d + 2), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] q_r = np.empty(rows, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] q_g = np.empty(rows, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] v_r = np.empty(n_states, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] v_g = np.empty(n_states, dtype=np.float64)

    cdef double* qr = &q_r[0]
    cdef double* qg = &q_g[0]
    cdef double* vr = &v_r[0]
    cdef double* vg = &v_g[0]
    cdef int s, i, base
    cdef double logit, lmax, e, total, acc_r, acc_g
    with nogil:
        _optimistic_q(&b[0, 0, 0], rows, d, &combined[0, 0], &g_buf[0, 0],
                      bonus, horizon, qr, qg)
        for s in range(n_states):
            base = s * m_loci
            lmax = temperature * (qr[base] + nu * qg[base])
            for i in range(1, m_loci):
                logit = temperature * (qr[base + i] + nu * qg[base + i])
                if logit > lmax:
                    lmax = logit
            total = 0.0
            acc_r = 0.0
            acc_g = 0.0
            for i in range(m_loci):
                logit = temperature * (qr[base + i] + nu * qg[base + i])
                e = exp(logit - lmax)
                total += e
                acc_r += e * qr[base + i]
                acc_g += e * qg[base + i]
            vr[s] = fmin(fmax(acc_r / total, 0.0), horizon)
            vg[s] = fmin(fmax(acc_g / total, 0.0), horizon)
    return v_r, v_g


def rank_one_update(gram_inv, phi, double sign=1.0):
    """In-place Sherman-Morrison update of gram_inv for gram +/- phi phi'."""
    cdef cnp.ndarray[double, ndim=2] a = gram_inv
    if a.dtype != np.float64 or not a.flags.c_contiguous:
        raise TypeError("gram_inv must be a C-contiguous float64 array")
    cdef cnp.ndarray[double, ndim=1] p = np.ascontiguousarray(phi, dtype=np.float64)
    cdef int d = a.shape[0]
    cdef cnp.ndarray[double, ndim=1] u = np.empty(d, dtype=np.float64)
    cdef int inc = 1
    cdef double one = 1.0
    cdef double zero = 0.0
    # row-major buffer is its own transpose to BLAS; "T" recovers gram_inv @ phi
    dgemv("T", &d, &d, &one, &a[0, 0], &d, &p[0], &inc, &zero, &u[0], &inc)
    cdef double dot = 0.0
    cdef int i
    for i in range(d):
        dot += p[i] * u[i]
    cdef double denom = 1.0 + sign * dot
    if denom <= 1e-12:
        raise FloatingPointError("rank-one update would make the Gram matrix singular")
    cdef double alpha = -sign / denom
    dger(&d, &d, &alpha, &u[0], &inc, &u[0], &inc, &a[0, 0], &d)
    return gram_inv
