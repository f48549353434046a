# cython: language_level=3
# cython: boundscheck=False
# cython: wraparound=False
# cython: cdivision=True
"""Compiled hot kernels, mirroring ``_ref`` function-for-function.

The O(n^2 d) contractions go through BLAS dgemm (same backend NumPy uses);
the win over the fallback is fusing the elementwise stages into single
passes instead of materializing a temporary per operation.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, exp, log
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef void _gemm_abt(
    const double[:, ::1] a, const double[:, ::1] b, double alpha, double[:, ::1] c
) noexcept nogil:
    # c (m, n) = alpha * a @ b.T with a (m, k), b (n, k), all C-contiguous.
    # Row-major arrays are column-major transposes, so compute c.T = b @ a.T.
    cdef int m = <int> a.shape[0]
    cdef int n = <int> b.shape[0]
    cdef int k = <int> a.shape[1]
    cdef double beta = 0.0
    cdef char ct = b'T'
    cdef char cn = b'N'
    cdef Py_ssize_t i, j
    if m <= 0 or n <= 0:
        return
    if k <= 0:
        for i in range(m):
            for j in range(n):
                c[i, j] = 0.0
        return
    dgemm(&ct, &cn, &n, &m, &k, &alpha,
          <double *> &b[0, 0], &k, <double *> &a[0, 0], &k,
          &beta, &c[0, 0], &n)


cdef void _gemm_ab(
    const double[:, ::1] a, const double[:, ::1] b, double alpha, double[:, ::1] c
) noexcept nogil:
    # c (m, n) = alpha * a @ b with a (m, k), b (k, n), all C-contiguous.
    cdef int m = <int> a.shape[0]
    cdef int k = <int> a.shape[1]
    cdef int n = <int> b.shape[1]
    cdef double beta = 0.0
    cdef char cn = b'N'
    cdef Py_ssize_t i, j
    if m <= 0 or n <= 0:
        return
    if k <= 0:
        for i in range(m):
            for j in range(n):
                c[i, j] = 0.0
        return
    dgemm(&cn, &cn, &n, &m, &k, &alpha,
          <double *> &b[0, 0], &n, <double *> &a[0, 0], &k,
          &beta, &c[0, 0], &n)


cdef void _softmax_offdiag(const double[:, ::1] z, double[:, ::1] p, double[:, ::1] logp) noexcept nogil:
    cdef Py_ssize_t n = z.shape[0]
    cdef Py_ssize_t i, j
    cdef double m, denom, logdenom, ez
    for i in range(n):
        m = -INFINITY
        for j in range(n):
            if j != i and z[i, j] > m:
                m = z[i, j]
        denom = 0.0
        for j in range(n):
            if j != i:
                ez = exp(z[i, j] - m)
                p[i, j] = ez
                denom += ez
        logdenom = log(denom)
        for j in range(n):
            if j == i:
                p[i, j] = 0.0
                logp[i, j] = -INFINITY
            else:
                p[i, j] /= denom
                logp[i, j] = (z[i, j] - m) - logdenom


cdef void _symmetrize(const double[:, ::1] g, double[:, ::1] gsym) noexcept nogil:
    cdef Py_ssize_t n = g.shape[0]
    cdef Py_ssize_t i, j
    cdef double s
    for i in range(n):
        for j in range(i, n):
            s = g[i, j] + g[j, i]
            gsym[i, j] = s
            gsym[j, i] = s


def similarity_matrix(const double[:, ::1] e, double temperature):
    cdef Py_ssize_t n = e.shape[0]
    z_arr = np.empty((n, n))
    p_arr = np.empty((n, n))
    logp_arr = np.empty((n, n))
    cdef double[:, ::1] z = z_arr
    cdef double[:, ::1] p = p_arr
    cdef double[:, ::1] logp = logp_arr
    with nogil:
        _gemm_abt(e, e, 1.0 / temperature, z)
        _softmax_offdiag(z, p, logp)
    return p_arr


def supcon_loss_grad(
    const double[:, ::1] e,
    const cnp.int64_t[::1] labels,
    const cnp.uint8_t[::1] anchors,
    double temperature,
):
    cdef Py_ssize_t n = e.shape[0]
    cdef Py_ssize_t d = e.shape[1]
    cdef Py_ssize_t i, j
    cdef bint any_anchor = False
    for i in range(n):
        if anchors[i]:
            any_anchor = True
            break
    if not any_anchor:
        return 0.0, np.zeros((n, d))

    z_arr = np.empty((n, n))
    p_arr = np.empty((n, n))
    logp_arr = np.empty((n, n))
    g_arr = np.zeros((n, n))
    grad_arr = np.empty((n, d))
    cdef double[:, ::1] z = z_arr
    cdef double[:, ::1] p = p_arr
    cdef double[:, ::1] logp = logp_arr
    cdef double[:, ::1] g = g_arr
    cdef double[:, ::1] grad = grad_arr
    cdef double loss = 0.0
    cdef double npos, row
    with nogil:
        _gemm_abt(e, e, 1.0 / temperature, z)
        _softmax_offdiag(z, p, logp)
        for i in range(n):
            if not anchors[i]:
                continue
            npos = 0.0
            for j in range(n):
                if j != i and labels[j] == labels[i]:
                    npos += 1.0
            row = 0.0
            for j in range(n):
                if j != i and labels[j] == labels[i]:
                    row += logp[i, j]
                    g[i, j] = p[i, j] - 1.0 / npos
                else:
                    g[i, j] = p[i, j]
            loss -= row / npos
        _symmetrize(g, z)  # z is free once p/logp exist; reuse it
        _gemm_ab(z, e, 1.0 / temperature, grad)
    return loss, grad_arr


def ird_loss_grad(const double[:, ::1] r_old, const double[:, ::1] e, double temperature):
    cdef Py_ssize_t n = e.shape[0]
    cdef Py_ssize_t d = e.shape[1]
    cdef Py_ssize_t i, j
    z_arr = np.empty((n, n))
    p_arr = np.empty((n, n))
    logp_arr = np.empty((n, n))
    g_arr = np.empty((n, n))
    grad_arr = np.empty((n, d))
    cdef double[:, ::1] z = z_arr
    cdef double[:, ::1] p = p_arr
    cdef double[:, ::1] logp = logp_arr
    cdef double[:, ::1] g = g_arr
    cdef double[:, ::1] grad = grad_arr
    cdef double loss = 0.0
    with nogil:
        _gemm_abt(e, e, 1.0 / temperature, z)
        _softmax_offdiag(z, p, logp)
        for i in range(n):
            for j in range(n):
                g[i, j] = p[i, j] - r_old[i, j]
                if j != i:
                    loss -= r_old[i, j] * logp[i, j]
        _symmetrize(g, z)
        _gemm_ab(z, e, 1.0 / temperature, grad)
    return loss, grad_arr


def mwp_propagate(const double[:, ::1] acts, const double[:, ::1] weights, const double[:, ::1] p_upper):
    cdef Py_ssize_t n = acts.shape[0]
    cdef Py_ssize_t jdim = acts.shape[1]
    cdef Py_ssize_t idim = weights.shape[1]
    cdef Py_ssize_t s, t, u
    apos_arr = np.empty((n, jdim))
    wpos_arr = np.empty((jdim, idim))
    scale_arr = np.empty((n, idim))
    out_arr = np.empty((n, jdim))
    cdef double[:, ::1] apos = apos_arr
    cdef double[:, ::1] wpos = wpos_arr
    cdef double[:, ::1] scale = scale_arr
    cdef double[:, ::1] out = out_arr
    cdef double a, w, denom
    with nogil:
        for s in range(n):
            for t in range(jdim):
                a = acts[s, t]
                apos[s, t] = a if a > 0.0 else 0.0
        for t in range(jdim):
            for u in range(idim):
                w = weights[t, u]
                wpos[t, u] = w if w > 0.0 else 0.0
        _gemm_ab(apos, wpos, 1.0, scale)
        for s in range(n):
            for u in range(idim):
                denom = scale[s, u]
                scale[s, u] = p_upper[s, u] / denom if denom > 0.0 else 0.0
        _gemm_abt(scale, wpos, 1.0, out)
        for s in range(n):
            for t in range(jdim):
                out[s, t] *= apos[s, t]
    return out_arr
