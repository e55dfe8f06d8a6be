# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels in ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()


def resample_poly(const double[::1] x, const double[:, ::1] table,
                  const cnp.int64_t[::1] base, const cnp.int64_t[::1] phase):
    cdef Py_ssize_t n_out = base.shape[0]
    cdef Py_ssize_t taps = table.shape[1]
    cdef Py_ssize_t n, j, b, p
    cdef double acc
    out = np.empty(n_out, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for n in range(n_out):
            b = base[n]
            p = phase[n]
            acc = 0.0
            for j in range(taps):
                acc = acc + table[p, j] * x[b + j]
            o[n] = acc
    return out


def attention_forward(const double[:, ::1] q, const double[:, :, ::1] k,
                      const double[:, :, ::1] v, int heads):
    cdef Py_ssize_t T = q.shape[0]
    cdef Py_ssize_t D = q.shape[1]
    cdef Py_ssize_t N = k.shape[0]
    cdef Py_ssize_t dh = D // heads
    cdef double scale = 1.0 / sqrt(<double>dh)
    cdef Py_ssize_t t, h, i, d, off
    cdef double s, m, z, wi
    out_arr = np.zeros((T, D), dtype=np.float64)
    w_arr = np.empty((heads, T, N), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, :, ::1] w = w_arr
    with nogil:
        for t in range(T):
            for h in range(heads):
                off = h * dh
                m = -1e308
                for i in range(N):
                    s = 0.0
                    for d in range(dh):
                        s = s + q[t, off + d] * k[i, t, off + d]
                    s = s * scale
                    w[h, t, i] = s
                    if s > m:
                        m = s
                z = 0.0
                for i in range(N):
                    wi = exp(w[h, t, i] - m)
                    w[h, t, i] = wi
                    z = z + wi
                for i in range(N):
                    wi = w[h, t, i] / z
                    w[h, t, i] = wi
                    for d in range(dh):
                        out[t, off + d] += wi * v[i, t, off + d]
    return out_arr, w_arr


def attention_backward(const double[:, ::1] q, const double[:, :, ::1] k,
                       const double[:, :, ::1] v, const double[:, :, ::1] w,
                       const double[:, ::1] g_out, int heads):
    cdef Py_ssize_t T = q.shape[0]
    cdef Py_ssize_t D = q.shape[1]
    cdef Py_ssize_t N = k.shape[0]
    cdef Py_ssize_t dh = D // heads
    cdef double scale = 1.0 / sqrt(<double>dh)
    cdef Py_ssize_t t, h, i, d, off
    cdef double gw, dot, gs
    gq_arr = np.zeros((T, D), dtype=np.float64)
    gk_arr = np.empty((N, T, D), dtype=np.float64)
    gv_arr = np.empty((N, T, D), dtype=np.float64)
    gw_arr = np.empty(N, dtype=np.float64)
    cdef double[:, ::1] gq = gq_arr
    cdef double[:, :, ::1] gk = gk_arr
    cdef double[:, :, ::1] gv = gv_arr
    cdef double[::1] gws = gw_arr
    with nogil:
        for t in range(T):
            for h in range(heads):
                off = h * dh
                dot = 0.0
                for i in range(N):
                    gw = 0.0
                    for d in range(dh):
                        gw = gw + g_out[t, off + d] * v[i, t, off + d]
                        gv[i, t, off + d] = w[h, t, i] * g_out[t, off + d]
                    gws[i] = gw
                    dot = dot + w[h, t, i] * gw
                for i in range(N):
                    gs = w[h, t, i] * (gws[i] - dot) * scale
                    for d in range(dh):
                        gq[t, off + d] += gs * k[i, t, off + d]
                        gk[i, t, off + d] = gs * q[t, off + d]
    return gq_arr, gk_arr, gv_arr


def confusion_matrix(const cnp.int64_t[::1] ref, const cnp.int64_t[::1] pred,
                     Py_ssize_t n_classes):
    cm_arr = np.zeros((n_classes, n_classes), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] cm = cm_arr
    cdef Py_ssize_t n
    with nogil:
        for n in range(ref.shape[0]):
            cm[ref[n], pred[n]] += 1
    return cm_arr
