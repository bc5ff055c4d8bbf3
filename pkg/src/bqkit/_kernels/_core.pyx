# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: direct convolution and k-means assignment.

Semantics match fallback.py exactly; see that module for the contracts.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                   const double[::1] b, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    y_arr = np.empty((B, O, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, ::1] y = y_arr
    cdef Py_ssize_t n, o, c, p, q, i, j, hi, wj
    cdef double acc
    with nogil:
        for n in range(B):
            for o in range(O):
                for p in range(Ho):
                    for q in range(Wo):
                        acc = b[o]
                        for c in range(C):
                            for i in range(k):
                                hi = p * stride + i - pad
                                if hi < 0 or hi >= H:
                                    continue
                                for j in range(k):
                                    wj = q * stride + j - pad
                                    if wj < 0 or wj >= W:
                                        continue
                                    acc += x[n, c, hi, wj] * w[o, c, i, j]
                        y[n, o, p, q] = acc
    return y_arr


def conv2d_backward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                    const double[:, :, :, ::1] dy, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t Ho = dy.shape[2], Wo = dy.shape[3]
    dx_arr = np.zeros((B, C, H, W), dtype=np.float64)
    dw_arr = np.zeros((O, C, k, k), dtype=np.float64)
    db_arr = np.zeros(O, dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef double[:, :, :, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef Py_ssize_t n, o, c, p, q, i, j, hi, wj
    cdef double g
    with nogil:
        for n in range(B):
            for o in range(O):
                for p in range(Ho):
                    for q in range(Wo):
                        g = dy[n, o, p, q]
                        db[o] += g
                        for c in range(C):
                            for i in range(k):
                                hi = p * stride + i - pad
                                if hi < 0 or hi >= H:
                                    continue
                                for j in range(k):
                                    wj = q * stride + j - pad
                                    if wj < 0 or wj >= W:
                                        continue
                                    dw[o, c, i, j] += g * x[n, c, hi, wj]
                                    dx[n, c, hi, wj] += g * w[o, c, i, j]
    return dx_arr, dw_arr, db_arr


def kmeans_assign(const double[:, ::1] points, const double[:, ::1] centroids):
    cdef Py_ssize_t n = points.shape[0], d = points.shape[1], b = centroids.shape[0]
    labels_arr = np.empty(n, dtype=np.int64)
    sqd_arr = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] labels = labels_arr
    cdef double[::1] sqd = sqd_arr
    cdef Py_ssize_t i, j, t, best
    cdef double acc, diff, best_d
    with nogil:
        for i in range(n):
            best = 0
            best_d = 0.0
            for j in range(b):
                acc = 0.0
                for t in range(d):
                    diff = points[i, t] - centroids[j, t]
                    acc += diff * diff
                if j == 0 or acc < best_d:
                    best_d = acc
                    best = j
            labels[i] = best
            sqd[i] = best_d
    return labels_arr, sqd_arr
