# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fused conv/ReLU/max-over-time kernel (float32 and float64)."""
import numpy as np

from libc.math cimport INFINITY

ctypedef fused real:
    float
    double


def conv_relu_maxpool_forward(real[:, :, ::1] x, Py_ssize_t[::1] lengths,
                              real[:, :, ::1] w, real[::1] b):
    cdef Py_ssize_t n_batch = x.shape[0], dim = x.shape[2]
    cdef Py_ssize_t n_maps = w.shape[0], width = w.shape[1]
    cdef Py_ssize_t bi, m, t, k, j, n_pos, best_t
    cdef double acc, best
    dtype = np.float32 if real is float else np.float64
    pooled_arr = np.empty((n_batch, n_maps), dtype=dtype)
    arg_arr = np.empty((n_batch, n_maps), dtype=np.intp)
    cdef real[:, ::1] pooled = pooled_arr
    cdef Py_ssize_t[:, ::1] arg = arg_arr
    with nogil:
        for bi in range(n_batch):
            n_pos = lengths[bi] - width + 1
            for m in range(n_maps):
                best = -INFINITY
                best_t = 0
                for t in range(n_pos):
                    acc = 0.0
                    for k in range(width):
                        for j in range(dim):
                            acc = acc + x[bi, t + k, j] * w[m, k, j]
                    acc = acc + b[m]
                    if acc > best:
                        best = acc
                        best_t = t
                pooled[bi, m] = <real>(best if best > 0.0 else 0.0)
                arg[bi, m] = best_t
    return pooled_arr, arg_arr


def conv_relu_maxpool_backward(real[:, ::1] grad, real[:, ::1] pooled,
                               Py_ssize_t[:, ::1] arg, real[:, :, ::1] x,
                               real[:, :, ::1] w, bint need_dx=False):
    cdef Py_ssize_t n_batch = x.shape[0], dim = x.shape[2]
    cdef Py_ssize_t n_maps = w.shape[0], width = w.shape[1]
    cdef Py_ssize_t bi, m, k, j, t0
    cdef real g
    dtype = np.float32 if real is float else np.float64
    dw_arr = np.zeros((n_maps, width, dim), dtype=dtype)
    db_arr = np.zeros(n_maps, dtype=dtype)
    dx_arr = np.zeros((n_batch, x.shape[1], dim), dtype=dtype) if need_dx else None
    cdef real[:, :, ::1] dw = dw_arr
    cdef real[::1] db = db_arr
    cdef real[:, :, ::1] dx
    if need_dx:
        dx = dx_arr
    with nogil:
        for bi in range(n_batch):
            for m in range(n_maps):
                if pooled[bi, m] <= 0:
                    continue
                g = grad[bi, m]
                t0 = arg[bi, m]
                db[m] += g
                for k in range(width):
                    for j in range(dim):
                        dw[m, k, j] += g * x[bi, t0 + k, j]
                        if need_dx:
                            dx[bi, t0 + k, j] += g * w[m, k, j]
    return dw_arr, db_arr, dx_arr
