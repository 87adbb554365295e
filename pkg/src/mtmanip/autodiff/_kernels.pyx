# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im. Same column layout and summation order as _fallback."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] xp, int kh, int kw, int stride):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1], hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    cdef Py_ssize_t plane = ho * wo
    out_arr = np.empty((c * kh * kw, n * plane), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t ci, u, v, b, i, j, row, col0, y
    with nogil:
        for ci in range(c):
            for u in range(kh):
                for v in range(kw):
                    row = (ci * kh + u) * kw + v
                    for b in range(n):
                        col0 = b * plane
                        for i in range(ho):
                            y = i * stride + u
                            for j in range(wo):
                                out[row, col0 + i * wo + j] = xp[b, ci, y, j * stride + v]
    return out_arr


def col2im(const double[:, ::1] cols, tuple shape, int kh, int kw, int stride):
    cdef Py_ssize_t n = shape[0], c = shape[1], hp = shape[2], wp = shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    cdef Py_ssize_t plane = ho * wo
    out_arr = np.zeros((n, c, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ci, u, v, b, i, j, row, col0, y
    with nogil:
        for b in range(n):
            for ci in range(c):
                for u in range(kh):
                    for v in range(kw):
                        row = (ci * kh + u) * kw + v
                        col0 = b * plane
                        for i in range(ho):
                            y = i * stride + u
                            for j in range(wo):
                                out[b, ci, y, j * stride + v] += cols[row, col0 + i * wo + j]
    return out_arr
