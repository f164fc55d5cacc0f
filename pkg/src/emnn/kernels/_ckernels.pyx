# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled segment reduction kernels.

These are the hot loops of message aggregation: every layer does a handful
of segment reductions per forward/backward pass, and numpy's ufunc.at is an
order of magnitude slower than a plain C loop here.
"""

import numpy as np

cimport numpy as cnp

NAME = "native"

ctypedef fused real:
    float
    double


def segment_sum(real[:, ::1] values, cnp.int64_t[::1] ids, Py_ssize_t num_segments):
    cdef Py_ssize_t n_rows = values.shape[0]
    cdef Py_ssize_t n_cols = values.shape[1]
    out_arr = np.zeros((num_segments, n_cols),
                       dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef cnp.int64_t s
    for i in range(n_rows):
        s = ids[i]
        for j in range(n_cols):
            out[s, j] += values[i, j]
    return out_arr


def segment_max(real[:, ::1] values, cnp.int64_t[::1] ids, Py_ssize_t num_segments):
    cdef Py_ssize_t n_rows = values.shape[0]
    cdef Py_ssize_t n_cols = values.shape[1]
    out_arr = np.zeros((num_segments, n_cols),
                       dtype=np.float32 if real is float else np.float64)
    arg_arr = np.full((num_segments, n_cols), -1, dtype=np.int64)
    cdef real[:, ::1] out = out_arr
    cdef cnp.int64_t[:, ::1] arg = arg_arr
    cdef Py_ssize_t i, j
    cdef cnp.int64_t s
    for i in range(n_rows):
        s = ids[i]
        for j in range(n_cols):
            # strict > keeps the first occurrence among ties
            if arg[s, j] < 0 or values[i, j] > out[s, j]:
                out[s, j] = values[i, j]
                arg[s, j] = i
    return out_arr, arg_arr


def scatter_add(real[:, ::1] out, cnp.int64_t[::1] ids, real[:, ::1] values):
    cdef Py_ssize_t n_rows = values.shape[0]
    cdef Py_ssize_t n_cols = values.shape[1]
    cdef Py_ssize_t i, j
    cdef cnp.int64_t s
    for i in range(n_rows):
        s = ids[i]
        for j in range(n_cols):
            out[s, j] += values[i, j]
    return out
