# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled segment kernels (scatter-sum and scatter-max over rows)."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def _as2d(values):
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim == 1:
        return arr.reshape(-1, 1), True
    return arr.reshape(arr.shape[0], -1), False


def segment_sum(values, segments, Py_ssize_t num_segments):
    arr, flat = _as2d(values)
    cdef const double[:, ::1] v = arr
    cdef const cnp.intp_t[::1] seg = np.ascontiguousarray(segments, dtype=np.intp)
    cdef Py_ssize_t n = v.shape[0], d = v.shape[1], i, j, s
    if seg.shape[0] != n:
        raise ValueError("segments must align with rows of values")
    out = np.zeros((num_segments, d), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n):
        s = seg[i]
        if s < 0 or s >= num_segments:
            raise IndexError(f"segment id {s} out of range")
        for j in range(d):
            o[s, j] += v[i, j]
    return out.reshape(num_segments) if flat else out.reshape((num_segments,) + np.shape(values)[1:])


def segment_max(values, segments, Py_ssize_t num_segments):
    arr, flat = _as2d(values)
    cdef const double[:, ::1] v = arr
    cdef const cnp.intp_t[::1] seg = np.ascontiguousarray(segments, dtype=np.intp)
    cdef Py_ssize_t n = v.shape[0], d = v.shape[1], i, j, s
    if seg.shape[0] != n:
        raise ValueError("segments must align with rows of values")
    out = np.full((num_segments, d), -np.inf, dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n):
        s = seg[i]
        if s < 0 or s >= num_segments:
            raise IndexError(f"segment id {s} out of range")
        for j in range(d):
            if v[i, j] > o[s, j]:
                o[s, j] = v[i, j]
    return out.reshape(num_segments) if flat else out.reshape((num_segments,) + np.shape(values)[1:])
