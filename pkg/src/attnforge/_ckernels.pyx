# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Mirrors ``_kernels_py`` function for function."""
import numpy as np
from attnforge.errors import DegenerateRowError
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

cnp.import_array()


def softmax_rows(double[:, ::1] x, mask=None):
    cdef Py_ssize_t R = x.shape[0], m = x.shape[1], i, j, mr = 0
    cdef double[:, ::1] mk
    cdef bint has_mask = mask is not None
    out_arr = np.empty((R, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double mx, s, v
    if has_mask:
        mk = mask
        mr = mk.shape[0]
    for i in range(R):
        mx = -INFINITY
        for j in range(m):
            v = x[i, j]
            if has_mask:
                v = v + mk[i % mr, j]
            out[i, j] = v
            if v > mx:
                mx = v
        if mx == -INFINITY:
            raise DegenerateRowError("softmax row is fully masked (-inf everywhere)")
        s = 0.0
        for j in range(m):
            v = out[i, j]
            if v == -INFINITY:
                v = 0.0
            else:
                v = exp(v - mx)
            out[i, j] = v
            s += v
        for j in range(m):
            out[i, j] = out[i, j] / s
    return out_arr


def softmax_rows_backward(double[:, ::1] y, double[:, ::1] g):
    cdef Py_ssize_t R = y.shape[0], m = y.shape[1], i, j
    out_arr = np.empty((R, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double dot
    for i in range(R):
        dot = 0.0
        for j in range(m):
            dot += y[i, j] * g[i, j]
        for j in range(m):
            out[i, j] = y[i, j] * (g[i, j] - dot)
    return out_arr


def logsumexp_rows(double[:, ::1] x, double lam):
    cdef Py_ssize_t R = x.shape[0], m = x.shape[1], i, j
    out_arr = np.empty(R, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double mx, s, v
    for i in range(R):
        mx = -INFINITY
        for j in range(m):
            v = lam * x[i, j]
            if v > mx:
                mx = v
        s = 0.0
        for j in range(m):
            s += exp(lam * x[i, j] - mx)
        out[i] = (mx + log(s)) / lam
    return out_arr


def kron(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1], p = b.shape[0], q = b.shape[1]
    cdef Py_ssize_t i, j, s, t
    out_arr = np.empty((m * p, n * q), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double aij
    for i in range(m):
        for s in range(p):
            for j in range(n):
                aij = a[i, j]
                for t in range(q):
                    out[i * p + s, j * q + t] = aij * b[s, t]
    return out_arr


def fwht_rows(double[:, ::1] x):
    """Unnormalized Walsh-Hadamard transform of every row, in place."""
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], r, h, i, j
    cdef double a, b
    for r in range(rows):
        h = 1
        while h < n:
            i = 0
            while i < n:
                for j in range(i, i + h):
                    a = x[r, j]
                    b = x[r, j + h]
                    x[r, j] = a + b
                    x[r, j + h] = a - b
                i += 2 * h
            h *= 2
    return np.asarray(x)
