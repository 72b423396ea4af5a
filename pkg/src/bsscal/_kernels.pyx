# cython: language_level=3
"""Compiled versions of the inner loops used by design-matrix assembly and
the experimental-data likelihood. Signatures match ``_fallback``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def main_basis(u, const double[:, :] table, Py_ssize_t n_terms):
    cdef const double[::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    cdef Py_ssize_t n = uv.shape[0]
    cdef Py_ssize_t m = table.shape[0]
    out_arr = np.empty((n, n_terms), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, k, i0, i1
    cdef double x, f, ui
    for i in range(n):
        ui = uv[i]
        if n_terms >= 1:
            out[i, 0] = ui - 0.5
        if n_terms >= 2:
            out[i, 1] = ui * ui - ui + 1.0 / 6.0
        if n_terms > 2:
            x = ui * m - 0.5
            i0 = <Py_ssize_t> floor(x)
            f = x - i0
            i0 = i0 % m
            if i0 < 0:
                i0 += m
            i1 = i0 + 1
            if i1 == m:
                i1 = 0
            for k in range(2, n_terms):
                out[i, k] = (1.0 - f) * table[i0, k - 2] + f * table[i1, k - 2]
    return out_arr


def product_columns(const double[:, :] E, idx):
    cdef const long long[:, ::1] ix = np.ascontiguousarray(idx, dtype=np.int64)
    cdef Py_ssize_t n = E.shape[0]
    cdef Py_ssize_t T = ix.shape[0]
    cdef Py_ssize_t V = ix.shape[1]
    out_arr = np.empty((n, T), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, t, v
    cdef double acc
    for i in range(n):
        for t in range(T):
            acc = E[i, ix[t, 0]]
            for v in range(1, V):
                acc *= E[i, ix[t, v]]
            out[i, t] = acc
    return out_arr


def row_quadform(E, Linv):
    cdef const double[:, ::1] e = np.ascontiguousarray(E, dtype=np.float64)
    cdef const double[:, ::1] L = np.ascontiguousarray(Linv, dtype=np.float64)
    cdef Py_ssize_t n = e.shape[0]
    cdef Py_ssize_t c = e.shape[1]
    cdef Py_ssize_t i, a, b
    cdef double total = 0.0, z
    for i in range(n):
        for a in range(c):
            z = 0.0
            for b in range(a + 1):
                z += L[a, b] * e[i, b]
            total += z * z
    return total
