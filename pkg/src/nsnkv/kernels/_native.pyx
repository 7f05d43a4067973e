# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels: row-wise Walsh-Hadamard butterflies and codebook matching.

Arithmetic mirrors nsnkv.kernels._pyfallback exactly: float32 butterflies,
float64 match scores accumulated in component order, strict-> argmax.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def fwht_rows(cnp.ndarray[cnp.float32_t, ndim=2] a):
    cdef cnp.ndarray[cnp.float32_t, ndim=2] out = np.array(a, dtype=np.float32, order="C", copy=True)
    cdef Py_ssize_t n = out.shape[0]
    cdef Py_ssize_t d = out.shape[1]
    cdef float[:, ::1] m = out
    cdef Py_ssize_t r, h, i, j
    cdef float x, y
    cdef float scale = <float>(1.0 / sqrt(<double>d))
    for r in range(n):
        h = 1
        while h < d:
            i = 0
            while i < d:
                for j in range(i, i + h):
                    x = m[r, j]
                    y = m[r, j + h]
                    m[r, j] = x + y
                    m[r, j + h] = x - y
                i += 2 * h
            h *= 2
        for j in range(d):
            m[r, j] = m[r, j] * scale
    return out


def match_block(
    cnp.ndarray[cnp.float32_t, ndim=2] vecs,
    cnp.ndarray[cnp.float32_t, ndim=2] entries,
    cnp.ndarray[cnp.float64_t, ndim=1] inv_norms,
    bint fold,
):
    cdef Py_ssize_t m = vecs.shape[0]
    cdef Py_ssize_t sub = vecs.shape[1]
    cdef Py_ssize_t n_entries = entries.shape[0]
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] idx = np.empty(m, dtype=np.uint8)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] signs = np.empty(m, dtype=np.uint8)
    cdef const float[:, ::1] v = np.ascontiguousarray(vecs)
    cdef const float[:, ::1] e = np.ascontiguousarray(entries)
    cdef const double[::1] inv = inv_norms
    cdef cnp.uint8_t[::1] iv = idx
    cdef cnp.uint8_t[::1] sv = signs
    cdef Py_ssize_t i, k, c, best
    cdef double score, best_score
    cdef double u[64]
    cdef int sign_byte
    for i in range(m):
        sign_byte = 0
        if fold:
            for k in range(sub):
                if v[i, k] < 0:
                    u[k] = <double>(-v[i, k])
                    sign_byte |= 1 << k
                else:
                    u[k] = <double>v[i, k]
        else:
            for k in range(sub):
                u[k] = <double>v[i, k]
        best = 0
        best_score = -1e300
        for c in range(n_entries):
            score = u[0] * <double>e[c, 0]
            for k in range(1, sub):
                score = score + u[k] * <double>e[c, k]
            score = score * inv[c]
            if score > best_score:
                best_score = score
                best = c
        iv[i] = <cnp.uint8_t>best
        sv[i] = <cnp.uint8_t>sign_byte
    if fold:
        return idx, signs
    return idx, None
