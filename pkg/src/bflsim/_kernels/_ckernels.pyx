# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels`` (same signatures)."""

import numpy as np

cimport numpy as cnp
from libc.math cimport log2, sqrt

cnp.import_array()


def offload_rates(gains, off, es, sub, p, b, double noise):
    cdef const double[:, :, ::1] H = np.ascontiguousarray(gains, dtype=np.float64)
    cdef const cnp.npy_bool[::1] o = np.ascontiguousarray(off, dtype=np.bool_)
    cdef const cnp.int64_t[::1] m = np.ascontiguousarray(es, dtype=np.int64)
    cdef const cnp.int64_t[::1] g = np.ascontiguousarray(sub, dtype=np.int64)
    cdef const double[::1] P = np.ascontiguousarray(p, dtype=np.float64)
    cdef const double[::1] B = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t N = o.shape[0], i, j
    out = np.zeros(N)
    cdef double[::1] r = out
    cdef double interf, sig
    for i in range(N):
        if not o[i]:
            continue
        interf = 0.0
        for j in range(N):
            if o[j] and j != i and g[j] == g[i] and m[j] != m[i]:
                interf += P[j] * H[j, m[i], g[i]]
        sig = P[i] * H[i, m[i], g[i]]
        r[i] = B[i] * log2(1.0 + sig / (noise + interf))
    return out


def pairwise_max_ratio(G, V):
    cdef const double[:, ::1] Gm = np.ascontiguousarray(G, dtype=np.float64)
    cdef const double[:, ::1] Vm = np.ascontiguousarray(V, dtype=np.float64)
    cdef Py_ssize_t n = Gm.shape[0], dg_ = Gm.shape[1], dv_ = Vm.shape[1], i, j, k
    cdef double best = 0.0, sv, sg, t
    for i in range(n - 1):
        for j in range(i + 1, n):
            sv = 0.0
            for k in range(dv_):
                t = Vm[j, k] - Vm[i, k]
                sv += t * t
            if sv <= 0.0:
                continue
            sg = 0.0
            for k in range(dg_):
                t = Gm[j, k] - Gm[i, k]
                sg += t * t
            t = sqrt(sg) / sqrt(sv)
            if t > best:
                best = t
    return best
