# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled RK4 sweeps; same contract as :mod:`cdsmooth._kernels_py`."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline void _affine(double[:, ::1] M, double[::1] c, double[::1] y,
                         double[::1] out, Py_ssize_t n) nogil:
    cdef Py_ssize_t i, j
    cdef double s
    for i in range(n):
        s = c[i]
        for j in range(n):
            s += M[i, j] * y[j]
        out[i] = s


cdef inline void _lyap(double[:, ::1] M, double[:, ::1] S, double[:, ::1] Y,
                       double[:, ::1] tmp, double[:, ::1] out, Py_ssize_t n) nogil:
    cdef Py_ssize_t i, j, k
    cdef double s
    for i in range(n):
        for j in range(n):
            s = 0.0
            for k in range(n):
                s += M[i, k] * Y[k, j]
            tmp[i, j] = s
    for i in range(n):
        for j in range(n):
            out[i, j] = tmp[i, j] + tmp[j, i] + S[i, j]


def affine_rk4(double[:, :, ::1] Ma, double[:, :, ::1] Mm, double[:, :, ::1] Mb,
               double[:, ::1] ca, double[:, ::1] cm, double[:, ::1] cb,
               y0, double h, jumps=None):
    cdef Py_ssize_t K = ca.shape[0]
    cdef Py_ssize_t n = ca.shape[1]
    cdef Py_ssize_t k, i
    arrive_np = np.empty((K + 1, n))
    depart_np = np.empty((K + 1, n))
    cdef double[:, ::1] arrive = arrive_np
    cdef double[:, ::1] depart = depart_np
    cdef double[::1] y = np.array(y0, dtype=np.float64).ravel()
    cdef double[::1] tmp = np.empty(n)
    cdef double[::1] k1 = np.empty(n)
    cdef double[::1] k2 = np.empty(n)
    cdef double[::1] k3 = np.empty(n)
    cdef double[::1] k4 = np.empty(n)
    cdef bint has_jumps = jumps is not None
    cdef double[:, ::1] J = (np.ascontiguousarray(jumps, dtype=np.float64) if has_jumps
                             else np.zeros((1, n)))
    cdef double h2 = 0.5 * h
    cdef double h6 = h / 6.0
    with nogil:
        for i in range(n):
            arrive[0, i] = y[i]
            if has_jumps:
                y[i] += J[0, i]
            depart[0, i] = y[i]
        for k in range(K):
            _affine(Ma[k], ca[k], y, k1, n)
            for i in range(n):
                tmp[i] = y[i] + h2 * k1[i]
            _affine(Mm[k], cm[k], tmp, k2, n)
            for i in range(n):
                tmp[i] = y[i] + h2 * k2[i]
            _affine(Mm[k], cm[k], tmp, k3, n)
            for i in range(n):
                tmp[i] = y[i] + h * k3[i]
            _affine(Mb[k], cb[k], tmp, k4, n)
            for i in range(n):
                y[i] += h6 * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i])
                arrive[k + 1, i] = y[i]
                if has_jumps:
                    y[i] += J[k + 1, i]
                depart[k + 1, i] = y[i]
    return arrive_np, depart_np


def lyap_rk4(double[:, :, ::1] Ma, double[:, :, ::1] Mm, double[:, :, ::1] Mb,
             double[:, :, ::1] Sa, double[:, :, ::1] Sm, double[:, :, ::1] Sb,
             Y0, double h, jumps=None):
    cdef Py_ssize_t K = Sa.shape[0]
    cdef Py_ssize_t n = Sa.shape[1]
    cdef Py_ssize_t k, i, j
    arrive_np = np.empty((K + 1, n, n))
    depart_np = np.empty((K + 1, n, n))
    cdef double[:, :, ::1] arrive = arrive_np
    cdef double[:, :, ::1] depart = depart_np
    cdef double[:, ::1] Y = np.array(Y0, dtype=np.float64).reshape(n, n)
    cdef double[:, ::1] tmp = np.empty((n, n))
    cdef double[:, ::1] prod = np.empty((n, n))
    cdef double[:, ::1] k1 = np.empty((n, n))
    cdef double[:, ::1] k2 = np.empty((n, n))
    cdef double[:, ::1] k3 = np.empty((n, n))
    cdef double[:, ::1] k4 = np.empty((n, n))
    cdef bint has_jumps = jumps is not None
    cdef double[:, :, ::1] J = (np.ascontiguousarray(jumps, dtype=np.float64) if has_jumps
                                else np.zeros((1, n, n)))
    cdef double h2 = 0.5 * h
    cdef double h6 = h / 6.0
    cdef double s
    with nogil:
        for i in range(n):
            for j in range(n):
                arrive[0, i, j] = Y[i, j]
                if has_jumps:
                    Y[i, j] += J[0, i, j]
                depart[0, i, j] = Y[i, j]
        for k in range(K):
            _lyap(Ma[k], Sa[k], Y, prod, k1, n)
            for i in range(n):
                for j in range(n):
                    tmp[i, j] = Y[i, j] + h2 * k1[i, j]
            _lyap(Mm[k], Sm[k], tmp, prod, k2, n)
            for i in range(n):
                for j in range(n):
                    tmp[i, j] = Y[i, j] + h2 * k2[i, j]
            _lyap(Mm[k], Sm[k], tmp, prod, k3, n)
            for i in range(n):
                for j in range(n):
                    tmp[i, j] = Y[i, j] + h * k3[i, j]
            _lyap(Mb[k], Sb[k], tmp, prod, k4, n)
            for i in range(n):
                for j in range(n):
                    Y[i, j] += h6 * (k1[i, j] + 2.0 * (k2[i, j] + k3[i, j]) + k4[i, j])
            for i in range(n):
                for j in range(i + 1, n):
                    s = 0.5 * (Y[i, j] + Y[j, i])
                    Y[i, j] = s
                    Y[j, i] = s
            for i in range(n):
                for j in range(n):
                    arrive[k + 1, i, j] = Y[i, j]
                    if has_jumps:
                        Y[i, j] += J[k + 1, i, j]
                    depart[k + 1, i, j] = Y[i, j]
    return arrive_np, depart_np
