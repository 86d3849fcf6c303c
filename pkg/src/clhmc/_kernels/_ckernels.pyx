# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels; see ``_pykernels`` for semantics."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p

cnp.import_array()


def laplacian5(const double[:, :, ::1] field, double dx, double dy):
    cdef Py_ssize_t nb = field.shape[0], ny = field.shape[1], nx = field.shape[2]
    out_arr = np.zeros((nb, ny, nx))
    cdef double[:, :, ::1] out = out_arr
    cdef double rx = 1.0 / (dx * dx), ry = 1.0 / (dy * dy), c
    cdef Py_ssize_t b, j, i
    with nogil:
        for b in range(nb):
            for j in range(1, ny - 1):
                for i in range(1, nx - 1):
                    c = field[b, j, i]
                    out[b, j, i] = ((field[b, j, i + 1] - 2.0 * c + field[b, j, i - 1]) * rx
                                    + (field[b, j + 1, i] - 2.0 * c + field[b, j - 1, i]) * ry)
    return out_arr


def arakawa(const double[:, :, ::1] psi, const double[:, :, ::1] q, double dx, double dy):
    cdef Py_ssize_t nb = psi.shape[0], ny = psi.shape[1], nx = psi.shape[2]
    out_arr = np.zeros((nb, ny, nx))
    cdef double[:, :, ::1] out = out_arr
    cdef double scale = 1.0 / (12.0 * dx * dy)
    cdef double pE, pW, pN, pS, pNE, pNW, pSE, pSW
    cdef double qE, qW, qN, qS, qNE, qNW, qSE, qSW
    cdef double jpp, jpx, jxp
    cdef Py_ssize_t b, j, i
    with nogil:
        for b in range(nb):
            for j in range(1, ny - 1):
                for i in range(1, nx - 1):
                    pE = psi[b, j, i + 1]; pW = psi[b, j, i - 1]
                    pN = psi[b, j + 1, i]; pS = psi[b, j - 1, i]
                    pNE = psi[b, j + 1, i + 1]; pNW = psi[b, j + 1, i - 1]
                    pSE = psi[b, j - 1, i + 1]; pSW = psi[b, j - 1, i - 1]
                    qE = q[b, j, i + 1]; qW = q[b, j, i - 1]
                    qN = q[b, j + 1, i]; qS = q[b, j - 1, i]
                    qNE = q[b, j + 1, i + 1]; qNW = q[b, j + 1, i - 1]
                    qSE = q[b, j - 1, i + 1]; qSW = q[b, j - 1, i - 1]
                    jpp = (pE - pW) * (qN - qS) - (pN - pS) * (qE - qW)
                    jpx = (pE * (qNE - qSE) - pW * (qNW - qSW)
                           - pN * (qNE - qNW) + pS * (qSE - qSW))
                    jxp = (qN * (pNE - pNW) - qS * (pSE - pSW)
                           - qE * (pNE - pSE) + qW * (pNW - pSW))
                    out[b, j, i] = (jpp + jpx + jxp) * scale
    return out_arr


def mixture_prior(const double[::1] x, const double[:, ::1] means, const double[:, ::1] inv_vars,
                  const double[::1] log_coefs):
    cdef Py_ssize_t k = means.shape[0], d = means.shape[1]
    cdef Py_ssize_t i, c, lead = 0
    quad_arr = np.empty(k)
    cdef double[::1] quad = quad_arr
    cdef double diff, acc, best, s, denom, value, w
    grad_arr = np.empty(d)
    cdef double[::1] grad = grad_arr
    ratio_arr = np.zeros(k)
    cdef double[::1] ratios = ratio_arr
    with nogil:
        for c in range(k):
            acc = 0.0
            for i in range(d):
                diff = x[i] - means[c, i]
                acc = acc + diff * diff * inv_vars[c, i]
            quad[c] = 0.5 * acc
        best = log_coefs[0] - quad[0]
        for c in range(1, k):
            if log_coefs[c] - quad[c] > best:
                best = log_coefs[c] - quad[c]
                lead = c
        s = 0.0
        for c in range(k):
            if c != lead:
                ratios[c] = exp(log_coefs[c] - quad[c] - best)
                s = s + ratios[c]
        denom = 1.0 + s
        value = quad[lead] - log_coefs[lead] - log1p(s)
        # sum_c ratio_c (g_lead - g_c) / denom, per coordinate
        for i in range(d):
            grad[i] = (x[i] - means[lead, i]) * inv_vars[lead, i]
            acc = 0.0
            for c in range(k):
                if c != lead and ratios[c] != 0.0:
                    w = grad[i] - (x[i] - means[c, i]) * inv_vars[c, i]
                    acc = acc + ratios[c] * w
            grad[i] = grad[i] - acc / denom
    return value, grad_arr
