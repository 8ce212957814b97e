# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled element kernels; same contracts as ``_kernels_py``."""

import numpy as np

cimport cython
from libc.stdint cimport int64_t
from libc.math cimport fabs, log, log1p, pow


def element_gradients(const double[:, ::1] xy, const int64_t[:, ::1] tris):
    cdef Py_ssize_t nt = tris.shape[0], e
    g_arr = np.empty((nt, 3, 2))
    a_arr = np.empty(nt)
    cdef double[:, :, ::1] g = g_arr
    cdef double[::1] area = a_arr
    cdef double x0, y0, d1x, d1y, d2x, d2y, det
    with nogil:
        for e in range(nt):
            x0 = xy[tris[e, 0], 0]
            y0 = xy[tris[e, 0], 1]
            d1x = xy[tris[e, 1], 0] - x0
            d1y = xy[tris[e, 1], 1] - y0
            d2x = xy[tris[e, 2], 0] - x0
            d2y = xy[tris[e, 2], 1] - y0
            det = d1x * d2y - d1y * d2x
            g[e, 1, 0] = d2y / det
            g[e, 1, 1] = -d2x / det
            g[e, 2, 0] = -d1y / det
            g[e, 2, 1] = d1x / det
            g[e, 0, 0] = -g[e, 1, 0] - g[e, 2, 0]
            g[e, 0, 1] = -g[e, 1, 1] - g[e, 2, 1]
            area[e] = 0.5 * det
    return g_arr, a_arr


def p_dirichlet(const double[:, :, ::1] gphi, const int64_t[:, ::1] tris, const double[::1] coef, const double[::1] u,
                double p, double eta, bint hess):
    cdef Py_ssize_t nt = tris.shape[0], e, i, j
    e_arr = np.empty(nt)
    g_arr = np.empty((nt, 3))
    h_arr = np.empty((nt, 3, 3)) if hess else None
    cdef double[::1] en = e_arr
    cdef double[:, ::1] ge = g_arr
    cdef double[:, :, ::1] he
    if hess:
        he = h_arr
    cdef double gx, gy, r, s, t, gi[3]
    with nogil:
        for e in range(nt):
            gx = 0.0
            gy = 0.0
            for i in range(1, 3):
                gx = gx + gphi[e, i, 0] * (u[tris[e, i]] - u[tris[e, 0]])
                gy = gy + gphi[e, i, 1] * (u[tris[e, i]] - u[tris[e, 0]])
            r = gx * gx + gy * gy + eta * eta
            en[e] = coef[e] * pow(r, 0.5 * p) / p
            s = coef[e] * pow(r, 0.5 * p - 1.0)
            for i in range(3):
                gi[i] = gphi[e, i, 0] * gx + gphi[e, i, 1] * gy
                ge[e, i] = s * gi[i]
            if hess:
                t = 0.0
                if p != 2.0 and r > 0.0:
                    t = coef[e] * (p - 2.0) * pow(r, 0.5 * p - 2.0)
                for i in range(3):
                    for j in range(3):
                        he[e, i, j] = s * (gphi[e, i, 0] * gphi[e, j, 0] + gphi[e, i, 1] * gphi[e, j, 1]) + t * gi[i] * gi[j]
    return e_arr, g_arr, h_arr


def p_mass(const int64_t[:, ::1] tris, const double[::1] area, const double[:, ::1] bary, const double[::1] qw, const double[::1] u,
           double p, double eta, bint hess):
    cdef Py_ssize_t nt = tris.shape[0], m = bary.shape[0], e, k, i, j
    e_arr = np.empty(nt)
    g_arr = np.empty((nt, 3))
    h_arr = np.empty((nt, 3, 3)) if hess else None
    cdef double[::1] en = e_arr
    cdef double[:, ::1] ge = g_arr
    cdef double[:, :, ::1] he
    if hess:
        he = h_arr
    cdef double uq, au, acc, d, hq, u0, u1, u2
    with nogil:
        for e in range(nt):
            u0 = u[tris[e, 0]]
            u1 = u[tris[e, 1]]
            u2 = u[tris[e, 2]]
            acc = 0.0
            for i in range(3):
                ge[e, i] = 0.0
                if hess:
                    for j in range(3):
                        he[e, i, j] = 0.0
            for k in range(m):
                uq = bary[k, 0] * u0 + bary[k, 1] * u1 + bary[k, 2] * u2
                au = fabs(uq)
                if p == 2.0:
                    acc = acc + qw[k] * au * au
                    d = uq
                    hq = 1.0
                else:
                    # |u|^p = |u|^(p-2) u^2: one pow for value and gradient
                    d = pow(au, p - 2.0)
                    acc = acc + qw[k] * d * au * au
                    d = d * uq
                    hq = 0.0
                    if hess:
                        hq = (p - 1.0) * pow(uq * uq + eta * eta, 0.5 * p - 1.0)
                for i in range(3):
                    ge[e, i] = ge[e, i] + qw[k] * d * bary[k, i]
                    if hess:
                        for j in range(3):
                            he[e, i, j] = he[e, i, j] + qw[k] * hq * bary[k, i] * bary[k, j]
            en[e] = area[e] * acc / p
            for i in range(3):
                ge[e, i] = area[e] * ge[e, i]
                if hess:
                    for j in range(3):
                        he[e, i, j] = area[e] * he[e, i, j]
    return e_arr, g_arr, h_arr


def pair_p(const int64_t[:, ::1] pairs, const double[::1] weight, const double[::1] u, double p, double eta, bint hess):
    cdef Py_ssize_t m = pairs.shape[0], k
    e_arr = np.empty(m)
    g_arr = np.empty((m, 2))
    h_arr = np.empty(m) if hess else None
    cdef double[::1] en = e_arr
    cdef double[:, ::1] g = g_arr
    cdef double[::1] h
    if hess:
        h = h_arr
    cdef double d, r, s
    with nogil:
        for k in range(m):
            d = u[pairs[k, 1]] - u[pairs[k, 0]]
            r = d * d + eta * eta
            en[k] = weight[k] * pow(r, 0.5 * p) / p
            s = weight[k] * pow(r, 0.5 * p - 1.0)
            g[k, 1] = s * d
            g[k, 0] = -s * d
            if hess:
                h[k] = s
                if p != 2.0 and r > 0.0:
                    h[k] = h[k] + weight[k] * (p - 2.0) * pow(r, 0.5 * p - 2.0) * d * d
    return e_arr, g_arr, h_arr


cdef inline double _dd1(double a, double b) nogil:
    if b - a <= 1e-12 * b:
        return log(b) + 1.0
    if a > 0.0:
        return log(b) + a / (b - a) * log1p((b - a) / a)
    return log(b)


def inv_x_integral(s_in, const double[::1] area):
    s_sorted = np.sort(np.asarray(s_in, dtype=float), axis=1)
    cdef double[:, ::1] s = np.ascontiguousarray(s_sorted)
    cdef Py_ssize_t nt = s.shape[0], e
    out_arr = np.empty(nt)
    cdef double[::1] out = out_arr
    cdef double a, b, c, scale, v
    cdef bint ab, bc
    with nogil:
        for e in range(nt):
            a = s[e, 0]
            b = s[e, 1]
            c = s[e, 2]
            scale = c if c > 1e-300 else 1e-300
            ab = b - a <= 1e-12 * scale
            bc = c - b <= 1e-12 * scale
            if ab and bc:
                v = 0.5 / c
            elif ab:
                v = (_dd1(a, c) - (log(a) + 1.0)) / (c - a)
            elif bc:
                v = ((log(c) + 1.0) - _dd1(a, c)) / (c - a)
            else:
                v = (_dd1(b, c) - _dd1(a, b)) / (c - a)
            out[e] = 2.0 * area[e] * v
    return out_arr
