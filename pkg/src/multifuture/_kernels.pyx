# cython: language_level=3
"""Compiled inner loops for grid accumulation and trajectory error scans."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, floor, sqrt, INFINITY, isnan

cnp.import_array()


cdef inline Py_ssize_t _clip(double v, Py_ssize_t hi) noexcept nogil:
    if isnan(v) or v < 0:
        return 0
    if v > hi - 1:
        return hi - 1
    return <Py_ssize_t>v


def bin_indices(points, double x_min, double y_min, double delta_x, double delta_y,
                Py_ssize_t n, Py_ssize_t m):
    cdef double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 2)
    cdef Py_ssize_t k, count = pts.shape[0]
    ix_arr = np.empty(count, dtype=np.int64)
    iy_arr = np.empty(count, dtype=np.int64)
    cdef long long[::1] ix = ix_arr
    cdef long long[::1] iy = iy_arr
    with nogil:
        for k in range(count):
            ix[k] = _clip(floor((pts[k, 0] - x_min) / delta_x), n)
            iy[k] = _clip(floor((pts[k, 1] - y_min) / delta_y), m)
    return ix_arr, iy_arr


def accumulate_heat(src, dst, double x_min, double y_min, double delta_x, double delta_y,
                    Py_ssize_t n, Py_ssize_t m, Py_ssize_t side):
    cdef double[:, ::1] s = np.ascontiguousarray(src, dtype=np.float64).reshape(-1, 2)
    cdef double[:, ::1] d = np.ascontiguousarray(dst, dtype=np.float64).reshape(-1, 2)
    maps_arr = np.zeros((n, m, side * side), dtype=np.float64)
    cdef double[:, :, ::1] maps = maps_arr
    cdef Py_ssize_t k, r, c, bx, by, half = (side - 1) // 2
    cdef double cx, cy, ddx, ddy
    with nogil:
        for k in range(s.shape[0]):
            bx = _clip(floor((s[k, 0] - x_min) / delta_x), n)
            by = _clip(floor((s[k, 1] - y_min) / delta_y), m)
            for r in range(side):
                cy = y_min + (by + (half - r) + 0.5) * delta_y
                ddy = d[k, 1] - cy
                for c in range(side):
                    cx = x_min + (bx + (c - half) + 0.5) * delta_x
                    ddx = d[k, 0] - cx
                    maps[bx, by, r * side + c] += exp(-sqrt(ddx * ddx + ddy * ddy))
    return maps_arr


def displacement_errors(samples, gt):
    cdef double[:, :, :, ::1] s = np.ascontiguousarray(samples, dtype=np.float64)
    cdef double[:, :, ::1] g = np.ascontiguousarray(gt, dtype=np.float64)
    cdef Py_ssize_t K = s.shape[0], P = s.shape[1], T = s.shape[2]
    mean_arr = np.empty((K, P), dtype=np.float64)
    final_arr = np.empty((K, P), dtype=np.float64)
    cdef double[:, ::1] mean_d = mean_arr
    cdef double[:, ::1] final_d = final_arr
    cdef Py_ssize_t k, p, t
    cdef double acc, dx, dy, dist
    with nogil:
        for k in range(K):
            for p in range(P):
                acc = 0.0
                dist = 0.0
                for t in range(T):
                    dx = s[k, p, t, 0] - g[p, t, 0]
                    dy = s[k, p, t, 1] - g[p, t, 1]
                    dist = sqrt(dx * dx + dy * dy)
                    acc += dist
                mean_d[k, p] = acc / T
                final_d[k, p] = dist
    return mean_arr, final_arr


def pair_min_distance(a, b):
    cdef double[:, :, ::1] x = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, :, ::1] y = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t P = x.shape[0], Q = y.shape[0], T = x.shape[1]
    out_arr = np.empty((P, Q), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, t
    cdef double best, dx, dy, dist
    with nogil:
        for i in range(P):
            for j in range(Q):
                best = INFINITY
                for t in range(T):
                    dx = x[i, t, 0] - y[j, t, 0]
                    dy = x[i, t, 1] - y[j, t, 1]
                    dist = sqrt(dx * dx + dy * dy)
                    if dist < best:
                        best = dist
                out[i, j] = best
    return out_arr
