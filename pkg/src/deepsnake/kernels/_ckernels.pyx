# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Signatures mirror :mod:`deepsnake.kernels._fallback`."""

import numpy as np

from libc.math cimport floor, sqrt
from libc.stdlib cimport malloc, free

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _wrap(Py_ssize_t i, Py_ssize_t n) nogil:
    i = i % n
    if i < 0:
        i += n
    return i


def circ_gather(real[:, :, ::1] x, Py_ssize_t k):
    cdef Py_ssize_t B = x.shape[0], N = x.shape[1], D = x.shape[2]
    cdef Py_ssize_t r = k // 2, b, i, j, c, src
    out = np.empty((B, N, k, D), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] o = out
    with nogil:
        for b in range(B):
            for i in range(N):
                for j in range(k):
                    src = _wrap(i + j - r, N)
                    for c in range(D):
                        o[b, i, j, c] = x[b, src, c]
    return out


def circ_scatter(real[:, :, :, ::1] cols):
    cdef Py_ssize_t B = cols.shape[0], N = cols.shape[1], k = cols.shape[2], D = cols.shape[3]
    cdef Py_ssize_t r = k // 2, b, i, j, c, dst
    out = np.zeros((B, N, D), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, ::1] o = out
    with nogil:
        for b in range(B):
            for j in range(k):
                for i in range(N):
                    dst = _wrap(i + j - r, N)
                    for c in range(D):
                        o[b, dst, c] += cols[b, i, j, c]
    return out


cdef inline void _corner(double v, Py_ssize_t size, Py_ssize_t* i0, Py_ssize_t* i1, double* w) nogil:
    cdef double hi = <double>(size - 1)
    if v < 0.0:
        v = 0.0
    if v > hi:
        v = hi
    cdef Py_ssize_t f = <Py_ssize_t>floor(v)
    if size > 1 and f > size - 2:
        f = size - 2
    if size == 1:
        f = 0
    i0[0] = f
    i1[0] = f + 1 if f + 1 < size else f
    w[0] = v - <double>f


def bilinear_gather(real[:, :, :, ::1] F, real[:, :, ::1] pts):
    cdef Py_ssize_t B = pts.shape[0], n = pts.shape[1]
    cdef Py_ssize_t H = F.shape[1], W = F.shape[2], C = F.shape[3]
    cdef Py_ssize_t b, p, c, fb, x0, x1, y0, y1
    cdef double wx, wy
    cdef real ax, ay, bx, by
    cdef Py_ssize_t shared = F.shape[0] == 1
    out = np.empty((B, n, C), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, ::1] o = out
    with nogil:
        for b in range(B):
            fb = 0 if shared else b
            for p in range(n):
                _corner(pts[b, p, 0], W, &x0, &x1, &wx)
                _corner(pts[b, p, 1], H, &y0, &y1, &wy)
                ax = <real>(1.0 - wx)
                bx = <real>wx
                ay = <real>(1.0 - wy)
                by = <real>wy
                for c in range(C):
                    o[b, p, c] = (ay * (ax * F[fb, y0, x0, c] + bx * F[fb, y0, x1, c])
                                  + by * (ax * F[fb, y1, x0, c] + bx * F[fb, y1, x1, c]))
    return out


def bilinear_scatter(real[:, :, ::1] g, real[:, :, ::1] pts, Py_ssize_t FB,
                     Py_ssize_t H, Py_ssize_t W):
    cdef Py_ssize_t B = pts.shape[0], n = pts.shape[1], C = g.shape[2]
    cdef Py_ssize_t b, p, c, fb, x0, x1, y0, y1
    cdef double wx, wy
    cdef real ax, ay, bx, by
    out = np.zeros((FB, H, W, C), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] o = out
    with nogil:
        for b in range(B):
            fb = 0 if FB == 1 else b
            for p in range(n):
                _corner(pts[b, p, 0], W, &x0, &x1, &wx)
                _corner(pts[b, p, 1], H, &y0, &y1, &wy)
                ax = <real>(1.0 - wx)
                bx = <real>wx
                ay = <real>(1.0 - wy)
                by = <real>wy
                for c in range(C):
                    o[fb, y0, x0, c] += ay * ax * g[b, p, c]
                    o[fb, y0, x1, c] += ay * bx * g[b, p, c]
                    o[fb, y1, x0, c] += by * ax * g[b, p, c]
                    o[fb, y1, x1, c] += by * bx * g[b, p, c]
    return out


def rasterize(double[:, ::1] poly, double x0, double y0, double step,
              Py_ssize_t nx, Py_ssize_t ny):
    cdef Py_ssize_t M = poly.shape[0], iy, ix, e, m, a, q, cnt
    cdef double py, px, ax, ay, bx, by, t
    out = np.zeros((ny, nx), dtype=np.uint8)
    cdef unsigned char[:, ::1] o = out
    cdef double* xs = <double*>malloc(max(M, 1) * sizeof(double))
    if xs == NULL:
        raise MemoryError()
    try:
        with nogil:
            for iy in range(ny):
                py = y0 + (<double>iy + 0.5) * step
                m = 0
                for e in range(M):
                    ax = poly[e, 0]
                    ay = poly[e, 1]
                    bx = poly[(e + 1) % M, 0]
                    by = poly[(e + 1) % M, 1]
                    if (ay > py) != (by > py):
                        xs[m] = ax + (py - ay) * (bx - ax) / (by - ay)
                        m += 1
                # insertion sort; crossing counts are small
                for a in range(1, m):
                    t = xs[a]
                    q = a - 1
                    while q >= 0 and xs[q] > t:
                        xs[q + 1] = xs[q]
                        q -= 1
                    xs[q + 1] = t
                cnt = 0
                for ix in range(nx):
                    px = x0 + (<double>ix + 0.5) * step
                    while cnt < m and xs[cnt] <= px:
                        cnt += 1
                    if cnt & 1:
                        o[iy, ix] = 1
    finally:
        free(xs)
    return out


def boundary_distance(double[:, ::1] poly, Py_ssize_t H, Py_ssize_t W):
    cdef Py_ssize_t M = poly.shape[0], iy, ix, e
    cdef double px, py, ax, ay, dx, dy, ll, t, ex, ey, d2, best
    out = np.empty((H, W), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for iy in range(H):
            py = <double>iy
            for ix in range(W):
                px = <double>ix
                best = 1e300
                for e in range(M):
                    ax = poly[e, 0]
                    ay = poly[e, 1]
                    dx = poly[(e + 1) % M, 0] - ax
                    dy = poly[(e + 1) % M, 1] - ay
                    ll = dx * dx + dy * dy
                    t = 0.0
                    if ll > 0.0:
                        t = ((px - ax) * dx + (py - ay) * dy) / ll
                        if t < 0.0:
                            t = 0.0
                        elif t > 1.0:
                            t = 1.0
                    ex = px - (ax + t * dx)
                    ey = py - (ay + t * dy)
                    d2 = ex * ex + ey * ey
                    if d2 < best:
                        best = d2
                o[iy, ix] = sqrt(best)
    return out
