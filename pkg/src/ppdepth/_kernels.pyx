# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Each function has a numpy twin in _kernels_py with
identical semantics; ppdepth.kernels picks one at import."""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport sqrt, fabs, floor

cnp.import_array()

cdef double GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu_backward(floating[::1] g, floating[::1] x, floating[::1] th, floating[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v, t, dinner
    for i in range(n):
        v = x[i]
        t = th[i]
        dinner = GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
        out[i] = g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)


def layer_norm_forward(floating[:, ::1] x, double eps, floating[:, ::1] xhat, floating[::1] inv):
    cdef Py_ssize_t r, j, rows = x.shape[0], d = x.shape[1]
    cdef double mu, var, diff, s
    for r in range(rows):
        mu = 0.0
        for j in range(d):
            mu += x[r, j]
        mu /= d
        var = 0.0
        for j in range(d):
            diff = x[r, j] - mu
            var += diff * diff
        var /= d
        s = 1.0 / sqrt(var + eps)
        inv[r] = s
        for j in range(d):
            xhat[r, j] = (x[r, j] - mu) * s


def layer_norm_backward(floating[:, ::1] gxhat, floating[:, ::1] xhat, floating[::1] inv,
                        floating[:, ::1] gx):
    cdef Py_ssize_t r, j, rows = xhat.shape[0], d = xhat.shape[1]
    cdef double m1, m2
    for r in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            m1 += gxhat[r, j]
            m2 += gxhat[r, j] * xhat[r, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            gx[r, j] = inv[r] * (gxhat[r, j] - m1 - xhat[r, j] * m2)


def nms(double[:, ::1] mag, double[:, ::1] gx, double[:, ::1] gy):
    """Keep pixels that are maxima along the quantised gradient direction.

    A pixel survives if it is strictly greater than the neighbour on the
    positive side and >= the neighbour on the negative side (plateau ramps
    are suppressed). Border pixels are zero.
    """
    cdef Py_ssize_t h = mag.shape[0], w = mag.shape[1], y, x
    cdef double m, ax, ay, n1, n2
    cdef int dy, dx
    out_arr = np.zeros((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for y in range(1, h - 1):
        for x in range(1, w - 1):
            m = mag[y, x]
            if m <= 0.0:
                continue
            ax = gx[y, x]
            ay = gy[y, x]
            # direction bins at 22.5 degree boundaries: tan(22.5) = 0.41421356
            if fabs(ay) <= 0.41421356237309503 * fabs(ax):
                dy = 0; dx = 1
            elif fabs(ax) <= 0.41421356237309503 * fabs(ay):
                dy = 1; dx = 0
            elif (ax > 0) == (ay > 0):
                dy = 1; dx = 1
            else:
                dy = 1; dx = -1
            n1 = mag[y + dy, x + dx]
            n2 = mag[y - dy, x - dx]
            if m > n1 and m >= n2:
                out[y, x] = m
    return out_arr


def hysteresis(double[:, ::1] strength, double low, double high):
    """8-connected hysteresis: pixels >= low connected to a pixel >= high."""
    cdef Py_ssize_t h = strength.shape[0], w = strength.shape[1]
    cdef Py_ssize_t n = h * w, top = 0, idx, y, x, yy, xx, k
    out_arr = np.zeros((h, w), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] out = out_arr
    stack_arr = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] stack = stack_arr
    for y in range(h):
        for x in range(w):
            if strength[y, x] >= high and strength[y, x] > 0:
                out[y, x] = 1
                stack[top] = y * w + x
                top += 1
    while top > 0:
        top -= 1
        idx = stack[top]
        y = idx // w
        x = idx - y * w
        for yy in range(y - 1, y + 2):
            if yy < 0 or yy >= h:
                continue
            for xx in range(x - 1, x + 2):
                if xx < 0 or xx >= w or out[yy, xx]:
                    continue
                if strength[yy, xx] >= low and strength[yy, xx] > 0:
                    out[yy, xx] = 1
                    stack[top] = yy * w + xx
                    top += 1
    return out_arr.astype(bool)


def nearest_sqdist(double[:, ::1] query, double[:, ::1] ref):
    """Squared distance from every query point to its nearest reference point.

    Uniform-grid search: reference points are bucketed into cubic cells and
    each query scans shells of cells outward until no unscanned cell can hold
    a closer point.
    """
    cdef Py_ssize_t nq = query.shape[0], nr = ref.shape[0]
    cdef Py_ssize_t i, j, k, c
    if nr == 0:
        raise ValueError("empty reference cloud")
    lo = np.min(np.asarray(ref), axis=0)
    hi = np.max(np.asarray(ref), axis=0)
    extent = float(np.max(hi - lo))
    cell_py = extent / max(1.0, float(np.cbrt(nr))) if extent > 0 else 1.0
    cdef double cell = cell_py
    cdef double lx = lo[0], ly = lo[1], lz = lo[2]
    cdef long gx = <long>floor((hi[0] - lx) / cell) + 1
    cdef long gy = <long>floor((hi[1] - ly) / cell) + 1
    cdef long gz = <long>floor((hi[2] - lz) / cell) + 1
    cdef long ncell = gx * gy * gz
    # counting sort of reference points into cells
    cell_of_arr = np.empty(nr, dtype=np.intp)
    cdef Py_ssize_t[::1] cell_of = cell_of_arr
    cdef long cx, cy, cz
    for j in range(nr):
        cx = min(<long>floor((ref[j, 0] - lx) / cell), gx - 1)
        cy = min(<long>floor((ref[j, 1] - ly) / cell), gy - 1)
        cz = min(<long>floor((ref[j, 2] - lz) / cell), gz - 1)
        cell_of[j] = (cx * gy + cy) * gz + cz
    start_arr = np.zeros(ncell + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] start = start_arr
    for j in range(nr):
        start[cell_of[j] + 1] += 1
    for c in range(ncell):
        start[c + 1] += start[c]
    fill_arr = start_arr[:ncell].copy()
    cdef Py_ssize_t[::1] fill = fill_arr
    order_arr = np.empty(nr, dtype=np.intp)
    cdef Py_ssize_t[::1] order = order_arr
    for j in range(nr):
        order[fill[cell_of[j]]] = j
        fill[cell_of[j]] += 1

    out_arr = np.empty(nq, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double qx, qy, qz, best, dx, dy, dz, d2, bound
    cdef long qcx, qcy, qcz, r, rmax, ix, iy, iz, ax, ay, az
    cdef Py_ssize_t p
    for i in range(nq):
        qx = query[i, 0]; qy = query[i, 1]; qz = query[i, 2]
        qcx = <long>floor((qx - lx) / cell)
        qcy = <long>floor((qy - ly) / cell)
        qcz = <long>floor((qz - lz) / cell)
        rmax = max(max(abs(qcx), abs(qcx - (gx - 1))),
                   max(max(abs(qcy), abs(qcy - (gy - 1))), max(abs(qcz), abs(qcz - (gz - 1)))))
        best = 1e300
        r = 0
        while r <= rmax:
            for ix in range(qcx - r, qcx + r + 1):
                if ix < 0 or ix >= gx:
                    continue
                ax = abs(ix - qcx)
                for iy in range(qcy - r, qcy + r + 1):
                    if iy < 0 or iy >= gy:
                        continue
                    ay = abs(iy - qcy)
                    for iz in range(qcz - r, qcz + r + 1):
                        if iz < 0 or iz >= gz:
                            continue
                        az = abs(iz - qcz)
                        # only the shell at Chebyshev radius r
                        if ax != r and ay != r and az != r:
                            continue
                        c = (ix * gy + iy) * gz + iz
                        for p in range(start[c], start[c + 1]):
                            k = order[p]
                            dx = ref[k, 0] - qx
                            dy = ref[k, 1] - qy
                            dz = ref[k, 2] - qz
                            d2 = dx * dx + dy * dy + dz * dz
                            if d2 < best:
                                best = d2
            # every point in shell r+1 or beyond is at least r*cell away
            bound = r * cell
            if best <= bound * bound:
                break
            r += 1
        out[i] = best
    return out_arr
