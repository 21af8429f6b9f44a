"""Pure numpy/scipy versions of the compiled kernels (same signatures, same results)."""
from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

_GELU_C = 0.7978845608028654
_TAN_22_5 = 0.41421356237309503


def gelu_backward(g, x, th, out):
    dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * (x * x))
    np.multiply(g, 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner, out=out)


def layer_norm_forward(x, eps, xhat, inv):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1)
    inv[:] = 1.0 / np.sqrt(var + eps)
    np.multiply(xc, inv[:, None], out=xhat)


def layer_norm_backward(gxhat, xhat, inv, gx):
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    np.multiply(inv[:, None], gxhat - m1 - xhat * m2, out=gx)


def nms(mag, gx, gy):
    h, w = mag.shape
    out = np.zeros((h, w), dtype=np.float64)
    if h < 3 or w < 3:
        return out
    ax, ay = np.abs(gx), np.abs(gy)
    horiz = ay <= _TAN_22_5 * ax
    vert = ~horiz & (ax <= _TAN_22_5 * ay)
    diag = ~horiz & ~vert & ((gx > 0) == (gy > 0))
    anti = ~horiz & ~vert & ~diag
    inner = (slice(1, h - 1), slice(1, w - 1))
    m = mag[inner]
    keep = np.zeros_like(m, dtype=bool)
    for sel, (dy, dx) in ((horiz, (0, 1)), (vert, (1, 0)), (diag, (1, 1)), (anti, (1, -1))):
        n1 = mag[1 + dy:h - 1 + dy, 1 + dx:w - 1 + dx]
        n2 = mag[1 - dy:h - 1 - dy, 1 - dx:w - 1 - dx]
        keep |= sel[inner] & (m > n1) & (m >= n2)
    keep &= m > 0
    out[inner] = np.where(keep, m, 0.0)
    return out


def hysteresis(strength, low, high):
    weak = (strength >= low) & (strength > 0)
    strong = (strength >= high) & (strength > 0)
    labels, n = ndimage.label(weak | strong, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros(strength.shape, dtype=bool)
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return keep[labels]


def nearest_sqdist(query, ref):
    if len(ref) == 0:
        raise ValueError("empty reference cloud")
    _, idx = cKDTree(ref).query(query, k=1)
    diff = ref[idx] - query
    return diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
