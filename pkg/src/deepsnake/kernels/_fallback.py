"""Pure numpy versions of the compiled kernels.

Every function here has the same signature and floating-point evaluation
order as its counterpart in ``_ckernels.pyx`` so the two backends agree
bit-for-bit on gathers and to rounding on scatters.
"""

import numpy as np


def circ_gather(x, k):
    """Periodic im2col: ``out[b, i, j] = x[b, (i + j - k//2) mod N]``."""
    n = x.shape[1]
    r = k // 2
    idx = (np.arange(n)[:, None] + np.arange(k)[None, :] - r) % n
    return np.ascontiguousarray(x[:, idx, :])


def circ_scatter(cols):
    """Adjoint of :func:`circ_gather`."""
    k = cols.shape[2]
    r = k // 2
    out = np.zeros((cols.shape[0], cols.shape[1], cols.shape[3]), dtype=cols.dtype)
    for j in range(k):
        out += np.roll(cols[:, :, j, :], shift=j - r, axis=1)
    return out


def _corners(v, size):
    v = np.clip(v.astype(np.float64), 0.0, float(size - 1))
    f = np.floor(v)
    if size > 1:
        f = np.minimum(f, size - 2)
    else:
        f = np.zeros_like(f)
    i0 = f.astype(np.intp)
    i1 = np.minimum(i0 + 1, size - 1)
    return i0, i1, v - f


def _weights(pts, H, W, dtype):
    x0, x1, wx = _corners(pts[..., 0], W)
    y0, y1, wy = _corners(pts[..., 1], H)
    ax = (1.0 - wx).astype(dtype)[..., None]
    bx = wx.astype(dtype)[..., None]
    ay = (1.0 - wy).astype(dtype)[..., None]
    by = wy.astype(dtype)[..., None]
    return x0, x1, y0, y1, ax, bx, ay, by


def bilinear_gather(F, pts):
    """Sample ``F`` (FB, H, W, C) at ``pts`` (B, n, 2) with border clamping.

    ``FB`` is either ``B`` or 1 (one map shared by every row of ``pts``).
    """
    B, n = pts.shape[:2]
    H, W = F.shape[1:3]
    x0, x1, y0, y1, ax, bx, ay, by = _weights(pts, H, W, F.dtype)
    fb = np.zeros((B, n), dtype=np.intp) if F.shape[0] == 1 else np.broadcast_to(
        np.arange(B)[:, None], (B, n))
    return (ay * (ax * F[fb, y0, x0] + bx * F[fb, y0, x1])
            + by * (ax * F[fb, y1, x0] + bx * F[fb, y1, x1]))


def bilinear_scatter(g, pts, FB, H, W):
    """Adjoint of :func:`bilinear_gather` with respect to the feature map."""
    B, n, C = g.shape
    x0, x1, y0, y1, ax, bx, ay, by = _weights(pts, H, W, g.dtype)
    fb = np.zeros((B, n), dtype=np.intp) if FB == 1 else np.broadcast_to(
        np.arange(B)[:, None], (B, n))
    out = np.zeros((FB, H, W, C), dtype=g.dtype)
    for yy, xx, w in ((y0, x0, ay * ax), (y0, x1, ay * bx), (y1, x0, by * ax), (y1, x1, by * bx)):
        np.add.at(out, (fb, yy, xx), w * g)
    return out


def rasterize(poly, x0, y0, step, nx, ny):
    """Even-odd fill sampled at cell centres ``(x0 + (i + .5) step, y0 + (j + .5) step)``."""
    poly = np.asarray(poly, dtype=np.float64)
    a = poly
    b = np.roll(poly, -1, axis=0)
    py = y0 + (np.arange(ny, dtype=np.float64) + 0.5) * step
    px = x0 + (np.arange(nx, dtype=np.float64) + 0.5) * step
    ay, by = a[:, 1][None, :], b[:, 1][None, :]
    ax, bx = a[:, 0][None, :], b[:, 0][None, :]
    crosses = (ay > py[:, None]) != (by > py[:, None])
    with np.errstate(divide="ignore", invalid="ignore"):
        xc = ax + (py[:, None] - ay) * (bx - ax) / (by - ay)
    xc = np.where(crosses, xc, np.inf)
    xc.sort(axis=1)
    counts = np.empty((ny, nx), dtype=np.intp)
    for row in range(ny):
        counts[row] = np.searchsorted(xc[row], px, side="right")
    return (counts & 1).astype(np.uint8)


def boundary_distance(poly, H, W):
    """Distance from each integer grid point ``(x, y)`` to the closed polyline."""
    poly = np.asarray(poly, dtype=np.float64)
    a = poly
    d = np.roll(poly, -1, axis=0) - a
    ll = (d * d).sum(axis=1)
    safe = np.where(ll > 0.0, ll, 1.0)
    ys, xs = np.mgrid[0:H, 0:W]
    px = xs.reshape(-1, 1).astype(np.float64)
    py = ys.reshape(-1, 1).astype(np.float64)
    best = np.full(px.shape[0], np.inf)
    chunk = 4096
    for s in range(0, px.shape[0], chunk):
        qx, qy = px[s:s + chunk], py[s:s + chunk]
        t = ((qx - a[:, 0]) * d[:, 0] + (qy - a[:, 1]) * d[:, 1]) / safe
        t = np.where(ll > 0.0, np.clip(t, 0.0, 1.0), 0.0)
        ex = qx - (a[:, 0] + t * d[:, 0])
        ey = qy - (a[:, 1] + t * d[:, 1])
        best[s:s + chunk] = (ex * ex + ey * ey).min(axis=1)
    return np.sqrt(best).reshape(H, W)
