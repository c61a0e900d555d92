"""Pure-numpy reference kernels.

Every function here has a twin in ``_numba`` with the identical signature and
semantics; ``flowspike.kernels`` picks one set at import time.
"""
import numpy as np


def count_accumulate(xs, ys, ps, out):
    _, h, w = out.shape
    flat = ys.astype(np.int64) * w + xs.astype(np.int64)
    on = ps > 0
    out[0] += np.bincount(flat[on], minlength=h * w).reshape(h, w).astype(out.dtype)
    out[1] += np.bincount(flat[~on], minlength=h * w).reshape(h, w).astype(out.dtype)
    return out


def voxel_accumulate(xs, ys, taus, ps, out):
    bins, h, w = out.shape
    lo = np.floor(taus).astype(np.int64)
    frac = taus - lo
    pix = ys.astype(np.int64) * w + xs.astype(np.int64)
    flat = out.reshape(-1)
    size = bins * h * w
    for b, wt in ((lo, 1.0 - frac), (lo + 1, frac)):
        ok = (b >= 0) & (b < bins)
        idx = b[ok] * (h * w) + pix[ok]
        flat += np.bincount(idx, weights=ps[ok] * wt[ok], minlength=size).astype(out.dtype)
    return out


def _corners(wx, wy):
    x0 = np.floor(wx)
    y0 = np.floor(wy)
    fx = wx - x0
    fy = wy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    return (
        (x0, y0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
        (x0 + 1, y0, fx * (1.0 - fy), (1.0 - fy), -fx),
        (x0, y0 + 1, (1.0 - fx) * fy, -fy, (1.0 - fx)),
        (x0 + 1, y0 + 1, fx * fy, fy, fx),
    )


def splat_forward(wx, wy, taus, pol, height, width, dtype):
    """Bilinear splat of weight and weight*tau per polarity.

    Returns ``acc`` of shape (4, H, W): [w_on, w_on*tau, w_off, w_off*tau].
    Corners falling outside the frame are dropped.
    """
    acc = np.zeros((4, height * width), dtype=np.float64)
    ch = np.where(pol > 0, 0, 2)
    for cx, cy, wgt, _, _ in _corners(wx, wy):
        ok = (cx >= 0) & (cx < width) & (cy >= 0) & (cy < height) & (wgt != 0)
        pix = cy[ok] * width + cx[ok]
        idx = ch[ok] * (height * width) + pix
        acc.reshape(-1)[:] += np.bincount(idx, weights=wgt[ok], minlength=4 * height * width)
        acc.reshape(-1)[:] += np.bincount(idx + height * width, weights=wgt[ok] * taus[ok],
                                          minlength=4 * height * width)
    return acc.reshape(4, height, width).astype(dtype)


def splat_backward(wx, wy, taus, pol, gacc):
    """Gradient of sum(gacc * splat_forward(...)) w.r.t. the warped coordinates."""
    _, height, width = gacc.shape
    gflat = gacc.reshape(4, -1)
    ch = np.where(pol > 0, 0, 2)
    gx = np.zeros(wx.shape, dtype=np.float64)
    gy = np.zeros(wx.shape, dtype=np.float64)
    for cx, cy, wgt, dwx, dwy in _corners(wx, wy):
        ok = (cx >= 0) & (cx < width) & (cy >= 0) & (cy < height)
        pix = np.where(ok, cy * width + cx, 0)
        g = gflat[ch, pix] + gflat[ch + 1, pix] * taus
        g = np.where(ok, g, 0.0)
        gx += g * dwx
        gy += g * dwy
    return gx, gy


def col2im(dcols, out):
    """Scatter-add channels-last patches (H, W, K, K, C) into a padded image (H+K-1, W+K-1, C)."""
    h, w, k, _, _ = dcols.shape
    for i in range(k):
        for j in range(k):
            out[i:i + h, j:j + w] += dcols[:, :, i, j]
    return out
