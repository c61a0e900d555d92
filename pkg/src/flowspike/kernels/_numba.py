"""numba-compiled kernels; same contracts as ``_numpy``."""
import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _count_loop(xs, ys, ps, out):
    for i in range(xs.shape[0]):
        c = 0 if ps[i] > 0 else 1
        out[c, ys[i], xs[i]] += 1.0


def count_accumulate(xs, ys, ps, out):
    _count_loop(np.ascontiguousarray(xs, dtype=np.int64), np.ascontiguousarray(ys, dtype=np.int64),
                np.ascontiguousarray(ps), out)
    return out


@njit(cache=True, nogil=True)
def _voxel_loop(xs, ys, taus, ps, out):
    bins = out.shape[0]
    for i in range(xs.shape[0]):
        lo = int(np.floor(taus[i]))
        frac = taus[i] - lo
        if 0 <= lo < bins:
            out[lo, ys[i], xs[i]] += ps[i] * (1.0 - frac)
        if 0 <= lo + 1 < bins:
            out[lo + 1, ys[i], xs[i]] += ps[i] * frac


def voxel_accumulate(xs, ys, taus, ps, out):
    _voxel_loop(np.ascontiguousarray(xs, dtype=np.int64), np.ascontiguousarray(ys, dtype=np.int64),
                np.ascontiguousarray(taus, dtype=np.float64), np.ascontiguousarray(ps, dtype=np.float64),
                out)
    return out


@njit(cache=True, nogil=True)
def _splat_loop(wx, wy, taus, pol, acc):
    height = acc.shape[1]
    width = acc.shape[2]
    for i in range(wx.shape[0]):
        x0 = np.floor(wx[i])
        y0 = np.floor(wy[i])
        fx = wx[i] - x0
        fy = wy[i] - y0
        ix = int(x0)
        iy = int(y0)
        ch = 0 if pol[i] > 0 else 2
        for dy in range(2):
            cy = iy + dy
            if cy < 0 or cy >= height:
                continue
            wyv = fy if dy == 1 else 1.0 - fy
            for dx in range(2):
                cx = ix + dx
                if cx < 0 or cx >= width:
                    continue
                wgt = (fx if dx == 1 else 1.0 - fx) * wyv
                if wgt == 0.0:
                    continue
                acc[ch, cy, cx] += wgt
                acc[ch + 1, cy, cx] += wgt * taus[i]


def splat_forward(wx, wy, taus, pol, height, width, dtype):
    acc = np.zeros((4, height, width), dtype=np.float64)
    _splat_loop(np.ascontiguousarray(wx, dtype=np.float64), np.ascontiguousarray(wy, dtype=np.float64),
                np.ascontiguousarray(taus, dtype=np.float64), np.ascontiguousarray(pol), acc)
    return acc.astype(dtype)


@njit(cache=True, nogil=True)
def _splat_grad_loop(wx, wy, taus, pol, gacc, gx, gy):
    height = gacc.shape[1]
    width = gacc.shape[2]
    for i in range(wx.shape[0]):
        x0 = np.floor(wx[i])
        y0 = np.floor(wy[i])
        fx = wx[i] - x0
        fy = wy[i] - y0
        ix = int(x0)
        iy = int(y0)
        ch = 0 if pol[i] > 0 else 2
        sx = 0.0
        sy = 0.0
        for dy in range(2):
            cy = iy + dy
            if cy < 0 or cy >= height:
                continue
            wyv = fy if dy == 1 else 1.0 - fy
            dwy_sign = 1.0 if dy == 1 else -1.0
            for dx in range(2):
                cx = ix + dx
                if cx < 0 or cx >= width:
                    continue
                wxv = fx if dx == 1 else 1.0 - fx
                dwx_sign = 1.0 if dx == 1 else -1.0
                g = gacc[ch, cy, cx] + gacc[ch + 1, cy, cx] * taus[i]
                sx += g * dwx_sign * wyv
                sy += g * dwy_sign * wxv
        gx[i] = sx
        gy[i] = sy


def splat_backward(wx, wy, taus, pol, gacc):
    n = wx.shape[0]
    gx = np.zeros(n, dtype=np.float64)
    gy = np.zeros(n, dtype=np.float64)
    _splat_grad_loop(np.ascontiguousarray(wx, dtype=np.float64), np.ascontiguousarray(wy, dtype=np.float64),
                     np.ascontiguousarray(taus, dtype=np.float64), np.ascontiguousarray(pol),
                     np.ascontiguousarray(gacc, dtype=np.float64), gx, gy)
    return gx, gy


@njit(cache=True, nogil=True)
def _col2im_loop(dcols, out):
    h, w, k, _, c_n = dcols.shape
    for y in range(h):
        for x in range(w):
            for i in range(k):
                for j in range(k):
                    for c in range(c_n):
                        out[y + i, x + j, c] += dcols[y, x, i, j, c]


def col2im(dcols, out):
    _col2im_loop(np.ascontiguousarray(dcols), out)
    return out
