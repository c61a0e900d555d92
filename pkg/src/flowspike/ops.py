"""Differentiable operations on ``Tensor``.

Spatial ops take a single sample laid out channels x height x width. Weight
tensors for ``conv2d`` are out x in x k x k.
"""
import functools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from flowspike import kernels
from flowspike.errors import ShapeError
from flowspike.tensor import Tensor, as_tensor, make_result

SURROGATE_SLOPE = 10.0
LEAK = 0.1


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b),
                       lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c):
    c = float(c)
    return make_result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def tanh(x):
    y = np.tanh(x.data)
    return make_result(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(v):
    # split form avoids overflow warnings in exp for large |v|
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x):
    y = _sigmoid(x.data)
    return make_result(y, (x,), lambda g: (g * y * (1.0 - y),))


def leaky_relu(x, slope=LEAK):
    xd = x.data
    k = xd.dtype.type(slope)
    slopes = np.where(xd >= 0, xd.dtype.type(1.0), k)
    return make_result(xd * slopes, (x,), lambda g: (g * slopes,))


def arctanspike(x, a=SURROGATE_SLOPE):
    """Surrogate derivative 1 / (1 + a x^2) used in place of the step's Dirac delta."""
    return 1.0 / (1.0 + a * np.square(x))


def spike_step(x, a=SURROGATE_SLOPE):
    """Heaviside step (fires at x >= 0) with the arctanspike surrogate gradient."""
    if a <= 0:
        raise ValueError("surrogate slope must be positive")
    xd = x.data
    y = (xd >= 0).astype(xd.dtype)
    return make_result(y, (x,), lambda g: (g * arctanspike(xd, a).astype(xd.dtype),))


def sum(x):  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return make_result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                       lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x):
    shape, n = x.shape, max(x.data.size, 1)
    return make_result(np.asarray(x.data.mean() if x.data.size else 0.0, dtype=x.dtype), (x,),
                       lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def reshape(x, shape):
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# -- spatial -----------------------------------------------------------------

def _check_chw(x, op):
    if x.ndim != 3:
        raise ShapeError(f"{op} expects a C x H x W tensor, got shape {x.shape}", dim="rank")


# patch tiles stay around 1 MB of float32 so the copy and the GEMM share cache
_TILE_FLOATS = 1 << 18


def _row_block(h, w, kkc):
    return max(1, min(h, _TILE_FLOATS // max(w * kkc, 1)))


def conv2d(x, weight, bias=None, padding=None):
    """Stride-1, zero-padded cross-correlation preserving spatial size."""
    _check_chw(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be O x C x K x K, got {weight.shape}", dim="weight")
    out_c, in_c, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square and odd, got {kh}x{kw}", dim="kernel")
    if x.shape[0] != in_c:
        raise ShapeError(f"conv2d input has {x.shape[0]} channels but weight expects {in_c}",
                         dim="channels")
    k = kh
    pad = (k - 1) // 2 if padding is None else padding
    if pad != (k - 1) // 2:
        raise ShapeError(f"padding must be (K-1)/2 = {(k - 1) // 2} for K={k}, got {pad}",
                         dim="padding")
    if bias is not None and bias.shape != (out_c,):
        raise ShapeError(f"conv2d bias must have shape ({out_c},), got {bias.shape}", dim="bias")
    _, h, w = x.shape
    xd = x.data
    dtype = xd.dtype
    kkc = k * k * in_c
    # channels-last patches: every copied run is in_c contiguous values
    xp = xd.transpose(1, 2, 0)
    if pad:
        xp = np.pad(xp, ((pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(0, 1)).transpose(0, 1, 3, 4, 2)
    wmat = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(out_c, kkc)
    rows = _row_block(h, w, kkc)

    cols = None
    if rows >= h:
        cols = np.ascontiguousarray(win).reshape(h * w, kkc)
        # BLAS prefers the long dimension leading when out_c is small
        if h * w >= out_c:
            out = np.ascontiguousarray((cols @ wmat.T).T)
        else:
            out = wmat @ cols.T
    else:
        out_t = np.empty((h * w, out_c), dtype=dtype)
        buf = np.empty((rows, w, k, k, in_c), dtype=dtype)
        for r0 in range(0, h, rows):
            r1 = min(h, r0 + rows)
            tile = buf[:r1 - r0]
            np.copyto(tile, win[r0:r1])
            np.matmul(tile.reshape(-1, kkc), wmat.T, out=out_t[r0 * w:r1 * w])
        out = np.ascontiguousarray(out_t.T)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(out_c, h, w)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(out_c, h * w)
        want_w, want_x = weight.requires_grad, x.requires_grad
        gwm = np.zeros((out_c, kkc), dtype=dtype) if want_w else None
        gpad = np.zeros((h + 2 * pad, w + 2 * pad, in_c), dtype=dtype) if want_x else None
        buf = None if cols is not None else np.empty((rows, w, k, k, in_c), dtype=dtype)
        for r0 in range(0, h, rows):
            r1 = min(h, r0 + rows)
            gt = g2[:, r0 * w:r1 * w]
            if want_w:
                if cols is not None:
                    tile = cols
                else:
                    tile = buf[:r1 - r0]
                    np.copyto(tile, win[r0:r1])
                    tile = tile.reshape(-1, kkc)
                gwm += gt @ tile
            if want_x:
                dcols = (gt.T @ wmat).reshape(r1 - r0, w, k, k, in_c)
                kernels.col2im(dcols, gpad[r0:r1 + 2 * pad])
        gw = gwm.reshape(out_c, k, k, in_c).transpose(0, 3, 1, 2) if want_w else None
        gx = gpad[pad:pad + h, pad:pad + w].transpose(2, 0, 1) if want_x else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    return make_result(out, parents, backward)


def avg_pool2(x):
    _check_chw(x, "avg_pool2")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial extents, got {h}x{w}", dim="spatial")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def backward(g):
        q = g * g.dtype.type(0.25)
        return (np.repeat(np.repeat(q, 2, axis=1), 2, axis=2),)

    return make_result(out, (x,), backward)


@functools.lru_cache(maxsize=64)
def _bilinear_matrix(n, dtype_name):
    """(2n x n) operator for x2 linear upsampling with half-pixel centers, edges clamped."""
    m = np.zeros((2 * n, n), dtype=np.float64)
    for i in range(2 * n):
        src = max((i + 0.5) / 2.0 - 0.5, 0.0)
        lo = min(int(np.floor(src)), n - 1)
        hi = min(lo + 1, n - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    m = m.astype(dtype_name)
    m.setflags(write=False)
    return m


def upsample_bilinear2(x):
    _check_chw(x, "upsample_bilinear2")
    c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError("upsample_bilinear2 needs non-empty spatial extents", dim="spatial")
    mh = _bilinear_matrix(h, x.dtype.name)
    mw = _bilinear_matrix(w, x.dtype.name)
    out = mh @ x.data @ mw.T
    return make_result(out, (x,), lambda g: (mh.T @ g @ mw,))


def upsample_nearest(x, size):
    _check_chw(x, "upsample_nearest")
    c, h, w = x.shape
    th, tw = size
    if th < h or tw < w or th % h or tw % w:
        raise ShapeError(f"upsample_nearest needs integer scale factors, {h}x{w} -> {th}x{tw}",
                         dim="spatial")
    fh, fw = th // h, tw // w
    if fh == 1 and fw == 1:
        return x
    out = np.repeat(np.repeat(x.data, fh, axis=1), fw, axis=2)
    return make_result(out, (x,), lambda g: (g.reshape(c, h, fh, w, fw).sum(axis=(2, 4)),))


def concat_channels(a, b):
    _check_chw(a, "concat_channels")
    _check_chw(b, "concat_channels")
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_channels spatial mismatch: {a.shape[1:]} vs {b.shape[1:]}",
                         dim="spatial")
    ca = a.shape[0]
    return make_result(np.concatenate([a.data, b.data], axis=0), (a, b),
                       lambda g: (g[:ca], g[ca:]))
