"""Self-supervised contrast-maximization loss with a Charbonnier smoothness prior.

Events in a window are warped by the predicted flow (sampled at each event's
pixel) to the window end (forward reference) and to the window start
(backward reference). Each warped event splats its bilinear weight, and its
weight times a normalized timestamp, into per-polarity images. The
per-pixel ratio is the average-timestamp image; its squared sum over
occupied pixels, divided by the occupied-pixel count, is the contrast term.
Sharper motion compensation concentrates late timestamps in fewer pixels and
lowers the term.
"""
from dataclasses import dataclass

import numpy as np

from flowspike import kernels, ops
from flowspike.errors import ShapeError
from flowspike.tensor import Tensor, make_result

DEFAULT_LAMBDA = 0.001
CHARBONNIER_ALPHA = 0.5
CHARBONNIER_EPS = 1e-3

_REFS = {"end": "end", "fw": "end", "forward": "end", "start": "start", "bw": "start", "backward": "start"}


@dataclass
class WarpedEvents:
    x: np.ndarray
    y: np.ndarray
    tau: np.ndarray
    p: np.ndarray
    # flow sampling bookkeeping for the backward pass
    pixel: np.ndarray
    coef: np.ndarray

    def __len__(self):
        return len(self.x)


def _flow_array(flow):
    arr = flow.data if isinstance(flow, Tensor) else np.asarray(flow)
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise ShapeError(f"flow must be 2 x H x W, got {arr.shape}", dim="flow")
    return arr


def warp_events(flow, window, t_ref):
    """Move every event along the flow at its pixel to the reference time.

    ``t_ref="end"`` (forward): displacement ``(1 - tau) (u, v)``, tau' = tau.
    ``t_ref="start"`` (backward): displacement ``-tau (u, v)``, tau' = 1 - tau.
    """
    ref = _REFS.get(t_ref)
    if ref is None:
        raise ValueError(f"t_ref must be 'start' or 'end', got {t_ref!r}")
    f = _flow_array(flow)
    _, h, w = f.shape
    if (h, w) != (window.height, window.width):
        raise ShapeError(f"flow size {h}x{w} differs from sensor {window.height}x{window.width}",
                         dim="spatial")
    ev = window.events
    xs = ev["x"].astype(np.int64)
    ys = ev["y"].astype(np.int64)
    tau = window.normalized_time()
    pixel = ys * w + xs
    u = f[0].reshape(-1)[pixel].astype(np.float64)
    v = f[1].reshape(-1)[pixel].astype(np.float64)
    if ref == "end":
        coef, tau_p = 1.0 - tau, tau
    else:
        coef, tau_p = -tau, 1.0 - tau
    return WarpedEvents(x=xs + coef * u, y=ys + coef * v, tau=tau_p,
                        p=ev["p"].astype(np.int8), pixel=pixel, coef=coef)


def _splat(warped, height, width):
    return kernels.splat_forward(warped.x, warped.y, warped.tau, warped.p, height, width, np.float64)


def _average_images(acc):
    weight = acc[0::2]
    stamps = acc[1::2]
    avg = np.divide(stamps, weight, out=np.zeros_like(stamps), where=weight > 0)
    occupied = (weight[0] + weight[1]) > 0
    return weight, avg, occupied


def avg_timestamp_images(warped, height, width):
    """Per-polarity average warped timestamp images and the occupancy mask."""
    _, avg, occupied = _average_images(_splat(warped, height, width))
    return Tensor(avg[0].astype(np.float32)), Tensor(avg[1].astype(np.float32)), \
        Tensor(occupied.astype(np.float32))


def contrast_term(flow, window, t_ref):
    """Contrast term for one reference time, differentiable w.r.t. ``flow``."""
    f = _flow_array(flow)
    _, h, w = f.shape
    if len(window.events) == 0:
        if (h, w) != (window.height, window.width):
            raise ShapeError("flow size differs from sensor", dim="spatial")
        return make_result(np.zeros((), dtype=f.dtype), (flow,), lambda g: (np.zeros_like(f),))
    warped = warp_events(flow, window, t_ref)
    acc = _splat(warped, h, w)
    weight, avg, occupied = _average_images(acc)
    n_occ = max(int(occupied.sum()), 1)
    value = float(np.square(avg).sum()) / n_occ

    def backward(g):
        scale = float(g) * 2.0 / n_occ
        gacc = np.zeros_like(acc)
        nz = weight > 0
        safe = np.where(nz, weight, 1.0)
        gacc[1::2] = np.where(nz, scale * avg / safe, 0.0)
        gacc[0::2] = np.where(nz, -scale * avg * avg / safe, 0.0)
        gx, gy = kernels.splat_backward(warped.x, warped.y, warped.tau, warped.p, gacc)
        gflow = np.zeros((2, h * w), dtype=np.float64)
        gflow[0] = np.bincount(warped.pixel, weights=gx * warped.coef, minlength=h * w)
        gflow[1] = np.bincount(warped.pixel, weights=gy * warped.coef, minlength=h * w)
        return (gflow.reshape(2, h, w).astype(f.dtype),)

    return make_result(np.asarray(value, dtype=f.dtype), (flow,), backward)


def contrast_loss(flow, window):
    """Forward plus backward contrast terms."""
    return ops.add(contrast_term(flow, window, "end"), contrast_term(flow, window, "start"))


def charbonnier_smoothness(flow, alpha=CHARBONNIER_ALPHA, eps=CHARBONNIER_EPS):
    """Mean of ((delta)^2 + eps^2)^alpha over all horizontal and vertical neighbour differences."""
    f = _flow_array(flow)
    dx = f[:, :, 1:] - f[:, :, :-1]
    dy = f[:, 1:, :] - f[:, :-1, :]
    count = dx.size + dy.size
    if count == 0:
        return make_result(np.zeros((), dtype=f.dtype), (flow,), lambda g: (np.zeros_like(f),))
    base_x = dx.astype(np.float64) ** 2 + eps * eps
    base_y = dy.astype(np.float64) ** 2 + eps * eps
    value = (np.power(base_x, alpha).sum() + np.power(base_y, alpha).sum()) / count

    def backward(g):
        gdx = float(g) * 2.0 * alpha * dx * np.power(base_x, alpha - 1.0) / count
        gdy = float(g) * 2.0 * alpha * dy * np.power(base_y, alpha - 1.0) / count
        gf = np.zeros(f.shape, dtype=np.float64)
        gf[:, :, 1:] += gdx
        gf[:, :, :-1] -= gdx
        gf[:, 1:, :] += gdy
        gf[:, :-1, :] -= gdy
        return (gf.astype(f.dtype),)

    return make_result(np.asarray(value, dtype=f.dtype), (flow,), backward)


def loss_terms(flow, window, lam=DEFAULT_LAMBDA):
    """All loss components as tensors: ``contrast_fw``, ``contrast_bw``, ``smooth``, ``total``."""
    fw = contrast_term(flow, window, "end")
    bw = contrast_term(flow, window, "start")
    smooth = charbonnier_smoothness(flow)
    total = ops.add(ops.add(fw, bw), ops.scale(smooth, lam))
    return {"contrast_fw": fw, "contrast_bw": bw, "smooth": smooth, "total": total}


def total_loss(flow, window, lam=DEFAULT_LAMBDA):
    return loss_terms(flow, window, lam)["total"]


def multi_res_loss(flows, window, lam=DEFAULT_LAMBDA):
    """Sum of ``total_loss`` over full-resolution flows (intermediates already upsampled)."""
    flows = list(flows)
    if not flows:
        raise ValueError("multi_res_loss needs at least one flow")
    acc = total_loss(flows[0], window, lam)
    for f in flows[1:]:
        acc = ops.add(acc, total_loss(f, window, lam))
    return acc
