"""Synthetic event streams with known rigid motion.

A periodic pattern of bright bars, oriented perpendicular to the motion
direction, translates at a constant velocity (pixels per window). A pixel
emits an ON event when a bar's leading edge passes its centre and an OFF
event when the trailing edge does. Crossing times are analytic, so warping
by the true flow collapses each edge exactly.
"""
import numpy as np

from flowspike.encoding import DEFAULT_WINDOW_US, EVENT_DTYPE, slice_windows

DEFAULT_VELOCITY = (2.0, 0.0)
DEFAULT_PERIOD = 6.0
DEFAULT_BAR = 3.0
DEFAULT_OFFSET = 0.25


def translating_bars(width=16, height=16, n_windows=40, window_us=DEFAULT_WINDOW_US,
                     velocity=DEFAULT_VELOCITY, period=DEFAULT_PERIOD, bar=DEFAULT_BAR,
                     offset=DEFAULT_OFFSET):
    """Events of bars moving at ``velocity`` = (u, v) px/window; returns ``(events, flow)``.

    ``flow`` is the constant 2 x H x W ground truth.
    """
    if not 0 < bar < period:
        raise ValueError("bar width must lie strictly inside the period")
    u, v = (float(c) for c in velocity)
    speed = float(np.hypot(u, v))
    flow = np.empty((2, height, width), dtype=np.float32)
    flow[0], flow[1] = u, v
    if speed == 0.0 or n_windows <= 0:
        return np.zeros(0, dtype=EVENT_DTYPE), flow
    nx, ny = u / speed, v / speed
    ys, xs = np.mgrid[0:height, 0:width]
    s = (xs * nx + ys * ny).reshape(-1)
    span = speed * n_windows
    stamps, px, py, pol = [], [], [], []
    # position of the pattern along the motion axis is  s - offset - speed * t
    for edge, sign in ((0.0, 1), (bar, -1)):
        base = s - offset - edge
        m_lo = int(np.floor((base.min() - span) / period)) - 1
        m_hi = int(np.ceil(base.max() / period)) + 1
        for m in range(m_lo, m_hi + 1):
            t = (base - m * period) / speed
            hit = (t >= 0.0) & (t < n_windows)
            idx = np.nonzero(hit)[0]
            stamps.append(np.minimum(np.rint(t[idx] * window_us), n_windows * window_us - 1))
            px.append(xs.reshape(-1)[idx])
            py.append(ys.reshape(-1)[idx])
            pol.append(np.full(len(idx), sign))
    stamps = np.concatenate(stamps).astype(np.int64)
    order = np.lexsort((np.concatenate(px), np.concatenate(py), stamps))
    ev = np.zeros(len(stamps), dtype=EVENT_DTYPE)
    ev["t"] = stamps[order]
    ev["x"] = np.concatenate(px)[order]
    ev["y"] = np.concatenate(py)[order]
    ev["p"] = np.concatenate(pol)[order]
    return ev, flow


def translating_windows(width=16, height=16, n_windows=40, window_us=DEFAULT_WINDOW_US, **kwargs):
    """``translating_bars`` sliced into ``n_windows`` consecutive windows."""
    ev, flow = translating_bars(width, height, n_windows, window_us, **kwargs)
    windows = slice_windows(ev, window_us, width, height, t_start=0, t_end=n_windows * window_us)
    return windows, flow
