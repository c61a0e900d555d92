"""Event containers and the count / voxel-grid input encodings.

Events are kept as a numpy structured array whose dtype is the 10-byte EVT1
record (``x, y`` u16, ``t`` u32 microseconds, ``p`` i8 polarity, one pad
byte), so files and sockets can be decoded without copying field by field.
"""
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from flowspike import kernels
from flowspike.errors import ConfigError, EventOrderError, ShapeError
from flowspike.tensor import Tensor

EVENT_DTYPE = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<u4"), ("p", "i1"), ("pad", "u1")])
DEFAULT_WINDOW_US = 10_000
DEFAULT_BINS = 6


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


def make_events(x=(), y=(), t=(), p=()):
    """Build an event array from parallel sequences (or from a list of ``Event``)."""
    n = len(x)
    if not (len(y) == len(t) == len(p) == n):
        raise ShapeError("event field sequences differ in length", dim="events")
    ev = np.zeros(n, dtype=EVENT_DTYPE)
    ev["x"], ev["y"], ev["t"], ev["p"] = x, y, t, p
    return ev


def events_from_list(items):
    items = list(items)
    if not items:
        return np.zeros(0, dtype=EVENT_DTYPE)
    x, y, t, p = zip(*items)
    return make_events(x, y, t, p)


def first_order_violation(t):
    """Index of the first event whose timestamp is smaller than its predecessor's, or None."""
    if len(t) < 2:
        return None
    bad = np.flatnonzero(np.diff(t.astype(np.int64)) < 0)
    return int(bad[0]) + 1 if bad.size else None


@dataclass
class EventWindow:
    events: np.ndarray
    t0: int
    t1: int
    width: int
    height: int

    def __post_init__(self):
        if self.events.dtype != EVENT_DTYPE:
            self.events = np.asarray(self.events).astype(EVENT_DTYPE)

    def __len__(self):
        return len(self.events)

    @property
    def duration(self):
        return self.t1 - self.t0

    def validate(self):
        ev = self.events
        if self.t1 <= self.t0:
            raise ConfigError(f"window bounds must satisfy t0 < t1, got [{self.t0}, {self.t1})")
        if len(ev) == 0:
            return self
        if ev["x"].max() >= self.width or ev["y"].max() >= self.height:
            raise ShapeError(f"event coordinates exceed sensor {self.width}x{self.height}",
                             dim="sensor")
        t = ev["t"].astype(np.int64)
        if t.min() < self.t0 or t.max() >= self.t1:
            raise ConfigError(f"event timestamps fall outside [{self.t0}, {self.t1})")
        bad = first_order_violation(ev["t"])
        if bad is not None:
            raise EventOrderError(f"events not time-ordered at index {bad}", index=bad)
        if not np.all(np.abs(ev["p"]) == 1):
            raise ConfigError("polarity must be +1 or -1")
        return self

    def normalized_time(self):
        """Per-event time in [0, 1) relative to the window bounds."""
        return (self.events["t"].astype(np.float64) - self.t0) / float(self.t1 - self.t0)


def slice_windows(events, window_us, width, height, t_start=None, t_end=None):
    """Cut a time-ordered stream into consecutive half-open windows ``[k w, (k+1) w)``.

    The first window is the one holding ``t_start`` (default: the first event,
    or time 0 for an empty stream); windows continue through ``t_end`` when
    given, else through the last event. Empty windows are kept.
    """
    if window_us <= 0:
        raise ConfigError(f"window_us must be positive, got {window_us}")
    events = np.asarray(events)
    t = events["t"].astype(np.int64) if len(events) else np.zeros(0, dtype=np.int64)
    bad = first_order_violation(t)
    if bad is not None:
        raise EventOrderError(
            f"event stream not time-ordered: t[{bad}]={t[bad]} < t[{bad - 1}]={t[bad - 1]}", index=bad)
    if t_start is None:
        k0 = int(t[0] // window_us) if len(t) else 0
    else:
        k0 = int(t_start // window_us)
    if t_end is None:
        if not len(t):
            return []
        k1 = int(t[-1] // window_us) + 1
    else:
        k1 = max(int(-(-t_end // window_us)), k0)
        if len(t):
            k1 = max(k1, int(t[-1] // window_us) + 1)
    bounds = np.arange(k0, k1 + 1, dtype=np.int64) * window_us
    cuts = np.searchsorted(t, bounds, side="left")
    return [
        EventWindow(events[cuts[i]:cuts[i + 1]], int(bounds[i]), int(bounds[i + 1]), width, height)
        for i in range(k1 - k0)
    ]


def count_encode(window, dtype=np.float32):
    """2 x H x W tensor: channel 0 ON counts, channel 1 OFF counts."""
    out = np.zeros((2, window.height, window.width), dtype=dtype)
    ev = window.events
    if len(ev):
        kernels.count_accumulate(ev["x"], ev["y"], ev["p"], out)
    return Tensor(out)


def voxel_encode(window, bins=DEFAULT_BINS, dtype=np.float32):
    """bins x H x W tensor of signed polarity spread over time bins by linear interpolation."""
    if bins < 2:
        raise ConfigError(f"voxel encoding needs at least 2 bins, got {bins}")
    if window.t1 <= window.t0:
        raise ConfigError("voxel encoding needs t1 > t0")
    out = np.zeros((bins, window.height, window.width), dtype=dtype)
    ev = window.events
    if len(ev):
        tau = window.normalized_time() * (bins - 1)
        kernels.voxel_accumulate(ev["x"], ev["y"], tau, ev["p"].astype(np.float64), out)
    return Tensor(out)


def encode(window, method="voxel", bins=DEFAULT_BINS, dtype=np.float32):
    if method == "voxel":
        return voxel_encode(window, bins=bins, dtype=dtype)
    if method == "count":
        return count_encode(window, dtype=dtype)
    raise ConfigError(f"unknown encoding {method!r}; expected 'voxel' or 'count'")
