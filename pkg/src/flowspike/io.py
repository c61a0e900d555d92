"""EVT1 event files and Middlebury-style FLO flow files.

EVT1 (little-endian): ``EVT1``, u16 width, u16 height, u64 count, then
``count`` 10-byte records (u16 x, u16 y, u32 t_us, i8 p, u8 pad).
FLO: f32 202021.25, i32 width, i32 height, then row-major interleaved f32 (u, v).
"""
import io
import struct

import numpy as np

from flowspike.encoding import EVENT_DTYPE
from flowspike.errors import (BadMagicError, CoordinateError, FormatError, PolarityError, ShapeError,
                              TimestampRegressionError, TruncatedError)

EVT_MAGIC = b"EVT1"
EVT_HEADER = struct.Struct("<4sHHQ")
RECORD_SIZE = EVENT_DTYPE.itemsize
FLO_MAGIC = 202021.25
FLO_HEADER = struct.Struct("<fii")
MAX_FLO_SIDE = 1 << 15
DEFAULT_CHUNK = 1 << 16

# byte position of each field inside a record
_FIELD_OFFSET = {"x": 0, "y": 2, "t": 4, "p": 8}


def _read_exact(fh, n, offset, what):
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedError(f"truncated {what}: expected {n} bytes, got {len(data)}",
                             offset=offset + len(data))
    return data


def check_records(rec, width, height, base_offset=0, last_t=None):
    """Validate a block of records; ``base_offset`` is the file position of ``rec[0]``."""
    if not len(rec):
        return last_t

    def fail(cls, idx, field, msg):
        raise cls(msg, offset=base_offset + int(idx) * RECORD_SIZE + _FIELD_OFFSET[field])

    bad = np.flatnonzero(rec["x"] >= width)
    if bad.size:
        i = bad[0]
        fail(CoordinateError, i, "x", f"event x={rec['x'][i]} outside width {width}")
    bad = np.flatnonzero(rec["y"] >= height)
    if bad.size:
        i = bad[0]
        fail(CoordinateError, i, "y", f"event y={rec['y'][i]} outside height {height}")
    bad = np.flatnonzero((rec["p"] != 1) & (rec["p"] != -1))
    if bad.size:
        i = bad[0]
        fail(PolarityError, i, "p", f"event polarity {rec['p'][i]} is not +1/-1")
    t = rec["t"].astype(np.int64)
    if last_t is not None and t[0] < last_t:
        fail(TimestampRegressionError, 0, "t", f"timestamp {t[0]} precedes {last_t}")
    bad = np.flatnonzero(np.diff(t) < 0)
    if bad.size:
        i = bad[0] + 1
        fail(TimestampRegressionError, i, "t", f"timestamp {t[i]} precedes {t[i - 1]}")
    return int(t[-1])


class EventReader:
    """Streaming EVT1 reader over a binary file object; iterate for record blocks."""

    def __init__(self, fh, chunk=DEFAULT_CHUNK):
        self.fh = fh
        self.chunk = max(1, int(chunk))
        head = _read_exact(fh, EVT_HEADER.size, 0, "EVT1 header")
        magic, self.width, self.height, self.count = EVT_HEADER.unpack(head)
        if magic != EVT_MAGIC:
            raise BadMagicError(f"bad event-file magic {magic!r}", offset=0)

    def __iter__(self):
        remaining = self.count
        offset = EVT_HEADER.size
        last_t = None
        while remaining:
            n = min(remaining, self.chunk)
            raw = self.fh.read(n * RECORD_SIZE)
            if len(raw) != n * RECORD_SIZE:
                got = len(raw) // RECORD_SIZE
                raise TruncatedError(
                    f"file ends after {self.count - remaining + got} of {self.count} events",
                    offset=offset + len(raw))
            rec = np.frombuffer(raw, dtype=EVENT_DTYPE)
            last_t = check_records(rec, self.width, self.height, offset, last_t)
            yield rec
            remaining -= n
            offset += n * RECORD_SIZE
        extra = self.fh.read(1)
        if extra:
            raise FormatError(f"trailing data after {self.count} declared events", offset=offset)


def iter_events(path, chunk=DEFAULT_CHUNK):
    """Yield validated record blocks without loading the whole file."""
    with open(path, "rb") as fh:
        yield from EventReader(fh, chunk)


def _collect(reader):
    blocks = list(reader)
    events = np.concatenate(blocks) if blocks else np.zeros(0, dtype=EVENT_DTYPE)
    return events.copy(), reader.width, reader.height


def read_events(path, chunk=DEFAULT_CHUNK):
    """Return ``(events, width, height)``."""
    with open(path, "rb") as fh:
        return _collect(EventReader(fh, chunk))


def parse_events(data, chunk=DEFAULT_CHUNK):
    return _collect(EventReader(io.BytesIO(data), chunk))


def events_to_bytes(events, width, height):
    events = np.asarray(events)
    if events.dtype != EVENT_DTYPE:
        raise ShapeError(f"events must use the 10-byte record dtype, got {events.dtype}", dim="events")
    check_records(events, width, height, EVT_HEADER.size)
    return EVT_HEADER.pack(EVT_MAGIC, width, height, len(events)) + events.tobytes()


def write_events(path, events, width, height):
    with open(path, "wb") as fh:
        fh.write(events_to_bytes(events, width, height))


def flow_to_bytes(flow):
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ShapeError(f"flow must be 2 x H x W, got {flow.shape}", dim="flow")
    if not np.isfinite(flow).all():
        raise ValueError("flow contains non-finite values")
    _, h, w = flow.shape
    body = np.ascontiguousarray(np.moveaxis(flow, 0, -1), dtype="<f4")
    return FLO_HEADER.pack(FLO_MAGIC, w, h) + body.tobytes()


def parse_flow(data):
    if len(data) < FLO_HEADER.size:
        raise TruncatedError(f"FLO header needs {FLO_HEADER.size} bytes, got {len(data)}", offset=len(data))
    magic, w, h = FLO_HEADER.unpack_from(data)
    if magic != np.float32(FLO_MAGIC):
        raise BadMagicError(f"bad FLO magic {magic!r}", offset=0)
    if not (0 < w <= MAX_FLO_SIDE):
        raise FormatError(f"implausible FLO width {w}", offset=4)
    if not (0 < h <= MAX_FLO_SIDE):
        raise FormatError(f"implausible FLO height {h}", offset=8)
    need = FLO_HEADER.size + 8 * w * h
    if len(data) < need:
        raise TruncatedError(f"FLO payload needs {need} bytes, got {len(data)}", offset=len(data))
    if len(data) > need:
        raise FormatError("trailing data after FLO payload", offset=need)
    body = np.frombuffer(data, dtype="<f4", offset=FLO_HEADER.size).reshape(h, w, 2)
    bad = np.flatnonzero(~np.isfinite(body.reshape(-1)))
    if bad.size:
        raise FormatError("non-finite flow value", offset=FLO_HEADER.size + 4 * int(bad[0]))
    return np.ascontiguousarray(np.moveaxis(body, -1, 0)).astype(np.float32)


def write_flow(path, flow):
    with open(path, "wb") as fh:
        fh.write(flow_to_bytes(flow))


def read_flow(path):
    with open(path, "rb") as fh:
        return parse_flow(fh.read())
