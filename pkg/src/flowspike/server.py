"""Live event-stream inference over TCP.

Client frames: u32 n, then n 10-byte event records (EVT1 layout).
Server replies, one per completed window: u32 0x464C4F57 ("FLOW"), u16 w,
u16 h, then H x W interleaved float32 (u, v). A malformed frame gets an error
reply (u32 0x45525221 "ERR!", u16 code) and the connection is closed.
All integers are little-endian. Each connection owns a fresh model replica.
"""
import socket
import socketserver
import struct
import threading

import numpy as np

from flowspike.encoding import EVENT_DTYPE, EventWindow
from flowspike.errors import ProtocolError
from flowspike.tensor import no_grad
from flowspike.training import encode_for

FLOW_MARKER = 0x464C4F57
ERR_MARKER = 0x45525221
RECORD_SIZE = EVENT_DTYPE.itemsize
MAX_EVENTS_PER_FRAME = 1 << 20
MAX_WINDOWS_PER_FRAME = 10_000

ERR_FRAME_TOO_LARGE = 1
ERR_COORDINATE = 2
ERR_POLARITY = 3
ERR_TIME_REGRESSION = 4
ERR_TIME_GAP = 5
ERR_INTERNAL = 6

_U32 = struct.Struct("<I")
_FLOW_HEAD = struct.Struct("<IHH")
_ERR = struct.Struct("<IH")


class FrameParser:
    """Incremental frame decoder; any byte prefix leaves it ready for more input."""

    def __init__(self, max_events=MAX_EVENTS_PER_FRAME):
        self.buf = bytearray()
        self.max_events = max_events
        self.pending = None

    def feed(self, data):
        """Append bytes and return every complete frame as an event array."""
        self.buf += data
        frames = []
        while True:
            if self.pending is None:
                if len(self.buf) < 4:
                    break
                (n,) = _U32.unpack_from(self.buf)
                if n > self.max_events:
                    raise ProtocolError(f"frame of {n} events exceeds {self.max_events}", ERR_FRAME_TOO_LARGE)
                del self.buf[:4]
                self.pending = n
            need = self.pending * RECORD_SIZE
            if len(self.buf) < need:
                break
            frames.append(np.frombuffer(bytes(self.buf[:need]), dtype=EVENT_DTYPE).copy())
            del self.buf[:need]
            self.pending = None
        return frames

    @property
    def idle(self):
        """True when no partial frame is buffered."""
        return self.pending is None and not self.buf


def encode_frame(events):
    events = np.ascontiguousarray(events, dtype=EVENT_DTYPE)
    return _U32.pack(len(events)) + events.tobytes()


def encode_flow_reply(flow):
    _, h, w = flow.shape
    body = np.ascontiguousarray(np.moveaxis(flow, 0, -1), dtype="<f4")
    return _FLOW_HEAD.pack(FLOW_MARKER, w, h) + body.tobytes()


def encode_error(code):
    return _ERR.pack(ERR_MARKER, code)


class StreamSession:
    """Per-connection state: frame parser, open window and model replica."""

    def __init__(self, model, window_us):
        if window_us <= 0:
            raise ValueError("window_us must be positive")
        self.model = model
        self.window_us = int(window_us)
        self.parser = FrameParser()
        self.width, self.height = model.width, model.height
        self.window_index = None
        self.pending = []
        self.last_t = None
        self.replies_sent = 0
        model.reset_states()

    def feed(self, data):
        """Consume raw bytes; return the list of reply byte strings produced."""
        out = []
        for frame in self.parser.feed(data):
            out += self._ingest(frame)
        return out

    def _validate(self, ev):
        if np.any(ev["x"] >= self.width) or np.any(ev["y"] >= self.height):
            raise ProtocolError("event coordinate outside the sensor", ERR_COORDINATE)
        if np.any((ev["p"] != 1) & (ev["p"] != -1)):
            raise ProtocolError("event polarity must be +1 or -1", ERR_POLARITY)
        t = ev["t"].astype(np.int64)
        if np.any(np.diff(t) < 0) or (self.last_t is not None and t[0] < self.last_t):
            raise ProtocolError("event timestamps went backwards", ERR_TIME_REGRESSION)

    def _ingest(self, ev):
        if not len(ev):
            return []
        self._validate(ev)
        t = ev["t"].astype(np.int64)
        self.last_t = int(t[-1])
        k = t // self.window_us
        if self.window_index is None:
            self.window_index = int(k[0])
        if int(k[-1]) - self.window_index > MAX_WINDOWS_PER_FRAME:
            raise ProtocolError("time gap spans too many windows", ERR_TIME_GAP)
        replies = []
        while int(k[-1]) > self.window_index:
            cut = int(np.searchsorted(k, self.window_index + 1))
            self.pending.append(ev[:cut])
            ev, k = ev[cut:], k[cut:]
            replies.append(self._complete_window())
        self.pending.append(ev)
        return replies

    def _complete_window(self):
        events = np.concatenate(self.pending) if self.pending else np.zeros(0, dtype=EVENT_DTYPE)
        t0 = self.window_index * self.window_us
        window = EventWindow(events, t0, t0 + self.window_us, self.width, self.height)
        with no_grad():
            flow = self.model.forward(encode_for(self.model, window)).data
        self.pending = []
        self.window_index += 1
        self.replies_sent += 1
        return encode_flow_reply(flow)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        srv = self.server
        session = StreamSession(srv.model_factory(), srv.window_us)
        srv.register(self, session)
        sock = self.request
        try:
            while True:
                data = sock.recv(1 << 16)
                if not data:
                    break
                try:
                    replies = session.feed(data)
                except ProtocolError as exc:
                    sock.sendall(encode_error(exc.code))
                    break
                except Exception:
                    sock.sendall(encode_error(ERR_INTERNAL))
                    break
                for r in replies:
                    sock.sendall(r)
        except OSError:
            pass
        finally:
            srv.unregister(self)
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass


class EventServer(socketserver.ThreadingTCPServer):
    """Threaded server; ``model`` is copied once per connection."""
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, model, window_us):
        if window_us is None or window_us <= 0:
            raise ValueError("window_us must be a positive integer")
        self.base_model = model
        self.window_us = int(window_us)
        self._lock = threading.Lock()
        self.sessions = {}
        super().__init__(address, _Handler)

    def model_factory(self):
        with self._lock:
            return self.base_model.clone()

    def register(self, handler, session):
        with self._lock:
            self.sessions[id(handler)] = session

    def unregister(self, handler):
        with self._lock:
            self.sessions.pop(id(handler), None)

    @property
    def port(self):
        return self.server_address[1]


def serve(model, window_us, host="127.0.0.1", port=0):
    """Start the server on a background thread; returns it (call ``shutdown()`` to stop)."""
    srv = EventServer((host, port), model, window_us)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    srv.thread = thread
    return srv


# -- client helpers ---------------------------------------------------------------


def _recv_exact(sock, n):
    chunks = bytearray()
    while len(chunks) < n:
        part = sock.recv(n - len(chunks))
        if not part:
            raise ConnectionError(f"connection closed with {n - len(chunks)} bytes outstanding")
        chunks += part
    return bytes(chunks)


def read_reply(sock):
    """Read one server reply: ``("flow", array 2 x H x W)`` or ``("error", code)``."""
    (marker,) = _U32.unpack(_recv_exact(sock, 4))
    if marker == ERR_MARKER:
        (code,) = struct.unpack("<H", _recv_exact(sock, 2))
        return "error", code
    if marker != FLOW_MARKER:
        raise ProtocolError(f"unexpected reply marker {marker:#x}", ERR_INTERNAL)
    w, h = struct.unpack("<HH", _recv_exact(sock, 4))
    body = np.frombuffer(_recv_exact(sock, 8 * w * h), dtype="<f4").reshape(h, w, 2)
    return "flow", np.moveaxis(body, -1, 0).copy()
