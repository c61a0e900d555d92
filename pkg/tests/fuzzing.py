"""Mutation fuzzing of the binary readers (EVT1, FLO, SNUC)."""
import numpy as np

from flowspike import checkpoint
from flowspike.encoding import make_events
from flowspike.errors import FlowSpikeError
from flowspike.io import events_to_bytes, flow_to_bytes, parse_events, parse_flow
from flowspike.network import ArchConfig, build


def sample_events(n=20, w=20, h=10, seed=0):
    rng = np.random.default_rng(seed)
    return make_events(rng.integers(0, w, n), rng.integers(0, h, n), np.sort(rng.integers(0, 10**6, n)),
                       rng.choice([-1, 1], n))


def _mutate(data, rng):
    """Truncate, corrupt header bytes, corrupt anywhere, or splice random junk."""
    data = bytearray(data)
    kind = rng.integers(0, 5)
    if kind == 0:
        return bytes(data[:rng.integers(0, len(data))])
    if kind == 1:
        for _ in range(rng.integers(1, 4)):
            data[rng.integers(0, min(len(data), 24))] = rng.integers(0, 256)
        return bytes(data)
    if kind == 2:
        for _ in range(rng.integers(1, 8)):
            data[rng.integers(0, len(data))] = rng.integers(0, 256)
        return bytes(data)
    if kind == 3:
        at = rng.integers(0, len(data))
        return bytes(data[:at]) + rng.bytes(rng.integers(1, 16)) + bytes(data[at:])
    return rng.bytes(rng.integers(0, 64))


def fuzz_formats(n_cases, seed=0):
    """Feed mutated EVT1/FLO/SNUC blobs to the readers; return counts of outcomes.

    Raises AssertionError on any exception outside the package's error tree.
    """
    rng = np.random.default_rng(seed)
    valid = {
        "evt": events_to_bytes(sample_events(20), 20, 10),
        "flo": flow_to_bytes(np.random.default_rng(1).normal(size=(2, 3, 4)).astype(np.float32)),
        "ckpt": checkpoint.dumps(build(ArchConfig(n_stages=2, base_channels=1), 8, 8)),
    }
    readers = {"evt": parse_events, "flo": parse_flow, "ckpt": checkpoint.loads}
    names = list(valid)
    outcome = {"ok": 0, "error": 0}
    for i in range(n_cases):
        name = names[i % 3]
        blob = _mutate(valid[name], rng)
        try:
            readers[name](blob)
        except FlowSpikeError:
            outcome["error"] += 1
        except Exception as exc:  # noqa: BLE001
            raise AssertionError(f"{name} reader crashed with {type(exc).__name__}: {exc} on {blob[:40]!r}")
        else:
            outcome["ok"] += 1
    return outcome
