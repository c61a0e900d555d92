"""SNUC checkpoint container.

Layout (little-endian): magic ``SNUC``, u32 version, u32 JSON length, UTF-8
JSON config, u32 tensor count, then per tensor: u16 name length, UTF-8 name,
u8 rank, rank x u32 dims, float32 payload.
"""
import io
import json
import math
import struct

import numpy as np

from flowspike.errors import (BadMagicError, FormatError, ShapeError, TensorCountError,
                              TruncatedError, VersionError)
from flowspike.network import ArchConfig, build

MAGIC = b"SNUC"
VERSION = 1
MAX_RANK = 8
# guards against absurd allocations from corrupted headers
MAX_JSON_BYTES = 1 << 24
MAX_TENSOR_ELEMS = 1 << 30
MAX_SIDE = 4096
MAX_CHANNELS = 1024
# neuron-state elements of the first stage (base_channels x H x W)
MAX_STATE_ELEMS = 1 << 26


def _pack_tensors(config, tensors):
    out = io.BytesIO()
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, len(blob)))
    out.write(blob)
    out.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"tensor {name!r} has rank {arr.ndim} > {MAX_RANK}", dim="rank")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedError(f"truncated {what}: need {n} bytes, have {len(self.data) - self.pos}",
                                 offset=self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _unpack(data):
    r = _Reader(data)
    magic = bytes(r.take(4, "magic"))
    if magic != MAGIC:
        raise BadMagicError(f"bad checkpoint magic {magic!r}", offset=0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}", offset=4)
    (n_json,) = r.unpack("<I", "config length")
    if n_json > MAX_JSON_BYTES:
        raise FormatError(f"config block of {n_json} bytes is implausibly large", offset=8)
    at = r.pos
    try:
        config = json.loads(bytes(r.take(n_json, "config")).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"config block is not valid UTF-8 JSON: {exc}", offset=at) from None
    if not isinstance(config, dict):
        raise FormatError("config block must be a JSON object", offset=at)
    (count,) = r.unpack("<I", "tensor count")
    tensors = []
    for i in range(count):
        at = r.pos
        (n_name,) = r.unpack("<H", f"tensor {i} name length")
        try:
            name = bytes(r.take(n_name, f"tensor {i} name")).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"tensor {i} name is not UTF-8", offset=at + 2) from None
        (rank,) = r.unpack("<B", f"tensor {i} rank")
        if rank > MAX_RANK:
            raise FormatError(f"tensor {name!r} rank {rank} exceeds {MAX_RANK}", offset=r.pos - 1)
        dims = r.unpack(f"<{rank}I", f"tensor {i} dims")
        n = math.prod(dims)
        if n > MAX_TENSOR_ELEMS:
            raise FormatError(f"tensor {name!r} with {n} elements is implausibly large", offset=r.pos)
        payload = r.take(4 * n, f"tensor {name!r} payload")
        tensors.append((name, np.frombuffer(payload, dtype="<f4").reshape(dims).copy()))
    if r.pos != len(r.data):
        raise TensorCountError(
            f"{len(r.data) - r.pos} trailing bytes after {count} declared tensors", offset=r.pos)
    return config, tensors


def dumps(model):
    config = {"arch": model.config.to_dict(), "height": model.height, "width": model.width,
              "seed": model.seed}
    return _pack_tensors(config, [(n, p.data) for n, p in model.named_parameters()])


def loads(data):
    """Rebuild a model from checkpoint bytes; every stored tensor must match a parameter."""
    config, tensors = _unpack(data)
    try:
        arch = ArchConfig.from_dict(config["arch"])
        h, w = int(config["height"]), int(config["width"])
        seed = int(config.get("seed", 0))
        if not (0 < h <= MAX_SIDE and 0 < w <= MAX_SIDE):
            raise FormatError(f"implausible sensor size {w}x{h} in checkpoint config")
        if not (0 < arch.base_channels <= MAX_CHANNELS and 0 < arch.n_in <= MAX_CHANNELS):
            raise FormatError("implausible channel counts in checkpoint config")
        if arch.base_channels * h * w > MAX_STATE_ELEMS:
            raise FormatError(f"{arch.base_channels} channels at {w}x{h} exceed the state budget")
        model = build(arch, h, w, seed=seed)
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError, OverflowError) as exc:
        raise FormatError(f"checkpoint config is unusable: {exc!r}") from None
    params = dict(model.named_parameters())
    if len(tensors) != len(params):
        raise TensorCountError(f"checkpoint holds {len(tensors)} tensors, model needs {len(params)}")
    for name, arr in tensors:
        p = params.get(name)
        if p is None:
            raise FormatError(f"unknown tensor {name!r}")
        if p.data.shape != arr.shape:
            raise ShapeError(f"tensor {name!r} has shape {arr.shape}, expected {p.data.shape}", dim=name)
        p.data = arr.astype(p.data.dtype)
    return model


def save(model, path):
    with open(path, "wb") as fh:
        fh.write(dumps(model))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def read_raw(data):
    """Parse checkpoint bytes into ``(config, [(name, array), ...])`` without building a model."""
    return _unpack(data)
