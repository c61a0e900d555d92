"""Stateful cells applied per pixel and per channel to convolutional drive.

Three dynamics are supported:

* ``SNU``  - leaky integrate-and-fire with a multiplicative reset gate,
  ``s_t = (1-d)(Wx + Hy_prev) + d s_prev (1 - y_prev)``, ``y_t = step(s_t - v_th)``.
* ``SNUo`` - the same membrane behind a leaky-ReLU, with the binary spike
  gated by a sigmoid modulation branch, giving graded outputs in [0, 1].
* ``sSNU`` - SNU with the step swapped for a sigmoid (non-spiking).

Decay ``d`` and threshold ``v_th`` are per channel; ``d`` is stored as a raw
value squashed through the logistic function so it stays in (0, 1).
"""
import math
from dataclasses import dataclass

import numpy as np

from flowspike import ops
from flowspike.errors import ConfigError, ShapeError
from flowspike.tensor import Tensor

KINDS = ("SNU", "SNUo", "sSNU")
BINARY_KINDS = ("SNU", "SNUo")

DEFAULT_DECAY = 0.9
DEFAULT_THRESHOLD = {"SNU": 1.0, "sSNU": 1.0, "SNUo": 0.5}


def check_kind(kind):
    if kind not in KINDS:
        raise ConfigError(f"unknown neuron kind {kind!r}; expected one of {KINDS}")
    return kind


@dataclass
class NeuronParams:
    d_raw: Tensor
    v_th: Tensor
    kind: str

    @classmethod
    def init(cls, channels, kind, dtype=np.float32, decay=DEFAULT_DECAY, threshold=None):
        check_kind(kind)
        if threshold is None:
            threshold = DEFAULT_THRESHOLD[kind]
        raw = math.log(decay / (1.0 - decay))
        return cls(
            d_raw=Tensor(np.full(channels, raw, dtype=dtype), requires_grad=True),
            v_th=Tensor(np.full(channels, threshold, dtype=dtype), requires_grad=True),
            kind=kind,
        )

    @property
    def channels(self):
        return self.d_raw.shape[0]

    def decay(self):
        """Effective decay as a C x 1 x 1 tensor."""
        return ops.sigmoid(ops.reshape(self.d_raw, (self.channels, 1, 1)))

    def threshold(self):
        return ops.reshape(self.v_th, (self.channels, 1, 1))


@dataclass
class CellState:
    s: Tensor
    y_prev: Tensor
    y_tilde_prev: Tensor = None

    @classmethod
    def zeros(cls, shape, kind="SNU", dtype=np.float32):
        def z():
            return Tensor(np.zeros(shape, dtype=dtype))

        return cls(s=z(), y_prev=z(), y_tilde_prev=z() if kind == "SNUo" else None)

    @property
    def shape(self):
        return self.s.shape

    def detached(self):
        return CellState(
            s=self.s.detach(),
            y_prev=self.y_prev.detach(),
            y_tilde_prev=None if self.y_tilde_prev is None else self.y_tilde_prev.detach(),
        )


def reset_state(state):
    """Zeroed copy of ``state``, detached from any graph."""
    dtype = state.s.dtype
    kind = "SNUo" if state.y_tilde_prev is not None else "SNU"
    return CellState.zeros(state.shape, kind=kind, dtype=dtype)


def _check(drive, state, *others):
    if drive.shape != state.shape:
        raise ShapeError(f"drive shape {drive.shape} does not match state shape {state.shape}",
                         dim="state")
    for t in others:
        if t is not None and t.shape != drive.shape:
            raise ShapeError(f"input shape {t.shape} does not match drive shape {drive.shape}",
                             dim="drive")


def _membrane(drive, rec_drive, state, params):
    d = params.decay()
    current = drive if rec_drive is None else ops.add(drive, rec_drive)
    carry = ops.mul(ops.mul(d, state.s), ops.sub(1.0, state.y_prev))
    return ops.add(ops.mul(ops.sub(1.0, d), current), carry)


def snu_step(drive, rec_drive, state, params):
    _check(drive, state, rec_drive)
    s = _membrane(drive, rec_drive, state, params)
    y = ops.spike_step(ops.sub(s, params.threshold()))
    return y, CellState(s=s, y_prev=y)


def ssnu_step(drive, rec_drive, state, params):
    _check(drive, state, rec_drive)
    s = _membrane(drive, rec_drive, state, params)
    y = ops.sigmoid(ops.sub(s, params.threshold()))
    return y, CellState(s=s, y_prev=y)


def snuo_step(drive, rec_drive, mod_drive, mod_rec, state, params):
    """Axo-axonic variant. ``mod_drive`` already includes the modulation bias."""
    _check(drive, state, rec_drive, mod_drive, mod_rec)
    if state.y_tilde_prev is None:
        raise ShapeError("SNUo state is missing the unmodulated output", dim="state")
    d = params.decay()
    current = drive if rec_drive is None else ops.add(drive, rec_drive)
    carry = ops.mul(ops.mul(d, state.s), ops.sub(1.0, state.y_tilde_prev))
    s = ops.leaky_relu(ops.add(current, carry))
    y_tilde = ops.spike_step(ops.sub(s, params.threshold()))
    gate_in = mod_drive if mod_rec is None else ops.add(mod_drive, mod_rec)
    y = ops.mul(y_tilde, ops.sigmoid(gate_in))
    return y, CellState(s=s, y_prev=y, y_tilde_prev=y_tilde)


def step(kind, drive, rec_drive, state, params, mod_drive=None, mod_rec=None):
    if kind == "SNU":
        return snu_step(drive, rec_drive, state, params)
    if kind == "sSNU":
        return ssnu_step(drive, rec_drive, state, params)
    if kind == "SNUo":
        return snuo_step(drive, rec_drive, mod_drive, mod_rec, state, params)
    raise ConfigError(f"unknown neuron kind {kind!r}")
