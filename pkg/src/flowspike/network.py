"""Timelens-style spiking encoder/decoder for dense optical flow.

Layout for ``n`` stages and base width ``C``::

    stem      conv0 (n_in -> C, 7x7), conv1 (C -> C, 7x7)          full res
    s1..sn    avg-pool 2x2, then two spiking convs                   res / 2^k
              channels double per block, except the deepest block,
              which keeps its input width; first block uses 5x5 kernels
    u1..un    bilinear x2, spiking conv, concat skip, spiking conv  back to full res
    head      1x1 conv (C -> 2), tanh, times ``max_flow``

Only encoder blocks may carry recurrent convolutions; the pattern string
(``RF``, ``FR``, ``RR``, ``FF``) says which of the two convs in every block does.
"""
import copy
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from flowspike import ops
from flowspike.errors import ConfigError, ShapeError
from flowspike.neurons import BINARY_KINDS, CellState, NeuronParams, check_kind, reset_state, step
from flowspike.tensor import Tensor

RECURRENCY_PATTERNS = ("RF", "FR", "RR", "FF")
MIN_STAGES, MAX_STAGES = 2, 5


@dataclass
class ArchConfig:
    n_in: int = 6
    base_channels: int = 32
    n_stages: int = 5
    recurrency: str = "RF"
    neuron_kind: str = "SNU"
    multi_res_loss: bool = False
    max_flow: float = 32.0
    encoding: str = "voxel"

    def validate(self):
        if not MIN_STAGES <= self.n_stages <= MAX_STAGES:
            raise ConfigError(f"n_stages must be in {MIN_STAGES}..{MAX_STAGES}, got {self.n_stages}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.n_in < 1:
            raise ConfigError(f"n_in must be >= 1, got {self.n_in}")
        if self.recurrency not in RECURRENCY_PATTERNS:
            raise ConfigError(f"recurrency must be one of {RECURRENCY_PATTERNS}, got {self.recurrency!r}")
        check_kind(self.neuron_kind)
        if self.encoding not in ("voxel", "count"):
            raise ConfigError(f"encoding must be 'voxel' or 'count', got {self.encoding!r}")
        if self.encoding == "count" and self.n_in != 2:
            raise ConfigError("count encoding produces 2 input channels; set n_in=2")
        if self.encoding == "voxel" and self.n_in < 2:
            raise ConfigError("voxel encoding needs n_in (time bins) >= 2")
        if not (self.max_flow > 0 and math.isfinite(self.max_flow)):
            raise ConfigError(f"max_flow must be positive and finite, got {self.max_flow}")
        return self

    def required_divisor(self):
        return 2 ** (self.n_stages + 1)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**data)


def channel_plan(config):
    """Encoder widths by level: level 0 is the stem, level k the k-th block."""
    c = config.base_channels
    widths = [c]
    for k in range(1, config.n_stages + 1):
        widths.append(widths[-1] if k == config.n_stages else c * 2 ** k)
    return widths


def _uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class SpikingConv:
    """Convolution (plus optional recurrent and modulation convs) feeding a neuron cell."""

    def __init__(self, name, in_ch, out_ch, kernel, kind, recurrent, shape, rng, dtype=np.float32):
        self.name = name
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.kind = kind
        self.recurrent = recurrent
        self.out_shape = (out_ch,) + tuple(shape)
        k = kernel

        def conv_w(cin):
            return Tensor(_uniform(rng, (out_ch, cin, k, k), cin * k * k, dtype), requires_grad=True)

        def zeros(n):
            return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)

        self.weight, self.bias = conv_w(in_ch), zeros(out_ch)
        self.rec_weight = self.rec_bias = None
        if recurrent:
            self.rec_weight, self.rec_bias = conv_w(out_ch), zeros(out_ch)
        self.mod_weight = self.mod_bias = self.mod_rec_weight = None
        if kind == "SNUo":
            self.mod_weight, self.mod_bias = conv_w(in_ch), zeros(out_ch)
            if recurrent:
                self.mod_rec_weight = conv_w(out_ch)
        self.neuron = NeuronParams.init(out_ch, kind, dtype=dtype)
        self.state = CellState.zeros(self.out_shape, kind=kind, dtype=dtype)

    def named_parameters(self):
        items = [("weight", self.weight), ("bias", self.bias)]
        if self.recurrent:
            items += [("rec_weight", self.rec_weight), ("rec_bias", self.rec_bias)]
        if self.mod_weight is not None:
            items += [("mod_weight", self.mod_weight), ("mod_bias", self.mod_bias)]
            if self.mod_rec_weight is not None:
                items.append(("mod_rec_weight", self.mod_rec_weight))
        items += [("d_raw", self.neuron.d_raw), ("v_th", self.neuron.v_th)]
        return items

    def __call__(self, x):
        drive = ops.conv2d(x, self.weight, self.bias)
        rec = mod = mod_rec = None
        if self.recurrent:
            rec = ops.conv2d(self.state.y_prev, self.rec_weight, self.rec_bias)
        if self.kind == "SNUo":
            mod = ops.conv2d(x, self.mod_weight, self.mod_bias)
            if self.recurrent:
                mod_rec = ops.conv2d(self.state.y_prev, self.mod_rec_weight)
        y, self.state = step(self.kind, drive, rec, self.state, self.neuron, mod, mod_rec)
        return y

    def reset_state(self):
        self.state = reset_state(self.state)

    def detach_state(self):
        self.state = self.state.detached()


class Conv1x1:
    """Plain 1x1 convolution followed by tanh (prediction heads)."""

    def __init__(self, in_ch, rng, dtype=np.float32, out_ch=2):
        self.weight = Tensor(_uniform(rng, (out_ch, in_ch, 1, 1), in_ch, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def named_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def __call__(self, x):
        return ops.tanh(ops.conv2d(x, self.weight, self.bias))


class Model:
    def __init__(self, config, height, width, seed=0, dtype=np.float32):
        config.validate()
        div = config.required_divisor()
        if height % div or width % div or height <= 0 or width <= 0:
            raise ShapeError(
                f"input size {height}x{width} must be divisible by 2^(n_stages+1) = {div} "
                f"for n_stages={config.n_stages}", dim="spatial")
        self.config = config
        self.height, self.width = height, width
        self.seed = seed
        rng = np.random.default_rng(seed)
        kind, n, pat = config.neuron_kind, config.n_stages, config.recurrency
        widths = channel_plan(config)
        self.widths = widths
        full = (height, width)

        def res(level):
            return (height // 2 ** level, width // 2 ** level)

        self.stem = [
            SpikingConv("conv0", config.n_in, widths[0], 7, kind, False, full, rng, dtype),
            SpikingConv("conv1", widths[0], widths[0], 7, kind, False, full, rng, dtype),
        ]
        self.encoders = []
        for k in range(1, n + 1):
            kern = 5 if k == 1 else 3
            self.encoders.append((
                SpikingConv(f"s{k}.a", widths[k - 1], widths[k], kern, kind, pat[0] == "R", res(k), rng, dtype),
                SpikingConv(f"s{k}.b", widths[k], widths[k], kern, kind, pat[1] == "R", res(k), rng, dtype),
            ))
        self.decoders = []
        self.flow_heads = []
        prev = widths[n]
        for j in range(1, n + 1):
            level = n - j
            out = widths[level]
            extra = 2 if (config.multi_res_loss and j > 1) else 0
            self.decoders.append((
                SpikingConv(f"u{j}.a", prev + extra, out, 3, kind, False, res(level), rng, dtype),
                SpikingConv(f"u{j}.b", 2 * out, out, 3, kind, False, res(level), rng, dtype),
            ))
            if config.multi_res_loss:
                self.flow_heads.append(Conv1x1(out, rng, dtype))
            prev = out
        self.head = Conv1x1(widths[0], rng, dtype)

    # -- bookkeeping ---------------------------------------------------------

    @property
    def dtype(self):
        return self.head.weight.dtype

    def spiking_layers(self):
        layers = list(self.stem)
        for a, b in self.encoders:
            layers += [a, b]
        for a, b in self.decoders:
            layers += [a, b]
        return layers

    def named_parameters(self):
        items = []
        for layer in self.spiking_layers():
            items += [(f"{layer.name}.{n}", t) for n, t in layer.named_parameters()]
        for j, fh in enumerate(self.flow_heads, start=1):
            items += [(f"flow{j}.{n}", t) for n, t in fh.named_parameters()]
        items += [(f"head.{n}", t) for n, t in self.head.named_parameters()]
        return items

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def reset_states(self):
        for layer in self.spiking_layers():
            layer.reset_state()

    def detach_states(self):
        for layer in self.spiking_layers():
            layer.detach_state()

    def clone(self):
        self.detach_states()
        return copy.deepcopy(self)

    def to_dtype(self, dtype):
        """Copy of the model with parameters and states cast to ``dtype``."""
        twin = self.clone()
        for _, p in twin.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for layer in twin.spiking_layers():
            st = layer.state
            layer.state = CellState(
                s=st.s.astype(dtype), y_prev=st.y_prev.astype(dtype),
                y_tilde_prev=None if st.y_tilde_prev is None else st.y_tilde_prev.astype(dtype))
        return twin

    # -- forward -------------------------------------------------------------

    def forward(self, x, return_intermediates=False, record=None):
        """One time step. Returns the 2 x H x W flow (pixels per window).

        With ``return_intermediates`` the result is ``(flow, intermediates)``,
        where ``intermediates`` holds the per-decoder flows (multi-resolution
        variant only) upsampled by nearest neighbour to full size. ``record``,
        if a dict, receives every named layer's output array.
        """
        cfg = self.config
        if not isinstance(x, Tensor):
            x = Tensor(x)
        expect = (cfg.n_in, self.height, self.width)
        if x.shape != expect:
            raise ShapeError(f"model input must be {expect}, got {x.shape}", dim="input")
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))

        def keep(name, t):
            if record is not None:
                record[name] = t.data

        keep("input", x)
        h = x
        for layer in self.stem:
            h = layer(h)
            keep(layer.name, h)
        skips = [h]
        for k, (a, b) in enumerate(self.encoders, start=1):
            h = b(a(ops.avg_pool2(h)))
            keep(f"s{k}", h)
            skips.append(h)

        n = cfg.n_stages
        intermediates = []
        prev_flow = None
        for j, (a, b) in enumerate(self.decoders, start=1):
            if prev_flow is not None:
                h = ops.concat_channels(h, prev_flow)
            h = a(ops.upsample_bilinear2(h))
            h = b(ops.concat_channels(h, skips[n - j]))
            keep(f"u{j}", h)
            if cfg.multi_res_loss:
                prev_flow = self.flow_heads[j - 1](h)
                intermediates.append(ops.upsample_nearest(
                    ops.scale(prev_flow, cfg.max_flow), (self.height, self.width)))
        pred = self.head(h)
        keep("pred", pred)
        flow = ops.scale(pred, cfg.max_flow)
        if return_intermediates:
            return flow, intermediates
        return flow

    __call__ = forward

    def layer_names(self):
        names = ["input", "conv0", "conv1"]
        names += [f"s{k}" for k in range(1, self.config.n_stages + 1)]
        names += [f"u{j}" for j in range(1, self.config.n_stages + 1)]
        return names + ["pred"]

    @property
    def spiking_output(self):
        return self.config.neuron_kind in BINARY_KINDS


def build(config, height, width, seed=0, dtype=np.float32):
    return Model(config, height, width, seed=seed, dtype=dtype)


def param_count(model):
    return int(sum(p.size for p in model.parameters()))


def detach_states(model):
    model.detach_states()


def reset_states(model):
    model.reset_states()
