"""Truncated back-propagation through time over event-window sequences."""
import csv
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from flowspike import loss as loss_mod
from flowspike import ops
from flowspike.encoding import encode
from flowspike.errors import ConfigError, ShapeError
from flowspike.tensor import backward

LOG_COLUMNS = ("chunk_index", "loss", "contrast_fw", "contrast_bw", "smooth")


@dataclass
class TrainConfig:
    tbptt_interval: int = 10
    learning_rate: float = 1e-4
    lam: float = loss_mod.DEFAULT_LAMBDA
    epochs: int = 1
    seed: int = 0
    multi_res: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    bins: int = 6

    def validate(self):
        if not isinstance(self.tbptt_interval, int) or self.tbptt_interval < 1:
            raise ConfigError(f"tbptt_interval must be an integer >= 1, got {self.tbptt_interval!r}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate!r}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        return self

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        # accept the Greek-letter spelling used in some configs
        data = dict(data)
        if "λ" in data:
            data["lam"] = data.pop("λ")
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data).validate()

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)


@dataclass
class Adam:
    """Adaptive-moment optimizer holding per-parameter moment buffers."""
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)

    def step(self, params):
        """Update every tensor in ``params`` from its ``.grad`` and clear the gradients."""
        self.steps += 1
        c1 = 1.0 - self.beta1 ** self.steps
        c2 = 1.0 - self.beta2 ** self.steps
        for p in params:
            g = p.grad
            if g is None:
                continue
            key = id(p)
            m = self.m.get(key)
            if m is None:
                m = self.m[key] = np.zeros_like(p.data, dtype=np.float64)
                self.v[key] = np.zeros_like(p.data, dtype=np.float64)
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g, dtype=np.float64)
            if self.learning_rate:
                update = self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
                p.data = (p.data - update).astype(p.data.dtype)
            p.grad = None


def optimizer_step(params, optimizer):
    optimizer.step(params)


def _check_extents(model, windows):
    for i, w in enumerate(windows):
        if (w.height, w.width) != (model.height, model.width):
            raise ShapeError(
                f"window {i} is {w.width}x{w.height} but the model expects "
                f"{model.width}x{model.height}", dim="spatial")


def encode_for(model, window, bins=6):
    cfg = model.config
    method = cfg.encoding
    if method == "count" and cfg.n_in != 2:
        raise ConfigError("count encoding needs n_in=2")
    return encode(window, method, bins=cfg.n_in if method == "voxel" else bins, dtype=model.dtype)


def chunk_loss(model, chunk, cfg):
    """Forward every window of ``chunk`` from the current state; return the mean loss and its parts."""
    total = None
    parts = dict.fromkeys(LOG_COLUMNS[2:], 0.0)
    for window in chunk:
        x = encode_for(model, window, cfg.bins)
        if cfg.multi_res and model.config.multi_res_loss:
            flow, inter = model.forward(x, return_intermediates=True)
            terms = loss_mod.loss_terms(flow, window, cfg.lam)
            step_loss = ops.add(terms["total"], loss_mod.multi_res_loss(inter, window, cfg.lam))
        else:
            flow = model.forward(x)
            terms = loss_mod.loss_terms(flow, window, cfg.lam)
            step_loss = terms["total"]
        total = step_loss if total is None else ops.add(total, step_loss)
        for k in parts:
            parts[k] += float(terms[k].data)
    n = len(chunk)
    return ops.scale(total, 1.0 / n), {k: v / n for k, v in parts.items()}


def train_sequence(model, windows, cfg, optimizer=None, start_index=0):
    """One pass over ``windows`` with TBPTT; returns a list of per-chunk log rows."""
    cfg.validate()
    windows = list(windows)
    _check_extents(model, windows)
    if optimizer is None:
        optimizer = Adam.from_config(cfg)
    params = model.parameters()
    model.reset_states()
    model.zero_grad()
    log = []
    step = cfg.tbptt_interval
    for c, lo in enumerate(range(0, len(windows), step)):
        mean_loss, parts = chunk_loss(model, windows[lo:lo + step], cfg)
        backward(mean_loss)
        optimizer.step(params)
        model.detach_states()
        log.append({"chunk_index": start_index + c, "loss": float(mean_loss.data), **parts})
    return log


def train(model, windows, cfg, log_path=None, callback=None):
    """Run ``cfg.epochs`` passes over ``windows``; returns the full chunk log.

    Each row carries an extra ``epoch`` key. ``callback(epoch, rows)`` is called
    after every epoch.
    """
    cfg.validate()
    windows = list(windows)
    _check_extents(model, windows)
    optimizer = Adam.from_config(cfg)
    log = []
    for epoch in range(cfg.epochs):
        rows = train_sequence(model, windows, cfg, optimizer, start_index=len(log))
        for r in rows:
            r["epoch"] = epoch
        log += rows
        if callback is not None:
            callback(epoch, rows)
    if log_path is not None:
        write_log(log, log_path)
    return log


def epoch_means(log):
    by_epoch = {}
    for r in log:
        by_epoch.setdefault(r.get("epoch", 0), []).append(r["loss"])
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def write_log(log, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for r in log:
            writer.writerow(r)
