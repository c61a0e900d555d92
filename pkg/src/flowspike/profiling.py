"""Layer activity traces, single-core latency and stage/channel reduction sweeps."""
import csv
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from flowspike.network import ArchConfig, build, param_count
from flowspike.runtime import thread_limit
from flowspike.tensor import Tensor, no_grad
from flowspike.training import encode_for

WARMUP_RUNS = 5
CV_LIMIT = 0.15


@dataclass
class ActivityTrace:
    layers: list
    fractions: np.ndarray  # steps x layers

    def layer(self, name):
        return self.fractions[:, self.layers.index(name)]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step"] + self.layers)
            for i, row in enumerate(self.fractions):
                w.writerow([i] + [f"{v:.6f}" for v in row])


def nonzero_fraction(arr):
    return float(np.count_nonzero(arr)) / arr.size if arr.size else 0.0


def activity_trace(model, windows=None, inputs=None, reset=True):
    """Fraction of non-zero outputs per named layer per step.

    Pass event ``windows`` (encoded with the model's input coding) or
    pre-encoded ``inputs``.
    """
    if (windows is None) == (inputs is None):
        raise ValueError("pass exactly one of windows or inputs")
    if reset:
        model.reset_states()
    names = model.layer_names()
    rows = []
    with no_grad():
        steps = inputs if inputs is not None else (encode_for(model, w) for w in windows)
        for x in steps:
            rec = {}
            model.forward(x, record=rec)
            rows.append([nonzero_fraction(rec[n]) for n in names])
    return ActivityTrace(names, np.asarray(rows, dtype=np.float64).reshape(-1, len(names)))


@dataclass
class SpeedReport:
    config: dict
    input_size: int
    n_runs: int
    latencies: list = field(repr=False)
    threads: object = 1

    @property
    def mean(self):
        return statistics.fmean(self.latencies)

    @property
    def median(self):
        return statistics.median(self.latencies)

    @property
    def min(self):
        return min(self.latencies)

    @property
    def fps(self):
        return 1.0 / self.mean

    @property
    def cv(self):
        if len(self.latencies) < 2:
            return 0.0
        return statistics.stdev(self.latencies) / self.mean

    @property
    def unstable(self):
        """True when timing noise exceeds the stability budget (flag only)."""
        return self.cv > CV_LIMIT

    def as_row(self):
        return {"fps": self.fps, "mean_s": self.mean, "median_s": self.median,
                "min_s": self.min, "n_runs": self.n_runs, "threads": self.threads}


def speed_profile(model, input_size=128, n_runs=100, warmup=WARMUP_RUNS, single_thread=True, seed=0):
    """Time inference-only forward passes on a fixed random input."""
    if (model.height, model.width) != (input_size, input_size):
        raise ValueError(f"model is built for {model.width}x{model.height}, not {input_size}")
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    rng = np.random.default_rng(seed)
    n_in = model.config.n_in
    x = Tensor(rng.standard_normal((n_in, input_size, input_size)).astype(model.dtype) * 0.5)
    threads = 1 if single_thread else None
    lat = []
    with thread_limit(threads), no_grad():
        model.reset_states()
        for _ in range(warmup):
            model.forward(x)
        for _ in range(n_runs):
            t0 = time.perf_counter()
            model.forward(x)
            lat.append(time.perf_counter() - t0)
    model.reset_states()
    return SpeedReport(model.config.to_dict(), input_size, n_runs, lat, threads or "default")


SWEEP_COLUMNS = ("stages", "channels", "params", "fps", "metric")


def reduction_sweep(stages=(5, 3, 2), channels=(32, 24), input_size=128, n_runs=10,
                    base_config=None, metrics=None, timing=True, seed=0):
    """Parameter count and fps for each (stages, channels) grid point.

    ``metrics`` optionally maps ``(stages, channels)`` to an evaluation value
    (e.g. WAEE from a trained checkpoint).
    """
    base = (base_config or ArchConfig()).to_dict()
    rows = []
    for n in stages:
        for c in channels:
            cfg = ArchConfig.from_dict({**base, "n_stages": n, "base_channels": c})
            model = build(cfg, input_size, input_size, seed=seed)
            row = {"stages": n, "channels": c, "params": param_count(model),
                   "fps": float("nan"), "metric": float("nan")}
            if timing:
                row["fps"] = speed_profile(model, input_size, n_runs=n_runs).fps
            if metrics and (n, c) in metrics:
                row["metric"] = float(metrics[(n, c)])
            rows.append(row)
    return rows


def write_sweep_csv(rows, path):
    """Table with one row per stage count and params/fps/metric columns per channel width."""
    chans = sorted({r["channels"] for r in rows}, reverse=True)
    stages = sorted({r["stages"] for r in rows}, reverse=True)
    lookup = {(r["stages"], r["channels"]): r for r in rows}
    header = ["stages"]
    for c in chans:
        header += [f"params_{c}ch", f"fps_{c}ch", f"metric_{c}ch"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for n in stages:
            line = [n]
            for c in chans:
                r = lookup.get((n, c))
                line += ["", "", ""] if r is None else [r["params"], _fmt(r["fps"]), _fmt(r["metric"])]
            w.writerow(line)


def write_scatter(rows, path):
    """Plot data rows ``x,y,size,label``: fps against metric, sized by parameter count."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "size", "label"])
        for r in rows:
            w.writerow([_fmt(r["fps"]), _fmt(r["metric"]), r["params"],
                        f"{r['stages']} stages / {r['channels']} ch"])


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.4f}"
