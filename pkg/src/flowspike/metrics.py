"""Sparse optical-flow evaluation: AEE, outlier percentage and weighted AEE."""
import csv
import io
from dataclasses import dataclass

import numpy as np

from flowspike.errors import ShapeError

# per-sequence reference AEEs used to normalize (outdoor_day1, indoor_flying1..3)
WAEE_WEIGHTS = {
    1: (0.5375, 0.7975, 1.5475, 1.2775),
    4: (2.0150, 2.9900, 5.3675, 4.3600),
}
SEQUENCES = ("outdoor_day1", "indoor_flying1", "indoor_flying2", "indoor_flying3")
OUTLIER_THRESHOLD = 3.0


@dataclass
class EvalSample:
    """Predicted and ground-truth 2 x H x W flows with boolean H x W masks."""
    pred: np.ndarray
    gt: np.ndarray
    valid: np.ndarray = None
    events: np.ndarray = None

    def __post_init__(self):
        self.pred = np.asarray(self.pred, dtype=np.float64)
        self.gt = np.asarray(self.gt, dtype=np.float64)
        if self.pred.ndim != 3 or self.pred.shape[0] != 2:
            raise ShapeError(f"pred must be 2 x H x W, got {self.pred.shape}", dim="pred")
        if self.gt.shape != self.pred.shape:
            raise ShapeError(f"gt {self.gt.shape} does not match pred {self.pred.shape}", dim="gt")
        hw = self.pred.shape[1:]
        if self.valid is None:
            self.valid = np.isfinite(self.gt).all(axis=0)
        if self.events is None:
            self.events = np.ones(hw, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        self.events = np.asarray(self.events, dtype=bool)
        for name in ("valid", "events"):
            if getattr(self, name).shape != hw:
                raise ShapeError(f"{name} mask {getattr(self, name).shape} does not match {hw}", dim=name)

    @property
    def mask(self):
        return self.valid & self.events

    def endpoint_errors(self):
        m = self.mask
        if not m.any():
            raise ValueError("no evaluable pixels")
        d = self.pred[:, m] - self.gt[:, m]
        return np.hypot(d[0], d[1])


def event_mask(events, width, height):
    """Boolean H x W mask of pixels that received at least one event."""
    m = np.zeros((height, width), dtype=bool)
    m[np.asarray(events["y"], dtype=np.intp), np.asarray(events["x"], dtype=np.intp)] = True
    return m


def aee(sample):
    return float(sample.endpoint_errors().mean())


def outlier_pct(sample, threshold=OUTLIER_THRESHOLD):
    return float(100.0 * (sample.endpoint_errors() > threshold).mean())


def waee(aee_od1, aee_if1, aee_if2, aee_if3, weights=WAEE_WEIGHTS[1]):
    """Mean of the four AEEs, each divided by its sequence weight."""
    if isinstance(weights, int):
        weights = WAEE_WEIGHTS[weights]
    vals = (aee_od1, aee_if1, aee_if2, aee_if3)
    return float(sum(a / w for a, w in zip(vals, weights)) / 4.0)


@dataclass
class SequenceResult:
    name: str
    aee: float
    outliers: float


def evaluate_sequence(name, samples, threshold=OUTLIER_THRESHOLD):
    """Pool endpoint errors over all samples of one sequence."""
    errs = np.concatenate([s.endpoint_errors() for s in samples])
    return SequenceResult(name, float(errs.mean()), float(100.0 * (errs > threshold).mean()))


def report(results, dt=1):
    """Summary dict; ``waee`` is present only for the four reference sequences."""
    by_name = {r.name: r for r in results}
    out = {"sequences": results, "mean_outliers": float(np.mean([r.outliers for r in results]))}
    if all(n in by_name for n in SEQUENCES):
        out["waee"] = waee(*(by_name[n].aee for n in SEQUENCES), weights=WAEE_WEIGHTS[dt])
    return out


def report_csv(rep):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sequence", "aee", "outlier_pct"])
    for r in rep["sequences"]:
        w.writerow([r.name, f"{r.aee:.4f}", f"{r.outliers:.2f}"])
    if "waee" in rep:
        w.writerow(["WAEE", f"{rep['waee']:.4f}", ""])
    w.writerow(["mean_outliers", "", f"{rep['mean_outliers']:.2f}"])
    return buf.getvalue()


def report_table(rep):
    rows = [(r.name, f"{r.aee:.3f}", f"{r.outliers:.2f}") for r in rep["sequences"]]
    width = max([len("sequence")] + [len(r[0]) for r in rows])
    lines = [f"{'sequence':<{width}}  {'AEE':>8}  {'%Out':>7}", "-" * (width + 19)]
    lines += [f"{a:<{width}}  {b:>8}  {c:>7}" for a, b, c in rows]
    lines.append("-" * (width + 19))
    if "waee" in rep:
        lines.append(f"{'WAEE':<{width}}  {rep['waee']:>8.3f}")
    lines.append(f"{'mean %Out':<{width}}  {'':>8}  {rep['mean_outliers']:>7.2f}")
    return "\n".join(lines)
