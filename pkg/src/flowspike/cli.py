"""Command-line entry point: ``flowspike <subcommand> ...``.

Exit codes: 0 success, 2 validation error (bad arguments, malformed input),
1 runtime failure. ``--config`` takes a JSON object whose keys set option
defaults by destination name; optional ``arch`` and ``train`` objects feed the
architecture and training configs.
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

from flowspike import checkpoint, metrics, profiling, viz
from flowspike import io as fio
from flowspike.encoding import DEFAULT_WINDOW_US, encode, slice_windows
from flowspike.errors import ConfigError
from flowspike.network import ArchConfig, build, param_count
from flowspike.runtime import thread_limit
from flowspike.synthetic import translating_windows
from flowspike.tensor import no_grad
from flowspike.training import TrainConfig, encode_for, train, write_log

log = logging.getLogger("flowspike")


class UsageError(Exception):
    """Raised by the parser instead of exiting, so main() controls the exit code."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p):
    p.add_argument("--config", help="JSON file with option defaults")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="BLAS thread cap (FLOWSPIKE_THREADS overrides)")
    p.add_argument("-v", "--verbose", action="store_true")


def _arch_opts(p, with_size=True):
    p.add_argument("--checkpoint", help="load the model from an SNUC checkpoint")
    p.add_argument("--stages", type=int, default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--neuron", choices=("SNU", "SNUo", "sSNU"), default=None)
    p.add_argument("--recurrency", choices=("RF", "FR", "RR", "FF"), default=None)
    p.add_argument("--encoding", choices=("voxel", "count"), default=None)
    p.add_argument("--bins", type=int, default=None, help="voxel time bins (network input channels)")
    p.add_argument("--multi-res", action="store_true", default=None)
    if with_size:
        p.add_argument("--width", type=int, default=None)
        p.add_argument("--height", type=int, default=None)


def _events_opts(p, required=False):
    p.add_argument("--events", required=required, help="EVT1 event file")
    p.add_argument("--window-us", type=int, default=DEFAULT_WINDOW_US)


def build_parser():
    parser = _Parser(prog="flowspike", description="Spiking optical-flow toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("encode", help="encode event windows to a .npy stack")
    _common(p)
    _events_opts(p, required=True)
    p.add_argument("--method", choices=("voxel", "count"), default="voxel")
    p.add_argument("--bins", type=int, default=6)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="self-supervised TBPTT training")
    _common(p)
    _arch_opts(p)
    _events_opts(p)
    p.add_argument("--synthetic", action="store_true", help="train on the translating-bar sequence")
    p.add_argument("--windows", type=int, default=40, help="synthetic sequence length")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--tbptt", type=int, default=None)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-chunk loss CSV")

    p = sub.add_parser("infer", help="predict flow for every window of an event file")
    _common(p)
    _arch_opts(p, with_size=False)
    _events_opts(p, required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("eval", help="AEE / outlier percentage / WAEE")
    _common(p)
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--events", help="EVT1 file defining the event mask")
    p.add_argument("--dt", type=int, choices=(1, 4), default=1)
    p.add_argument("--threshold", type=float, default=metrics.OUTLIER_THRESHOLD)
    p.add_argument("--waee", type=float, nargs=4, metavar=("OD1", "IF1", "IF2", "IF3"),
                   help="compute WAEE from four per-sequence AEEs")

    p = sub.add_parser("profile-activity", help="per-layer non-zero fractions as CSV")
    _common(p)
    _arch_opts(p)
    _events_opts(p)
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--windows", type=int, default=40)
    p.add_argument("--out", required=True)

    p = sub.add_parser("profile-speed", help="single-core forward latency")
    _common(p)
    _arch_opts(p, with_size=False)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--warmup", type=int, default=profiling.WARMUP_RUNS)

    p = sub.add_parser("sweep", help="stage/channel reduction table")
    _common(p)
    p.add_argument("--stages", type=int, nargs="+", default=[5, 3, 2])
    p.add_argument("--channels", type=int, nargs="+", default=[32, 24])
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--no-timing", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--scatter", help="plot data file (x,y,size,label)")

    p = sub.add_parser("viz", help="render a flow file as a color-wheel PNG")
    _common(p)
    p.add_argument("--flow", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--arrows", type=int, default=None, help="arrow grid cell size")
    p.add_argument("--max-magnitude", type=float, default=None)

    p = sub.add_parser("serve", help="TCP event-stream inference server")
    _common(p)
    _arch_opts(p)
    p.add_argument("--window-us", type=int, required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7878)
    parser.subcommands = sub.choices
    return parser


def _load_config(path):
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError("--config must hold a JSON object")
    return data


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    args.arch_overrides, args.train_overrides = {}, {}
    if args.config:
        data = _load_config(args.config)
        args.arch_overrides = dict(data.pop("arch", {}) or {})
        args.train_overrides = dict(data.pop("train", {}) or {})
        # explicit command-line values win over the file
        dests = {a.dest: a for a in parser.subcommands[args.command]._actions}
        unknown = sorted(k.replace("-", "_") for k in data if k.replace("-", "_") not in dests)
        if unknown:
            raise ConfigError(f"unknown config keys for '{args.command}': {unknown}")
        for key, value in data.items():
            dest = key.replace("-", "_")
            if getattr(args, dest) == dests[dest].default:
                setattr(args, dest, value)
    return args


def _arch_from_args(args):
    cfg = dict(args.arch_overrides)
    for opt, key in (("stages", "n_stages"), ("channels", "base_channels"), ("neuron", "neuron_kind"),
                     ("recurrency", "recurrency"), ("encoding", "encoding"), ("multi_res", "multi_res_loss")):
        val = getattr(args, opt, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "bins", None) is not None:
        cfg["n_in"] = args.bins
    if cfg.get("encoding") == "count":
        cfg.setdefault("n_in", 2)
    return ArchConfig.from_dict(cfg).validate()


def _model(args, width=None, height=None):
    if getattr(args, "checkpoint", None):
        model = checkpoint.load(args.checkpoint)
        if width is not None and (model.width, model.height) != (width, height):
            raise ConfigError(f"checkpoint model is {model.width}x{model.height}, events are {width}x{height}")
        return model
    width = getattr(args, "width", None) or width
    height = getattr(args, "height", None) or height
    if width is None or height is None:
        raise ConfigError("model size unknown: pass --width/--height, --events or --checkpoint")
    return build(_arch_from_args(args), height, width, seed=args.seed)


def _windows(args, model_hint=None):
    if getattr(args, "synthetic", False):
        w = getattr(args, "width", None) or 16
        h = getattr(args, "height", None) or 16
        windows, _ = translating_windows(w, h, n_windows=args.windows, window_us=args.window_us)
        return windows, w, h
    if not args.events:
        raise ConfigError("pass --events or --synthetic")
    events, w, h = fio.read_events(args.events)
    return slice_windows(events, args.window_us, w, h), w, h


def cmd_encode(args):
    events, w, h = fio.read_events(args.events)
    windows = slice_windows(events, args.window_us, w, h)
    stack = np.stack([encode(win, args.method, bins=args.bins).data for win in windows]) if windows \
        else np.zeros((0, 2 if args.method == "count" else args.bins, h, w), dtype=np.float32)
    np.save(args.out, stack)
    print(f"encoded {len(windows)} windows -> {args.out} {stack.shape}")


def cmd_train(args):
    windows, w, h = _windows(args)
    model = _model(args, w, h)
    tcfg = dict(args.train_overrides)
    for opt, key in (("epochs", "epochs"), ("lr", "learning_rate"), ("tbptt", "tbptt_interval")):
        if getattr(args, opt) is not None:
            tcfg[key] = getattr(args, opt)
    tcfg.setdefault("seed", args.seed)
    cfg = TrainConfig.from_dict(tcfg)

    def report(epoch, rows):
        print(f"epoch {epoch + 1}/{cfg.epochs}  mean chunk loss {np.mean([r['loss'] for r in rows]):.5f}")

    rows = train(model, windows, cfg, callback=report)
    checkpoint.save(model, args.out)
    if args.log:
        write_log(rows, args.log)
    print(f"saved {args.out} ({param_count(model)} parameters)")


def cmd_infer(args):
    events, w, h = fio.read_events(args.events)
    model = _model(args, w, h)
    windows = slice_windows(events, args.window_us, w, h)
    os.makedirs(args.out_dir, exist_ok=True)
    model.reset_states()
    with no_grad():
        for i, win in enumerate(windows):
            flow = model.forward(encode_for(model, win)).data
            fio.write_flow(os.path.join(args.out_dir, f"flow_{i:05d}.flo"), flow)
    print(f"wrote {len(windows)} flow files to {args.out_dir}")


def cmd_eval(args):
    if args.waee is not None:
        print(f"WAEE {metrics.waee(*args.waee, weights=metrics.WAEE_WEIGHTS[args.dt]):.4f}")
        if args.pred is None:
            return
    if not (args.pred and args.gt):
        raise ConfigError("eval needs --pred and --gt (or --waee)")
    pred, gt = fio.read_flow(args.pred), fio.read_flow(args.gt)
    mask = None
    if args.events:
        events, w, h = fio.read_events(args.events)
        if (h, w) != gt.shape[1:]:
            raise ConfigError("event sensor size does not match the flow files")
        mask = metrics.event_mask(events, w, h)
    sample = metrics.EvalSample(pred, gt, events=mask)
    print(f"AEE {metrics.aee(sample):.4f}")
    print(f"%Out {metrics.outlier_pct(sample, args.threshold):.2f}")


def cmd_profile_activity(args):
    windows, w, h = _windows(args)
    model = _model(args, w, h)
    trace = profiling.activity_trace(model, windows)
    trace.to_csv(args.out)
    means = trace.fractions.mean(axis=0)
    for name, m in zip(trace.layers, means):
        print(f"{name:>6}  {m:.4f}")


def cmd_profile_speed(args):
    if args.checkpoint:
        model = checkpoint.load(args.checkpoint)
    else:
        model = build(_arch_from_args(args), args.size, args.size, seed=args.seed)
    rep = profiling.speed_profile(model, args.size, n_runs=args.runs, warmup=args.warmup)
    print(f"params {param_count(model)}  fps {rep.fps:.2f}  mean {rep.mean * 1e3:.2f} ms  "
          f"median {rep.median * 1e3:.2f} ms  min {rep.min * 1e3:.2f} ms  cv {rep.cv:.3f}")
    if rep.unstable:
        log.warning("timing coefficient of variation %.2f exceeds %.2f", rep.cv, profiling.CV_LIMIT)


def cmd_sweep(args):
    base = ArchConfig.from_dict(args.arch_overrides) if args.arch_overrides else None
    rows = profiling.reduction_sweep(args.stages, args.channels, args.size, n_runs=args.runs,
                                     base_config=base, timing=not args.no_timing, seed=args.seed)
    profiling.write_sweep_csv(rows, args.out)
    if args.scatter:
        profiling.write_scatter(rows, args.scatter)
    for r in rows:
        print(f"{r['stages']} stages  {r['channels']:>3} ch  {r['params']:>10,d} params  fps {r['fps']:.2f}")


def cmd_viz(args):
    flow = fio.read_flow(args.flow)
    viz.render_flow(flow, args.out, args.max_magnitude if args.max_magnitude is not None else "auto",
                    arrows=args.arrows)
    print(f"wrote {args.out}")


def cmd_serve(args):
    from flowspike.server import EventServer

    model = _model(args)
    with EventServer((args.host, args.port), model, args.window_us) as srv:
        print(f"serving {model.width}x{model.height} flow on {args.host}:{srv.port}", flush=True)
        try:
            srv.serve_forever()
        except KeyboardInterrupt:
            pass


COMMANDS = {
    "encode": cmd_encode, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
    "profile-activity": cmd_profile_activity, "profile-speed": cmd_profile_speed,
    "sweep": cmd_sweep, "viz": cmd_viz, "serve": cmd_serve,
}


def main(argv=None):
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"flowspike: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with thread_limit(args.threads):
            COMMANDS[args.command](args)
    except ValueError as exc:
        print(f"flowspike: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"flowspike: runtime error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
