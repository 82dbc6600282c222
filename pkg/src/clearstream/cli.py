"""Command-line entry point.

Subcommands: enhance, degrade, train, evaluate, bench, flops.  Results go
to stdout as stable key=value lines; diagnostics go to stderr.  Exit codes:
0 success, 1 usage, 2 checkpoint mismatch, 3 missing/invalid data,
4 pairing error.

Every option can also come from a plain key=value config file passed with
--config; explicit flags override file values, and unknown keys in the
file are rejected.
"""

import argparse
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio
from .degrade import degrade_clip, sample_spec, serialize_spec
from .errors import (CheckpointMismatchError, ClearstreamError, ConfigError,
                     DataError, MetricError, PairingError, ShapeError,
                     SpecRangeError, StreamError, UsageError)
from .metrics import bench_latency, evaluate
from .model import build, count_flops, count_params, preset
from .runtime import (TrainConfig, adam_init, enhance_stream, lr_at,
                      run_training)

PRESETS = ("S", "M", "L", "tiny")
BOOTSTRAPS = ("passthrough", "ground_truth")
FRAME_FORMATS = ("ppm", "rbt")


# ---------------------------------------------------------------------------
# option plumbing
# ---------------------------------------------------------------------------

def _u64(text):
    value = int(text)
    if not (0 <= value < 2 ** 64):
        raise ValueError(f"seed {value} outside the unsigned 64-bit range")
    return value


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise ValueError(f"expected a positive integer, got {value}")
    return value


def _non_negative_int(text):
    value = int(text)
    if value < 0:
        raise ValueError(f"expected a non-negative integer, got {value}")
    return value


def _positive_float(text):
    value = float(text)
    if value <= 0:
        raise ValueError(f"expected a positive number, got {value}")
    return value


def _non_negative_float(text):
    value = float(text)
    if value < 0:
        raise ValueError(f"expected a non-negative number, got {value}")
    return value


def _resolution(text):
    parts = str(text).lower().split("x")
    if len(parts) != 2:
        raise ValueError(f"resolution must look like 384x384, got {text!r}")
    h, w = (int(p) for p in parts)
    if h < 1 or w < 1:
        raise ValueError(f"resolution must be positive, got {text!r}")
    return (h, w)


def _bool(text):
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _choice(options):
    def convert(text):
        if text not in options:
            raise ValueError(f"{text!r} is not one of {', '.join(options)}")
        return text

    return convert


@dataclass
class Opt:
    name: str               # config-file key and argparse dest
    conv: callable          # string -> typed value (for flags and file)
    default: object = None
    required: bool = False
    flag: bool = False      # boolean switch (no argument on the CLI)
    help: str = ""


GLOBAL_OPTS = [
    Opt("config", str, help="key=value config file; flags override it"),
    Opt("seed", _u64, default=0, help="seed for all randomness"),
    Opt("preset", _choice(PRESETS), default="S",
        help="model size preset (S, M, L, tiny)"),
    Opt("resolution", _resolution, default=(384, 384),
        help="frame resolution as HxW"),
]

COMMAND_OPTS = {
    "enhance": [
        Opt("in_dir", str, required=True, help="input clip directory"),
        Opt("out_dir", str, required=True, help="output clip directory"),
        Opt("checkpoint", str, required=True, help="RBCK checkpoint to load"),
        Opt("bootstrap", _choice(BOOTSTRAPS), default="passthrough",
            help="first-frame recurrence input"),
        Opt("reference", str,
            help="reference frame file for ground_truth bootstrap"),
        Opt("format", _choice(FRAME_FORMATS), default="ppm",
            help="output frame format"),
    ],
    "degrade": [
        Opt("in_dir", str, required=True, help="clean clip directory"),
        Opt("out_dir", str, required=True, help="degraded clip directory"),
        Opt("format", _choice(FRAME_FORMATS), default="ppm",
            help="output frame format"),
    ],
    "train": [
        Opt("data", str, required=True,
            help="root with clean/ and degraded/ clip directories"),
        Opt("out", str, required=True, help="checkpoint output path"),
        Opt("steps", _non_negative_int, default=200,
            help="optimization steps to run"),
        Opt("resume", str, help="checkpoint to continue from"),
        Opt("log", str, help="loss log path (default: <out>.log)"),
        Opt("checkpoint_every", _non_negative_int, default=0,
            help="also write the checkpoint every K steps"),
        Opt("lr0", _positive_float, default=4e-4,
            help="initial learning rate"),
        Opt("lr_min", _positive_float, default=1e-7,
            help="final learning rate"),
        Opt("total_steps", _positive_int,
            help="cosine schedule horizon (default: the run length)"),
        Opt("bptt_window", _positive_int,
            help="truncate gradients after this many frames"),
        Opt("detach_recurrent", _bool, flag=True, default=False,
            help="cut gradients through the feedback frame"),
        Opt("grad_clip", _non_negative_float, default=0.0,
            help="global gradient-norm clip (0 disables)"),
        Opt("no_plot", _bool, flag=True, default=False,
            help="skip the training-curve figure"),
    ],
    "evaluate": [
        Opt("degraded", str, required=True,
            help="degraded clip directory (or directory of clips)"),
        Opt("clean", str, required=True,
            help="clean clip directory (or directory of clips)"),
        Opt("checkpoint", str, help="RBCK checkpoint to load"),
        Opt("identity", _bool, flag=True, default=False,
            help="score the degraded clips directly (no model)"),
        Opt("bootstrap", _choice(BOOTSTRAPS), default="ground_truth",
            help="first-frame recurrence input"),
        Opt("plot_out", str, default="eval_report.png",
            help="where to render the report figure"),
        Opt("no_plot", _bool, flag=True, default=False,
            help="skip the report figure"),
    ],
    "bench": [
        Opt("warmup", _non_negative_int, default=10,
            help="untimed forward passes before measuring"),
        Opt("reps", _positive_int, default=1000,
            help="timed forward passes"),
    ],
    "flops": [
        Opt("frames", _positive_int, default=2,
            help="frames entering the network per step"),
    ],
}


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags, which collides with the
    # checkpoint-mismatch code; route everything through UsageError instead
    def error(self, message):
        raise UsageError(message)


def _flag_text(name):
    return "--" + name.replace("_", "-")


def _add_opts(parser, opts):
    for opt in opts:
        if opt.flag:
            parser.add_argument(_flag_text(opt.name), dest=opt.name,
                                action="store_const", const=True,
                                default=None, help=opt.help)
        else:
            parser.add_argument(_flag_text(opt.name), dest=opt.name,
                                type=str, default=None, help=opt.help)


def build_parser():
    parser = _Parser(prog="clearstream",
                     description="video enhancement engine")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for command, opts in COMMAND_OPTS.items():
        p = sub.add_parser(command, help=f"run {command}")
        _add_opts(p, GLOBAL_OPTS)
        _add_opts(p, opts)
    return parser


def _read_config_file(path, allowed):
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise UsageError(f"cannot read config file {path}: {err}") from None
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise UsageError(
                f"{path}:{lineno}: expected key=value, got {raw!r}")
        if key not in allowed:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise UsageError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = val.strip()
    return values


def _resolve_options(args, opts):
    """Layer defaults <- config file <- explicit flags, then typecheck."""
    by_name = {opt.name: opt for opt in opts}
    file_values = {}
    if args.config is not None:
        file_values = _read_config_file(args.config,
                                        set(by_name) - {"config"})
    resolved = argparse.Namespace()
    for opt in opts:
        raw = getattr(args, opt.name)
        try:
            if raw is not None:
                value = raw if opt.flag else opt.conv(raw)
            elif opt.name in file_values:
                value = opt.conv(file_values[opt.name])
            else:
                value = opt.default
        except ValueError as err:
            raise UsageError(f"bad value for {_flag_text(opt.name)}: {err}") \
                from None
        if value is None and opt.required:
            raise UsageError(f"{_flag_text(opt.name)} is required")
        setattr(resolved, opt.name, value)
    return resolved


def _emit(**pairs):
    for key, value in pairs.items():
        print(f"{key}={value}")


# ---------------------------------------------------------------------------
# shared command helpers
# ---------------------------------------------------------------------------

def _build_model(ns):
    cfg = preset(ns.preset, resolution=ns.resolution)
    return build(cfg, seed=ns.seed)


def _load_reference(path):
    p = Path(path)
    if p.suffix == ".rbt":
        arr = fileio.read_rbt(p)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise DataError(f"{path}: reference tensor is {arr.shape}, "
                            "expected [3,H,W]")
        return arr.astype(np.float32, copy=False)
    return fileio.read_ppm(p)


def _clip_set(root):
    """A path is either one clip directory or a directory of them."""
    base = Path(root)
    if not base.is_dir():
        raise DataError(f"{root}: no such directory")
    if (base / fileio.META_NAME).is_file():
        return [base]
    dirs = sorted(d for d in base.iterdir()
                  if d.is_dir() and (d / fileio.META_NAME).is_file())
    if not dirs:
        raise DataError(f"{root}: contains no clip directories")
    return dirs


def _paired_clip_dirs(data_root):
    root = Path(data_root)
    clean_root = root / "clean"
    degraded_root = root / "degraded"
    if not clean_root.is_dir() or not degraded_root.is_dir():
        raise DataError(
            f"{data_root}: expected clean/ and degraded/ subdirectories")
    clean = {d.name: d for d in _clip_set(clean_root)}
    degraded = {d.name: d for d in _clip_set(degraded_root)}
    if set(clean) != set(degraded):
        only_clean = sorted(set(clean) - set(degraded))
        only_degraded = sorted(set(degraded) - set(clean))
        raise PairingError(
            f"unpaired clips under {data_root}: clean-only {only_clean}, "
            f"degraded-only {only_degraded}")
    names = sorted(clean)
    return [(degraded[n], clean[n]) for n in names]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_enhance(ns):
    model = _build_model(ns)
    fileio.load_checkpoint(ns.checkpoint, model)
    clip = fileio.read_clip(ns.in_dir)
    reference = None
    if ns.bootstrap == "ground_truth":
        if ns.reference is None:
            raise UsageError(
                "--reference is required with --bootstrap ground_truth")
        reference = _load_reference(ns.reference)
    out = Path(ns.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    count = 0
    for i, frame in enumerate(enhance_stream(model, clip.frames,
                                             bootstrap=ns.bootstrap,
                                             reference=reference)):
        path = out / f"{i:06d}.{ns.format}"
        if ns.format == "ppm":
            fileio.write_ppm(path, frame)
        else:
            fileio.write_rbt(path, frame.astype(np.float32, copy=False))
        count += 1
    elapsed = time.perf_counter() - t0
    (out / fileio.META_NAME).write_text(
        f"fps={clip.fps!r}\nframes={count}\nformat={ns.format}\n")
    _emit(frames=count, total_s=f"{elapsed:.3f}",
          mean_ms=f"{elapsed / count * 1000:.3f}", out=out)
    return 0


def cmd_degrade(ns):
    clip = fileio.read_clip(ns.in_dir)
    spec = sample_spec(ns.seed)
    degraded = degrade_clip(clip, spec)
    out = Path(ns.out_dir)
    fileio.write_clip(out, degraded, fmt=ns.format)
    spec_path = out / "degradation.spec"
    spec_path.write_text(serialize_spec(spec))
    _emit(frames=len(degraded.frames), stage_mask=spec.stage_mask,
          spec=spec_path, out=out)
    return 0


def cmd_train(ns):
    model = _build_model(ns)
    opt_state = None
    if ns.resume is not None:
        opt_state = fileio.load_checkpoint(ns.resume, model)
    if opt_state is None:
        opt_state = adam_init(model)
    pairs = [(fileio.read_clip(d), fileio.read_clip(c))
             for d, c in _paired_clip_dirs(ns.data)]
    for degraded, clean in pairs:
        if len(degraded.frames) != len(clean.frames):
            raise PairingError("paired clips have different lengths")

    cfg = TrainConfig(lr0=ns.lr0, lr_min=ns.lr_min,
                      total_steps=ns.total_steps or max(ns.steps, 1),
                      bptt_window=ns.bptt_window,
                      detach_recurrent=ns.detach_recurrent,
                      grad_clip=ns.grad_clip).validate()

    out = Path(ns.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(ns.log) if ns.log is not None else \
        out.with_suffix(out.suffix + ".log")

    if ns.steps == 0:
        fileio.save_checkpoint(out, model, opt_state)
        _emit(steps=0, checkpoint=out)
        return 0

    losses = []
    with open(log_path, "a") as log:
        losses, opt_state = run_training(
            model, pairs, cfg, ns.steps, opt_state=opt_state,
            rng=np.random.default_rng(ns.seed), log=log,
            checkpoint_every=ns.checkpoint_every,
            on_checkpoint=lambda step: fileio.save_checkpoint(
                out, model, opt_state))
    fileio.save_checkpoint(out, model, opt_state)
    plot_path = None
    if not ns.no_plot:
        from .plots import save_training_curve
        first = opt_state.step - len(losses) + 1
        steps = list(range(first, opt_state.step + 1))
        lrs = [lr_at(min(s - 1, cfg.total_steps), cfg) for s in steps]
        plot_path = save_training_curve(
            steps, lrs, losses, log_path.with_suffix(".png"))
    _emit(steps=len(losses), step=opt_state.step,
          first_loss=f"{losses[0]:.6f}", final_loss=f"{losses[-1]:.6f}",
          checkpoint=out, log=log_path)
    if plot_path is not None:
        _emit(plot=plot_path)
    return 0


def cmd_evaluate(ns):
    degraded_dirs = _clip_set(ns.degraded)
    clean_dirs = _clip_set(ns.clean)
    if len(degraded_dirs) > 1 or len(clean_dirs) > 1:
        deg_names = [d.name for d in degraded_dirs]
        clean_names = [d.name for d in clean_dirs]
        if deg_names != clean_names:
            raise PairingError(
                f"clip sets differ: degraded {deg_names} vs "
                f"clean {clean_names}")
    degraded = [fileio.read_clip(d) for d in degraded_dirs]
    clean = [fileio.read_clip(d) for d in clean_dirs]

    if ns.identity:
        class _Identity:
            def forward(self, y_prev, x_cur, clamp=False):
                return x_cur

        model = _Identity()
    else:
        if ns.checkpoint is None:
            raise UsageError("pass --checkpoint, or --identity for a "
                             "model-free score")
        model = _build_model(ns)
        fileio.load_checkpoint(ns.checkpoint, model)

    report = evaluate(model, degraded, clean, bootstrap=ns.bootstrap)
    sys.stdout.write(report.to_kv())
    if not ns.no_plot:
        from .plots import save_eval_figure
        _emit(plot=save_eval_figure(report, ns.plot_out))
    return 0


def cmd_bench(ns):
    model = _build_model(ns)
    result = bench_latency(model, warmup=ns.warmup, reps=ns.reps)
    _emit(preset=ns.preset,
          resolution=f"{ns.resolution[0]}x{ns.resolution[1]}",
          warmup=ns.warmup, reps=ns.reps,
          latency_ms=f"{result.latency_ms:.6f}",
          fps=f"{result.fps:.6f}", peak_mem=result.peak_mem_bytes)
    return 0


def cmd_flops(ns):
    cfg = preset(ns.preset, resolution=ns.resolution)
    flops = count_flops(cfg, frames=ns.frames)
    params = count_params(build(cfg, seed=ns.seed))
    _emit(preset=ns.preset,
          resolution=f"{ns.resolution[0]}x{ns.resolution[1]}",
          frames=ns.frames, flops=flops, params=params,
          gflops=f"{flops / 1e9:.3f}", params_m=f"{params / 1e6:.3f}")
    return 0


_HANDLERS = {
    "enhance": cmd_enhance,
    "degrade": cmd_degrade,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "flops": cmd_flops,
}

_EXIT_CODES = (
    ((UsageError, ConfigError, SpecRangeError), 1),
    ((CheckpointMismatchError,), 2),
    ((DataError, StreamError, MetricError, ShapeError), 3),
    ((PairingError,), 4),
)


def main(argv=None):
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exit_request:  # --help
            return int(exit_request.code or 0)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("a command is required")
        ns = _resolve_options(args, GLOBAL_OPTS + COMMAND_OPTS[args.command])
        return _HANDLERS[args.command](ns)
    except ClearstreamError as err:
        for classes, code in _EXIT_CODES:
            if isinstance(err, classes):
                print(f"error: {err}", file=sys.stderr)
                return code
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
