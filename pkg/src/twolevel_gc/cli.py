"""``t2lc``: command-line entry point.

Subcommands: gradcheck, verify, paramcount, simulate, train, compare.

Exit codes: 0 success, 1 failed check or runtime error, 2 usage error.
Every run prints a header of ``#`` lines with the package version, the seed and
the effective configuration (config file merged with flags).  Tables show
floats to 4 significant digits; CSV keeps full double precision.

A config file (``--config path``) holds flat ``key=value`` lines using the
flag names (``batch-size=64`` or ``batch_size=64``); flags on the command line win.
The environment variable ``T2LC_SEED`` sets the default seed.
"""

import argparse
import csv
import os
import sys
import time

import numpy as np

from . import __version__, autodiff, checks, dist_sim, model_zoo, train as trainer
from .conv_ops import GroupSpec, TwoLevelParams, two_level
from .errors import ConfigurationError, DivergenceError, IngestionError, ProtocolError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
PARAMCOUNT_ARCHS = ("wideresnet-28-10", "mobilenetv2", "toy")


class UsageError(Exception):
    pass


# -- formatting -------------------------------------------------------------------

def fmt_cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.4g}"
    return str(v)


def format_table(headers, rows):
    cells = [[str(h) for h in headers]] + [[fmt_cell(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.rjust(w) if j else c.ljust(w) for j, (c, w) in enumerate(zip(row, widths)))
             for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _csv_value(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def emit_csv(stream, fields, rows, header_lines=()):
    """Write ``#`` header lines, a header row, then one line per row (floats at full precision)."""
    for line in header_lines:
        stream.write(f"{line}\n")
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(fields)
    for row in rows:
        w.writerow([_csv_value(v) for v in row])


def _parse_value(text):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if text in ("True", "False"):
        return text == "True"
    return text


def parse_csv(text):
    """Inverse of :func:`emit_csv`: returns ``(header_lines, fields, rows)`` with typed values."""
    lines = text.splitlines()
    header = [ln for ln in lines if ln.startswith("#")]
    body = [ln for ln in lines if not ln.startswith("#")]
    reader = csv.reader(body)
    fields = next(reader, [])
    rows = [tuple(_parse_value(v) for v in row) for row in reader]
    return header, fields, rows


def read_csv(path):
    with open(path, newline="") as fh:
        return parse_csv(fh.read())


def _write_csv_file(path, fields, rows, header):
    with open(path, "w", newline="") as fh:
        emit_csv(fh, fields, rows, header)


# -- argument parsing ---------------------------------------------------------------

def default_seed():
    raw = os.environ.get("T2LC_SEED")
    if raw is None or raw == "":
        return 0
    try:
        seed = int(raw)
    except ValueError:
        raise UsageError(f"T2LC_SEED must be a non-negative integer, got {raw!r}") from None
    if seed < 0:
        raise UsageError(f"T2LC_SEED must be a non-negative integer, got {raw!r}")
    return seed


def _seed(text):
    v = int(text)
    if v < 0 or v >= 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be a u64, got {text}")
    return v


def _pos_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _pos_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _nonneg_float(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return v


def _int_list(text):
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError(f"expected comma-separated non-negative integers, got {text!r}")
    return vals


def _name_list(text):
    vals = [t.strip() for t in text.split(",") if t.strip()]
    bad = [v for v in vals if v not in model_zoo.VARIANTS]
    if not vals or bad:
        raise argparse.ArgumentTypeError(f"variants must come from {model_zoo.VARIANTS}, got {text!r}")
    return vals


def _lr_drops(text):
    """``"60:0.1,120:0.1"`` -> ((60, 0.1), (120, 0.1)); empty string means no drops."""
    out = []
    for item in filter(None, (t.strip() for t in text.split(","))):
        try:
            epoch, mult = item.split(":")
            out.append((int(epoch), float(mult)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"lr drops look like 60:0.1,120:0.1, got {text!r}") from None
    return tuple(out)


def _data_source(text):
    if text == "synth" or text.startswith("cifar10:"):
        return text
    raise argparse.ArgumentTypeError(f"--data takes synth or cifar10:<dir>, got {text!r}")


def _common(p, seed=True, fmt=True):
    p.add_argument("--config", metavar="PATH", help="key=value file; command-line flags override it")
    if seed:
        p.add_argument("--seed", type=_seed, default=None, help="RNG seed (default: $T2LC_SEED or 0)")
    if fmt:
        p.add_argument("--format", choices=("table", "csv"), default="table", help="stdout format")


def build_parser():
    parser = argparse.ArgumentParser(prog="t2lc", description="Two-level group convolution toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gradcheck", help="finite-difference check of one operator's gradients")
    p.add_argument("--op", required=True, choices=sorted(autodiff.OPS))
    p.add_argument("--h", type=_pos_float, default=1e-6, help="central-difference step")
    p.add_argument("--tol", type=_pos_float, default=checks.GRAD_TOL, help="pass threshold")
    for flag in ("n", "m", "groups", "d", "hw"):
        p.add_argument(f"--{flag}", type=_pos_int, default=None, help="override the sample shape")
    _common(p)

    p = sub.add_parser("verify", help="run property suites")
    p.add_argument("--suite", choices=checks.SUITES + ("all",), default="all")
    _common(p)

    p = sub.add_parser("paramcount", help="parameter accounting for a network")
    p.add_argument("--arch", default="wideresnet-28-10",
                   help=f"one of {', '.join(PARAMCOUNT_ARCHS)} (or wideresnet-L-W)")
    p.add_argument("--variant", choices=model_zoo.VARIANTS, default="sc")
    p.add_argument("--groups", type=_pos_int, default=1)
    p.add_argument("--d0", type=_pos_int, default=None, help="coarse restriction kernel size (default d)")
    p.add_argument("--per-layer", action="store_true", help="one row per layer and role")
    _common(p, seed=False)

    p = sub.add_parser("simulate", help="run one two-level layer on simulated workers")
    p.add_argument("--n", type=_pos_int, default=8)
    p.add_argument("--m", type=_pos_int, default=12)
    p.add_argument("--groups", type=_pos_int, default=4)
    p.add_argument("--d", type=_pos_int, default=3)
    p.add_argument("--hw", type=_pos_int, default=5)
    p.add_argument("--batch", type=_pos_int, default=1)
    p.add_argument("--backward", action="store_true", help="also run the backward pass")
    p.add_argument("--trace", action="store_true", help="print one line per message")
    _common(p)

    def training_flags(p):
        p.add_argument("--depth", type=_pos_int, default=3, help="number of variant conv layers")
        p.add_argument("--width", type=_pos_int, default=16)
        p.add_argument("--epochs", type=_nonneg_int, default=trainer.DESK_HYPER["epochs"])
        p.add_argument("--lr", type=_nonneg_float, default=trainer.DESK_HYPER["lr"])
        p.add_argument("--lr-drops", type=_lr_drops, default=(), help="e.g. 60:0.1,120:0.1")
        p.add_argument("--batch-size", type=_pos_int, default=128)
        p.add_argument("--momentum", type=_nonneg_float, default=0.9)
        p.add_argument("--weight-decay", type=_nonneg_float, default=5e-4)
        p.add_argument("--coarse-init", choices=trainer.COARSE_INITS, default=trainer.DESK_COARSE_INIT,
                       help="initialization of the coarse mixing weights")
        p.add_argument("--data", type=_data_source, default="synth", help="synth or cifar10:<dir>")
        p.add_argument("--normalize", action="store_true", help="per-channel CIFAR normalization")
        p.add_argument("--augment", action="store_true", help="CIFAR pad-4 random crop + flip")
        p.add_argument("--out", metavar="CSV", default=None)

    p = sub.add_parser("train", help="train a toy network, write per-epoch history")
    p.add_argument("--arch", choices=("toy",), default="toy")
    p.add_argument("--variant", choices=model_zoo.VARIANTS, default="gc2l")
    p.add_argument("--groups", type=_pos_int, default=4)
    p.add_argument("--distributed", action="store_true", help="run grouped layers on simulated workers")
    training_flags(p)
    _common(p)

    p = sub.add_parser("compare", help="train every variant at several group counts and seeds")
    p.add_argument("--groups", type=_int_list, default=[1, 2, 4, 8], help="comma-separated N values")
    p.add_argument("--seeds", type=_int_list, default=[1, 2, 3], help="comma-separated, at least 3")
    p.add_argument("--variants", type=_name_list, default=list(model_zoo.VARIANTS))
    training_flags(p)
    _common(p, seed=False)
    return parser, sub.choices


def _apply_config(subparser, path):
    """Read a key=value file into ``subparser`` defaults, converting values like the flags do."""
    actions = {a.dest: a for a in subparser._actions if a.dest not in ("help", "config")}
    try:
        lines = open(path).read().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    values = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, val = (t.strip() for t in line.split("=", 1))
        dest = key.lstrip("-").replace("-", "_")
        action = actions.get(dest)
        if action is None:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        if action.nargs == 0:   # store_true
            if val.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"{path}:{lineno}: {key} takes true/false, got {val!r}")
            values[dest] = val.lower() in ("true", "1", "yes")
            continue
        try:
            converted = action.type(val) if action.type else val
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
        if action.choices is not None and converted not in action.choices:
            raise UsageError(f"{path}:{lineno}: {key} must be one of {sorted(action.choices)}")
        values[dest] = converted
    missing_required = [a for a in subparser._actions if a.required]
    for a in missing_required:
        if a.dest in values:
            a.required = False
    subparser.set_defaults(**values)


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv):
    parser, subparsers = build_parser()
    if not argv:
        raise UsageError(parser.format_usage().strip())
    cfg_path = _config_path(argv)
    if cfg_path is not None and argv[0] in subparsers:
        _apply_config(subparsers[argv[0]], cfg_path)
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError(parser.format_usage().strip())
    if hasattr(args, "seed") and args.seed is None:
        args.seed = default_seed()
    return args


def header_lines(args):
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "command"}
    cfg_text = " ".join(f"{k}={_cfg_repr(v)}" for k, v in cfg.items())
    seed = getattr(args, "seed", None)
    if seed is None and hasattr(args, "seeds"):
        seed = ",".join(map(str, args.seeds))
    return [f"# t2lc {__version__} {args.command}", f"# seed: {seed if seed is not None else 'n/a'}",
            f"# config: {cfg_text}"]


def _cfg_repr(v):
    if isinstance(v, (list, tuple)):
        return ",".join(":".join(map(str, x)) if isinstance(x, tuple) else str(x) for x in v)
    return str(v)


def _emit(args, fields, rows, out=sys.stdout, with_header=True):
    if with_header:
        out.write("\n".join(header_lines(args)) + "\n")
    if args.format == "csv":
        emit_csv(out, fields, rows)
    else:
        out.write(format_table(fields, rows) + "\n")


# -- subcommands ------------------------------------------------------------------

def cmd_gradcheck(args, out):
    cfg = {k: getattr(args, k) for k in ("n", "m", "groups", "d", "hw") if getattr(args, k) is not None}
    sample, spec = autodiff.sample_args(args.op, args.seed, **cfg)
    rep = autodiff.finite_diff_report(args.op, sample, spec, seed=args.seed, h=args.h)
    passed = rep.max_rel_error < args.tol
    where = f"{rep.worst_key}{list(rep.worst_index)}"
    _emit(args, ["op", "max_rel_error", "worst_coordinate", "coordinates", "threshold", "status"],
          [(args.op, rep.max_rel_error, where, rep.coordinates, args.tol, "PASS" if passed else "FAIL")], out)
    return EXIT_OK if passed else EXIT_FAIL


def cmd_verify(args, out):
    results = checks.run_suite(args.suite, args.seed)
    rows = [(r.name, r.metric, r.threshold, "PASS" if r.passed else "FAIL") for r in results]
    _emit(args, ["check", "metric", "threshold", "status"], rows, out)
    failed = [r for r in results if not r.passed]
    if failed:
        f = failed[0]
        out.write(f"FAILED {f.name}: metric {f.metric!r} exceeds threshold {f.threshold!r}"
                  f" ({len(failed)} of {len(results)} checks failed)\n")
        return EXIT_FAIL
    out.write(f"all {len(results)} checks passed\n")
    return EXIT_OK


def _millions(v):
    return f"{v / 1e6:.4g}M"


def cmd_paramcount(args, out):
    arch = model_zoo.preset(args.arch)
    if args.d0 is not None:
        arch = model_zoo.ArchSpec(arch.name, arch.layers, arch.variant, arch.groups, args.d0)
    pc = model_zoo.model_param_count(arch, args.variant, args.groups)
    fields = ["layer", "role", "total", "per_processor", "per_worker"]
    rows = [(r.layer, r.role, r.total, r.per_processor, r.per_worker) for r in pc.rows] if args.per_layer else []
    rows.append(("TOTAL", "all", pc.total, pc.per_processor, pc.per_worker))
    _emit(args, fields, rows, out)
    if args.format == "table":
        out.write(f"{pc.arch} {pc.variant} N={pc.groups}: total {_millions(pc.total)}, "
                  f"per processor {_millions(pc.per_processor)}, per worker {_millions(pc.per_worker)}\n")
    return EXIT_OK


def cmd_simulate(args, out):
    spec = GroupSpec(args.n, args.m, args.groups, args.d)
    rng = np.random.default_rng(args.seed)
    params = TwoLevelParams.random(spec, rng)
    x = rng.standard_normal((args.batch, args.n, args.hw, args.hw))
    cluster = dist_sim.Cluster(spec, params)
    y, report = cluster.forward(x)
    trace = list(cluster.router.trace)
    err = checks.rel_error(y, two_level(x, spec, params))
    if args.backward:
        _, _, bwd = cluster.backward(rng.standard_normal(y.shape))
        trace += cluster.backward_router.trace
        report = report.merged(bwd)
    N = spec.groups
    rows = [
        ("messages", report.messages),
        ("activation_scalars", report.activation_scalars),
        ("activation_scalars_per_sample", report.activation_scalars_per_sample),
        ("bytes", 8 * report.activation_scalars),
        ("parameter_scalars", report.parameter_scalars),
        ("expected_forward_messages", N * (N - 1)),
        ("expected_forward_scalars_per_sample", N * (N - 1) * args.hw * args.hw),
        ("max_rel_error_vs_serial", err),
    ]
    rows += [(f"phase:{name}:messages", s["messages"]) for name, s in sorted(report.phases.items())]
    rows += [(f"phase:{name}:scalars", s["scalars"]) for name, s in sorted(report.phases.items())]
    _emit(args, ["metric", "value"], rows, out)
    if args.trace:
        out.write("# trace: phase sender receiver kind scalars\n")
        for msg in trace:
            out.write(msg.log_line() + "\n")
    return EXIT_OK if report.parameter_scalars == 0 and err <= checks.ALGEBRA_TOL else EXIT_FAIL


def _hyper(args, seed):
    return trainer.Hyper(batch_size=args.batch_size, weight_decay=args.weight_decay, momentum=args.momentum,
                         epochs=args.epochs, lr=args.lr, lr_drops=tuple(args.lr_drops), seed=seed)


def _dataset_factory(args):
    if args.data == "synth":
        return trainer.desk_dataset
    data = trainer.load_cifar10(args.data.split(":", 1)[1], normalize=args.normalize, augment=args.augment)
    return lambda seed: data


def cmd_train(args, out):
    hyper = _hyper(args, args.seed)
    data = _dataset_factory(args)(args.seed)
    arch = model_zoo.build_toy_arch(args.depth, args.width, args.variant,
                                    1 if args.variant == "sc" else args.groups,
                                    in_channels=data.x_train.shape[1], classes=data.classes)
    hist = trainer.train(arch, data, hyper, distributed=args.distributed, coarse_init=args.coarse_init)
    fields = list(trainer.HISTORY_FIELDS)
    rows = [tuple(getattr(r, f) for f in fields) for r in hist.records]
    header = header_lines(args) + [f"# initial_train_loss: {hist.initial_loss!r}"]
    if args.out:
        _write_csv_file(args.out, fields, rows, header)
    out.write("\n".join(header) + "\n")
    if args.format == "csv":
        emit_csv(out, fields, rows)
    else:
        out.write(format_table(fields, rows) + "\n")
    if hist.comm is not None:
        out.write(f"# comm: messages={hist.comm.messages} activation_scalars={hist.comm.activation_scalars} "
                  f"parameter_scalars={hist.comm.parameter_scalars}\n")
    return EXIT_OK


def cmd_compare(args, out):
    hyper = _hyper(args, 0)
    t0 = time.perf_counter()
    rows = trainer.compare_variants(_dataset_factory(args), hyper, args.seeds, args.groups,
                                    variants=tuple(args.variants), depth=args.depth, width=args.width,
                                    coarse_init=args.coarse_init)
    fields = ["variant", "groups", "seed", "final_train_loss", "test_acc", "status"]
    data = [(r.variant, r.groups, r.seed, r.final_train_loss, r.test_acc, r.status) for r in rows]
    header = header_lines(args)
    if args.out:
        _write_csv_file(args.out, fields, data, header)
    summary = trainer.summarize(rows)
    srows = [(v, N, loss, acc, k) for (v, N), (loss, acc, k) in sorted(summary.items(), key=lambda kv: (kv[0][1],
             model_zoo.VARIANTS.index(kv[0][0])))]
    _emit(args, ["variant", "groups", "mean_final_train_loss", "mean_test_acc", "runs"], srows, out)
    out.write(f"# wall time: {time.perf_counter() - t0:.4g} s\n")
    failed = [r for r in rows if r.status != "ok"]
    for r in failed:
        out.write(f"# {r.variant} N={r.groups} seed={r.seed}: {r.status}\n")
    return EXIT_OK


COMMANDS = {"gradcheck": cmd_gradcheck, "verify": cmd_verify, "paramcount": cmd_paramcount,
            "simulate": cmd_simulate, "train": cmd_train, "compare": cmd_compare}


def main(argv=None, out=None, err=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = parse_args(argv)
    except UsageError as exc:
        err.write(f"t2lc: {exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:   # argparse: --help exits 0, bad flags exit 2
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return COMMANDS[args.command](args, out)
    except ConfigurationError as exc:
        err.write(f"t2lc {args.command}: configuration error: {exc}\n")
        return EXIT_USAGE
    except (DivergenceError, IngestionError, ProtocolError) as exc:
        err.write(f"t2lc {args.command}: {type(exc).__name__}: {exc}\n")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
