"""Command-line interface: ``fimpute <command> [options]``.

Exit codes: 0 success, 2 invalid input or configuration, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import collections
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

logger = logging.getLogger("fimpute")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3


class ValidationError(ValueError):
    pass


# ---------------------------------------------------------------- parser

def _add_net_flags(p):
    g = p.add_argument_group("network size")
    g.add_argument("--embed-dim", type=int, default=32, help="time-embedding width (default: %(default)s)")
    g.add_argument("--ffn-layers", type=int, default=2, help="hidden layers per FFN (default: %(default)s)")
    g.add_argument("--ffn-width", type=int, default=64, help="FFN hidden width (default: %(default)s)")
    g.add_argument("--seq-hidden", type=int, default=32, help="LSTM hidden size per direction (default: %(default)s)")
    g.add_argument("--attn-layers", type=int, default=2, help="attention blocks (default: %(default)s)")
    g.add_argument("--attn-heads", type=int, default=2, help="attention heads (default: %(default)s)")
    g.add_argument("--attn-dim", type=int, default=32, help="attention width (default: %(default)s)")
    g.add_argument("--dropout", type=float, default=0.1, help="dropout rate (default: %(default)s)")


def _add_window_flags(p):
    p.add_argument("--windows", type=int, default=1,
                   help="split each channel into this many overlapping windows (default: %(default)s)")
    p.add_argument("--window-obs", type=int, default=None,
                   help="alternatively, observations per window (default: %(default)s)")


def _add_common_flags(p, default):
    p.add_argument("--threads", type=int, default=default,
                   help="torch intra-op threads; env FIM_THREADS (default: torch default)")
    p.add_argument("--config", default=default, help="JSON config file; flags take precedence")
    p.add_argument("-v", "--verbose", action="count", default=0 if default is None else default,
                   help="more logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fimpute", description=__doc__.splitlines()[0])
    _add_common_flags(parser, None)
    # the same flags are accepted after the command name
    common = argparse.ArgumentParser(add_help=False)
    _add_common_flags(common, argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_parser = sub.add_parser
    sub.add_parser = lambda *a, **kw: _add_parser(*a, parents=[common], **kw)

    p = sub.add_parser("generate", help="sample a synthetic training dataset")
    p.add_argument("--kind", choices=["pointwise", "temporal"], default="pointwise",
                   help="missing-data pattern (default: %(default)s)")
    p.add_argument("--n", type=int, default=4096, help="number of records (default: %(default)s)")
    p.add_argument("--seed", type=int, default=None, help="base seed (required)")
    p.add_argument("--noise-lambda", type=float, default=None,
                   help="noise-level scale; default 0.1 point-wise, 0.05 temporal")
    p.add_argument("--family-mix", type=float, nargs=3, default=None,
                   metavar=("CHEB", "RBF", "PER"),
                   help="family probabilities (default: 0.5 0.5 0 point-wise, 0 0 1 temporal)")
    p.add_argument("--format", choices=["jsonl", "fimd"], default=None,
                   help="output format; inferred from the extension otherwise")
    p.add_argument("--out", default=None, help="output dataset path (required)")

    p = sub.add_parser("train", help="train a recognition model")
    p.add_argument("--stage", choices=["local", "gap", "finetune"], default="local",
                   help="training stage (default: %(default)s)")
    p.add_argument("--data", default=None, help="dataset (generate output) or, for finetune, a series file")
    p.add_argument("--weights", default=None, help="pretrained local weights (gap/finetune)")
    p.add_argument("--out", default=None, help="output FIMW weight file (required)")
    p.add_argument("--metrics", default=None, help="metrics CSV (default: <out>.metrics.csv)")
    p.add_argument("--epochs", type=int, default=2000, help="epochs (default: %(default)s)")
    p.add_argument("--lr", type=float, default=1e-3, help="(initial) learning rate (default: %(default)s)")
    p.add_argument("--lr-min", type=float, default=None,
                   help="final learning rate; enables cosine annealing (default: constant)")
    p.add_argument("--weight-decay", type=float, default=1e-4, help="decoupled weight decay (default: %(default)s)")
    p.add_argument("--batch-size", type=int, default=64, help="minibatch size (default: %(default)s)")
    p.add_argument("--val-fraction", type=float, default=0.1, help="validation split (default: %(default)s)")
    p.add_argument("--clip-norm", type=float, default=10.0, help="gradient clip norm (default: %(default)s)")
    p.add_argument("--seed", type=int, default=None, help="training seed (required)")
    p.add_argument("--checkpoint-dir", default=None, help="write checkpoints here (default: none)")
    p.add_argument("--checkpoint-every", type=int, default=0, help="checkpoint period in epochs (default: off)")
    p.add_argument("--resume", default=None, help="resume from a .state.pt checkpoint")
    _add_window_flags(p)
    _add_net_flags(p)

    p = sub.add_parser("impute", help="impute series with pretrained weights")
    p.add_argument("--series", default=None, help="CSV or JSONL series file (required)")
    p.add_argument("--format", choices=["csv", "jsonl"], default=None, help="series format (default: by extension)")
    p.add_argument("--weights", default=None, help="local FIMW weights (required)")
    p.add_argument("--gap", type=float, nargs=2, default=None, metavar=("START", "END"),
                   help="fill this missing interval with the gap model")
    p.add_argument("--gap-weights", default=None, help="gap FIMW weights (required with --gap)")
    p.add_argument("--grid", type=int, default=None,
                   help="query a regular grid of this size (default: the input times)")
    p.add_argument("--out", default=None, help="output .json or .csv (required)")
    _add_window_flags(p)

    p = sub.add_parser("benchmark", help="corrupt, impute and score trajectories")
    p.add_argument("--systems", nargs="*", default=["vanderpol", "rossler", "lorenz"],
                   help="built-in systems (default: %(default)s)")
    p.add_argument("--trajectories", nargs="*", default=[], help="extra clean trajectory CSVs")
    p.add_argument("--n-points", type=int, default=512, help="points per simulated system (default: %(default)s)")
    p.add_argument("--imputers", nargs="+", default=["spline"],
                   help="spline, savgol:W:O, fim, fim:K (K windows) (default: %(default)s)")
    p.add_argument("--weights", default=None, help="local weights for fim imputers")
    p.add_argument("--rho", type=float, nargs="+", default=[0.0, 0.5], help="drop rates (default: %(default)s)")
    p.add_argument("--gamma", type=float, nargs="+", default=[0.0, 0.05],
                   help="multiplicative noise levels (default: %(default)s)")
    p.add_argument("--resamples", type=int, default=10, help="corruption samplings per cell (default: %(default)s)")
    p.add_argument("--mask-mode", choices=["all", "missing"], default="all",
                   help="score the complete trajectory or only dropped points (default: %(default)s)")
    p.add_argument("--seed", type=int, default=None, help="base seed (required)")
    p.add_argument("--out", default=None, help="report CSV (required)")
    p.add_argument("--json", default=None, help="also write a JSON report")

    p = sub.add_parser("simulate", help="integrate a built-in system and export it")
    p.add_argument("--system", choices=["vanderpol", "rossler", "lorenz"], default="lorenz",
                   help="system (default: %(default)s)")
    p.add_argument("--n-points", type=int, default=512, help="output points (default: %(default)s)")
    p.add_argument("--substeps", type=int, default=8, help="RK4 steps per output interval (default: %(default)s)")
    p.add_argument("--rho", type=float, default=0.0, help="drop rate (default: %(default)s)")
    p.add_argument("--gamma", type=float, default=0.0, help="multiplicative noise (default: %(default)s)")
    p.add_argument("--seed", type=int, default=None, help="corruption seed (required if corrupting)")
    p.add_argument("--out", default=None, help="series CSV (required)")

    p = sub.add_parser("phase-portrait", help="export (x, dx[, ddx]) columns")
    p.add_argument("--series", default=None, help="CSV or JSONL series file (required)")
    p.add_argument("--format", choices=["csv", "jsonl"], default=None, help="series format (default: by extension)")
    p.add_argument("--channel", type=int, default=0, help="channel index (default: %(default)s)")
    p.add_argument("--weights", default=None, help="local FIMW weights (required)")
    p.add_argument("--depth", type=int, choices=[1, 2], default=1, help="derivative depth (default: %(default)s)")
    p.add_argument("--grid-len", type=int, default=512, help="plotting grid length (default: %(default)s)")
    p.add_argument("--dense-len", type=int, default=8192,
                   help="dense grid for the second pass (default: %(default)s)")
    p.add_argument("--second-windows", type=int, default=64,
                   help="windows for the second pass (default: %(default)s)")
    p.add_argument("--out", default=None, help="output CSV (required)")
    p.add_argument("--svg", default=None, help="optional SVG line plot")
    _add_window_flags(p)
    parser.subcommands = sub.choices
    return parser


REQUIRED = {
    "generate": ["seed", "out"],
    "train": ["seed", "out", "data"],
    "impute": ["series", "weights", "out"],
    "benchmark": ["seed", "out"],
    "simulate": ["out"],
    "phase-portrait": ["series", "weights", "out"],
}


def parse_args(argv=None):
    """Parse flags, merging a JSON config (flags > file > defaults)."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            tree = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"config: {exc}") from None
        if not isinstance(tree, dict):
            raise ValidationError("config: top level must be an object")
        # either flat keys or a section named after the command
        section = tree[args.command] if isinstance(tree.get(args.command), dict) else tree
        sub = parser.subcommands[args.command]
        known = {a.dest for a in sub._actions} - {"help", "config"}
        values = {}
        for k, v in section.items():
            dest = k.replace("-", "_")
            if dest not in known:
                raise ValidationError(f"config: unknown key '{k}' for command {args.command}")
            values[dest] = v
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    missing = [k for k in REQUIRED[args.command] if getattr(args, k) is None]
    if args.command == "simulate" and (args.rho > 0 or args.gamma > 0) and args.seed is None:
        missing.append("seed")
    if missing:
        raise ValidationError("missing required option(s): "
                              + ", ".join("--" + m.replace("_", "-") for m in missing))
    return args


def _set_threads(args):
    threads = args.threads
    if threads is None and os.environ.get("FIM_THREADS"):
        try:
            threads = int(os.environ["FIM_THREADS"])
        except ValueError:
            raise ValidationError("FIM_THREADS must be an integer") from None
    if threads is not None:
        if threads < 1:
            raise ValidationError("--threads must be at least 1")
        import torch

        torch.set_num_threads(threads)


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    from .datasets import write_fimd, write_jsonl
    from .synthgen import GenerationConfig, generate_dataset

    kw = {}
    if args.noise_lambda is not None:
        kw["noise_lambda"] = args.noise_lambda
    if args.family_mix is not None:
        kw["family_mix"] = dict(zip(("chebyshev", "gp_rbf", "gp_periodic"), args.family_mix))
    if args.n < 1:
        raise ValidationError("--n must be positive")
    cfg = GenerationConfig(dataset_kind=args.kind, n_records=args.n, base_seed=args.seed, **kw)
    fmt = args.format or ("fimd" if str(args.out).endswith(".fimd") else "jsonl")
    tally = collections.Counter()

    def counted():
        for rec in generate_dataset(cfg):
            tally[rec.family.value] += 1
            yield rec

    n = (write_fimd if fmt == "fimd" else write_jsonl)(counted(), args.out)
    print(f"wrote {n} records to {args.out}")
    for fam in sorted(tally):
        print(f"  {fam}: {tally[fam]}")
    return EXIT_OK


def _net_config(args):
    from .recnet import NetConfig

    return NetConfig(args.embed_dim, args.ffn_layers, args.ffn_width, args.seq_hidden,
                     args.attn_layers, args.attn_heads, args.attn_dim, args.dropout)


def _train_config(args, net=None):
    from .train import Constant, CosineAnneal, TrainConfig

    sched = (Constant(args.lr) if args.lr_min is None
             else CosineAnneal(args.lr, args.lr_min, args.epochs))
    if not 0 <= args.val_fraction < 1:
        raise ValidationError("--val-fraction must lie in [0, 1)")
    return TrainConfig(stage=args.stage, schedule=sched, weight_decay=args.weight_decay,
                       batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
                       clip_norm=args.clip_norm, val_fraction=args.val_fraction,
                       checkpoint_every=args.checkpoint_every, net=net or _net_config(args))


def cmd_train(args) -> int:
    import torch

    from . import train as tr
    from .datasets import ingest_series, load_records
    from .estimators import load_local
    from .fim_local import ByCount, ByObservations
    from .recnet import ParameterStore

    metrics_path = args.metrics or str(args.out) + ".metrics.csv"
    if args.stage in ("gap", "finetune") and args.weights is None:
        raise ValidationError(f"--stage {args.stage} needs pretrained local --weights")
    local = load_local(args.weights) if args.weights else None
    if not Path(args.data).exists():
        raise ValidationError(f"--data: no such file {args.data}")

    if args.stage == "finetune":
        cfg = _train_config(args, local.cfg)
        series = []
        for s in ingest_series(args.data):
            for d in range(s.n_channels):
                ch = s.channel(d)
                series.append((ch.times, ch.values))
        windowing = ByObservations(args.window_obs) if args.window_obs else ByCount(args.windows)
        torch.manual_seed(cfg.seed)
        model, result = tr.finetune_reconstruction(local, series, cfg, windowing)
        result.params.save(args.out)
        tr.write_metrics(metrics_path, result.history)
        print(f"fine-tuned on {len(series)} series; final MAE "
              f"{tr.reconstruction_mae(model, series, windowing):.6g}")
        return EXIT_OK

    records = load_records(args.data)
    if not records:
        raise ValidationError(f"{args.data}: dataset is empty")
    has_gap = [r.gap is not None for r in records]
    if args.stage == "local" and any(has_gap):
        raise ValidationError("--stage local expects a point-wise dataset")
    if args.stage == "gap" and not all(has_gap):
        raise ValidationError("--stage gap expects a temporal dataset")

    if args.stage == "local":
        cfg = _train_config(args)
        model, result = tr.train_local(records, cfg, ckpt_dir=args.checkpoint_dir,
                                       resume=args.resume)
    else:
        cfg = _train_config(args, local.cfg)
        model, result = tr.train_gap(local, records, cfg, ckpt_dir=args.checkpoint_dir)
    result.params.save(args.out)
    tr.write_metrics(metrics_path, result.history)
    last = [r for r in result.history if r["split"] == "val"][-1:] or result.history[-1:]
    summary = f"; last {last[0]['split']} loss {last[0]['total']:.6g}" if last else ""
    print(f"saved {ParameterStore.load(args.out).total_count} parameters to {args.out}{summary}")
    return EXIT_OK


def _norm_dict(norm):
    return {"y_min": norm.y_min, "y_max": norm.y_max, "tau_min": norm.tau_min,
            "tau_max": norm.tau_max, "degenerate": bool(norm.degenerate)}


def imputation_payload(names, query_times, outputs, mode: str) -> dict:
    """Output schema shared by JSON and CSV writers.

    ``outputs`` holds, per channel, either an object with ``x_hat``/``f_hat``
    or an error string.
    """
    channels = []
    for name, out in zip(names, outputs):
        if isinstance(out, str):
            channels.append({"name": name, "error": out})
            continue
        f, lv = out.f_hat(query_times)
        block = {"name": name, "t": [float(v) for v in query_times],
                 "x_hat": [float(v) for v in out.x_hat(query_times)],
                 "f_hat": [float(v) for v in f], "f_log_var": [float(v) for v in lv]}
        parts = getattr(out, "parts", None)
        if parts is None and hasattr(out, "norm"):
            parts = [out]
        if parts is None and hasattr(out, "left"):
            parts = list(out.left.parts) + list(out.right.parts)
        block["normalization"] = [_norm_dict(p.norm) for p in parts or []]
        channels.append(block)
    return {"mode": mode, "channels": channels}


def write_payload(payload: dict, path) -> None:
    import csv

    from .datasets import atomic_path

    path = Path(path)
    with atomic_path(path) as tmp, open(tmp, "w", newline="") as fh:
        if path.suffix == ".csv":
            w = csv.writer(fh)
            w.writerow(["channel", "t", "x_hat", "f_hat", "f_log_var"])
            for ch in payload["channels"]:
                if "error" in ch:
                    continue
                for row in zip(ch["t"], ch["x_hat"], ch["f_hat"], ch["f_log_var"]):
                    w.writerow([ch["name"]] + [repr(v) for v in row])
        else:
            json.dump(payload, fh, indent=1)


def cmd_impute(args) -> int:
    from .datasets import ingest_series
    from .estimators import load_gap, load_local
    from .fim_gap import impute_gap
    from .fim_local import ByCount, ByObservations, compose_windows

    if args.gap is not None and args.gap_weights is None:
        raise ValidationError("--gap needs --gap-weights")
    model = load_local(args.weights)
    gap_model = load_gap(args.gap_weights) if args.gap is not None else None
    windowing = ByObservations(args.window_obs) if args.window_obs else ByCount(args.windows)
    series_list = ingest_series(args.series, args.format)
    if len(series_list) != 1:
        raise ValidationError("impute expects a single series (one JSONL line)")
    s = series_list[0]
    if args.gap is not None and not (s.times[0] < args.gap[0] < args.gap[1] < s.times[-1]):
        raise ValidationError("--gap must lie strictly inside the series time span")
    q = np.linspace(s.times[0], s.times[-1], args.grid) if args.grid else s.times
    names = s.names or [f"x{d + 1}" for d in range(s.n_channels)]
    outputs = []
    for d in range(s.n_channels):
        ch = s.channel(d)
        try:
            if args.gap is not None:
                outputs.append(impute_gap(model, gap_model, ch.times, ch.values, tuple(args.gap)))
            else:
                outputs.append(compose_windows(model, ch.times, ch.values, windowing))
        except (ValueError, RuntimeError) as exc:
            logger.warning("channel %s failed: %s", names[d], exc)
            outputs.append(f"{type(exc).__name__}: {exc}")
    if all(isinstance(o, str) for o in outputs):
        raise ValidationError("every channel failed: " + "; ".join(outputs))
    payload = imputation_payload(names, q, outputs, "gap" if args.gap is not None else "pointwise")
    write_payload(payload, args.out)
    print(f"imputed {s.n_channels} channel(s) on {len(q)} points -> {args.out}")
    return EXIT_OK


def make_imputer(spec: str, weights=None):
    from .estimators import FIMImputer, SplineImputer

    parts = spec.split(":")
    if parts[0] == "spline" and len(parts) == 1:
        return SplineImputer()
    if parts[0] == "savgol" and len(parts) == 3:
        return SplineImputer(int(parts[1]), int(parts[2]))
    if parts[0] == "fim" and len(parts) in (1, 2):
        if weights is None:
            raise ValidationError(f"imputer '{spec}' needs --weights")
        from .estimators import load_local

        return FIMImputer(model=load_local(weights), windows=int(parts[1]) if len(parts) == 2 else 1)
    raise ValidationError(f"unknown imputer '{spec}'")


def cmd_benchmark(args) -> int:
    from .evaluation import benchmark, write_report
    from .odesim import CorruptionSpec, read_trajectory_csv, simulate_builtin

    imputers = {spec: make_imputer(spec, args.weights) for spec in args.imputers}
    corruptions = [(r, g) for r in args.rho for g in args.gamma]
    for r, g in corruptions:
        CorruptionSpec(r, g, 0)  # validates ranges
    trajs = {}
    for name in args.systems:
        try:
            trajs[name] = simulate_builtin(name, args.n_points)
        except KeyError:
            raise ValidationError(f"unknown system '{name}'") from None
    for path in args.trajectories:
        trajs[Path(path).stem] = read_trajectory_csv(path)
    if not trajs:
        raise ValidationError("no systems or trajectories to benchmark")
    rows = benchmark(trajs, imputers, corruptions, args.resamples, args.seed, args.mask_mode)
    write_report(rows, args.out, args.json)
    failed = sum(1 for r in rows if r.error)
    print(f"{len(trajs)} system(s) x {len(corruptions)} corruption(s) x {len(imputers)} imputer(s); "
          f"{failed} failed cell(s) -> {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .datasets import export_series
    from .odesim import CorruptionSpec, corrupt, simulate_builtin
    from .series import TimeSeries

    if args.n_points < 2 or args.substeps < 1:
        raise ValidationError("--n-points must be >= 2 and --substeps >= 1")
    traj = simulate_builtin(args.system, args.n_points, args.substeps)
    names = [f"x{d + 1}" for d in range(traj.states.shape[1])]
    if args.rho > 0 or args.gamma > 0:
        c = corrupt(traj, CorruptionSpec(args.rho, args.gamma, args.seed))
        vals = np.full_like(traj.states, np.nan)
        vals[c.keep] = c.series.values
        s = TimeSeries(traj.times, vals, names=names)
    else:
        s = TimeSeries(traj.times, traj.states, names=names)
    export_series([s], args.out, "csv")
    print(f"{args.system}: {len(traj.times)} points -> {args.out}")
    return EXIT_OK


def cmd_phase_portrait(args) -> int:
    from .datasets import atomic_path, ingest_series
    from .estimators import load_local
    from .evaluation import phase_portrait, svg_lines, write_columns_csv
    from .fim_local import ByCount, ByObservations

    model = load_local(args.weights)
    s = ingest_series(args.series, args.format)[0]
    if not 0 <= args.channel < s.n_channels:
        raise ValidationError(f"--channel {args.channel} out of range")
    ch = s.channel(args.channel)
    windowing = ByObservations(args.window_obs) if args.window_obs else ByCount(args.windows)
    cols = phase_portrait(model, ch.times, ch.values, args.depth, args.grid_len, windowing,
                          args.dense_len, ByCount(args.second_windows))
    write_columns_csv(args.out, cols)
    if args.svg:
        svg = svg_lines(cols, "x", ["dx"]) if args.depth == 1 else svg_lines(cols, "dx", ["ddx"])
        with atomic_path(args.svg) as tmp:
            Path(tmp).write_text(svg)
    print(f"wrote {len(cols['t'])} rows -> {args.out}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "impute": cmd_impute,
            "benchmark": cmd_benchmark, "simulate": cmd_simulate,
            "phase-portrait": cmd_phase_portrait}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors already exit with 2
        return int(exc.code or 0)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads(args)
        return COMMANDS[args.command](args)
    except (ValidationError, ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        logger.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
