"""Command-line entry point: ``svdkl <verb> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    gains_from_config,
    load_config,
    parse_payload_schedule,
    plant_from_config,
    train_config_from,
    trajectory_from_config,
)
from .controller import run_closed_loop
from .data import Dataset, evaluate, load_csv, save_csv, split
from .dynamics import default_plant, random_trajectory
from .errors import DataError, DimensionMismatch, EmptyDataset, SvdklError, VersionMismatch
from .experiments import (
    ModelSettings,
    OnlineSettings,
    benchmark_scaling,
    default_gains,
    fit,
    loglog_slope,
    online_experiment,
    trajectory_dataset,
)
from .svgp import load_model, save_model
from .trainer import TrainConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(SvdklError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _pair(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}")
    return lo, hi


def _infer_dof(path: str) -> int:
    with open(path, encoding="utf-8") as fh:
        width = len(fh.readline().strip().split(","))
    if width % 4:
        raise DataError(f"{path}: header has {width} columns, not a multiple of 4")
    return width // 4


def _load(path: str, dof: int | None) -> Dataset:
    if not Path(path).is_file():
        raise DataError(f"no such data file: {path}")
    return load_csv(path, dof or _infer_dof(path))


def _emit(text: str, path: str | None) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _kv_report(items: dict) -> str:
    lines = []
    for k, v in items.items():
        if isinstance(v, np.ndarray):
            v = ",".join(f"{x:.17g}" for x in v)
        elif isinstance(v, float):
            v = f"{v:.17g}"
        lines.append(f"{k}: {v}")
    return "\n".join(lines) + "\n"


def _train_config(args) -> TrainConfig:
    cfg = train_config_from(load_config(args.train_config)) if args.train_config else TrainConfig()
    overrides = {k: getattr(args, k) for k in ("learning_rate", "batch_size", "max_epochs", "patience")
                 if getattr(args, k, None) is not None}
    values = {**cfg.__dict__, **overrides, "seed": args.seed}
    return TrainConfig(**values)


# ---------------------------------------------------------------------------
# verbs


def cmd_gen_data(args) -> int:
    plant = plant_from_config(load_config(args.plant_config)) if args.plant_config else default_plant()
    data = trajectory_dataset(
        args.trajectories, seed=args.seed, plant=plant, duration=args.duration,
        sample_dt=args.sample_dt, payload_range=args.payload_range,
        torque_noise=args.noise, mirror=args.mirror,
    )
    save_csv(args.out, data)
    print(f"wrote {len(data)} rows to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    data = _load(args.data, args.dof)
    cfg = _train_config(args)
    train, valid, test = split(data, seed=args.seed)
    settings = ModelSettings(args.inducing, args.hidden, args.feature_dim, args.activation)
    start = time.perf_counter()
    model, history = fit(args.model, train, valid, cfg, settings)
    seconds = time.perf_counter() - start
    save_model(args.out, model)
    if args.history:
        history.to_csv(args.history)
    report = evaluate(model, test if len(test) else train, {
        "model": args.model, "inducing": args.inducing, "seed": args.seed,
        "epochs_run": len(history), "best_epoch": history.best_epoch,
    })
    report.seconds = seconds
    _emit(report.to_text(include_timing=args.timing), args.report)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.model_file)
    data = _load(args.data, args.dof or model.n_tasks)
    report = evaluate(model, data, {"model": model.kind, "model_file": Path(args.model_file).name})
    _emit(report.to_text(), args.report)
    return EXIT_OK


def cmd_simulate(args) -> int:
    plant = plant_from_config(load_config(args.plant_config)) if args.plant_config else default_plant()
    if args.trajectory:
        spec = trajectory_from_config(load_config(args.trajectory), plant.dof)
    else:
        spec = random_trajectory(np.random.default_rng(args.seed), plant.dof, duration=args.duration)
    gains = gains_from_config(load_config(args.gain_config)) if args.gain_config else default_gains()
    if args.ff == "model":
        if not args.model_file:
            raise UsageError("--ff model needs --model-file")
        ff = load_model(args.model_file)
    else:
        ff = args.ff
    if args.gains == "variable" and args.ff != "model":
        raise UsageError("--gains variable needs --ff model")
    schedule = parse_payload_schedule(args.payload_schedule) if args.payload_schedule else None
    trace = run_closed_loop(plant, spec, ff, gains, args.gains, payload_schedule=schedule)
    if args.trace:
        trace.to_csv(args.trace)
    _emit(_kv_report({
        "steps": len(trace.t),
        "position_rmse": trace.position_rmse(),
        "feedforward_rmse": trace.feedforward_rmse(),
        "mean_kp": trace.kp.mean(0),
        "clip_count": trace.clip_count,
        "config.ff": args.ff,
        "config.gains": args.gains,
        "config.seed": args.seed,
    }), args.report)
    return EXIT_OK


def cmd_online(args) -> int:
    if args.batches < 5:
        raise UsageError("--batches must be at least 5 (the smoothing window)")
    if args.warmstart_trajectories < 1:
        raise UsageError("--warmstart-trajectories must be positive")
    settings = OnlineSettings(n_warm_traj=args.warmstart_trajectories, n_batches=args.batches,
                              seed=args.seed)
    if args.payload is not None:
        settings.payload = args.payload
    if args.payload_schedule:
        settings.payload_schedule = parse_payload_schedule(args.payload_schedule)
    if args.gain_config:
        settings.gains = gains_from_config(load_config(args.gain_config))
    result = online_experiment(settings)
    if args.trace:
        result.trace.to_csv(args.trace)
    if args.model_out:
        save_model(args.model_out, result.model)
    _emit(_kv_report({
        "batches": args.batches,
        "warmstart_trajectories": args.warmstart_trajectories,
        "ff_rmse_first_window": float(result.smoothed_ff_rmse()[0]),
        "ff_rmse_last_window": float(result.smoothed_ff_rmse()[-1]),
        "ff_reduction": result.ff_reduction(),
        "kp_reduction": result.gain_reduction(),
        "final_position_rmse": result.trace.position_rmse(slice(-5 * result.batch_size, None)),
        "baseline_position_rmse": result.baseline.position_rmse(slice(-5 * result.batch_size, None)),
        "position_ratio": result.final_position_ratio(),
        "clip_count": result.trace.clip_count,
        "model_version": result.model.version,
        "config.seed": args.seed,
    }), args.report)
    return EXIT_OK


def cmd_benchmark(args) -> int:
    if list(args.sizes) != sorted(args.sizes) or not args.sizes:
        raise UsageError("--sizes must be a non-empty ascending list")
    lines = ["model,n,seconds"]
    slopes = {}
    for kind in args.model:
        rows = benchmark_scaling(kind, args.sizes, TrainConfig(seed=args.seed), args.epochs,
                                 seed=args.seed, repeats=args.repeats)
        lines += [f"{kind},{n},{s:.6f}" for n, s in rows]
        if len(rows) > 1:
            slopes[kind] = loglog_slope(rows)
    lines += [f"# loglog slope {k}: {v:.4f}" for k, v in slopes.items()]
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="svdkl", description="Sparse variational deep kernel inverse dynamics toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--report", help="write the report here instead of stdout")

    g = sub.add_parser("gen-data", help="simulate trajectories and write a dataset CSV")
    g.add_argument("--out", required=True)
    g.add_argument("--trajectories", type=int, default=50)
    g.add_argument("--duration", type=float, default=2.0)
    g.add_argument("--sample-dt", type=float, default=0.01)
    g.add_argument("--payload-range", type=_pair, help="'lo,hi' kg for pick-and-place payloads")
    g.add_argument("--noise", type=float, default=0.0, help="torque noise std, N m")
    g.add_argument("--mirror", action="store_true")
    g.add_argument("--plant-config")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="offline training with early stopping")
    t.add_argument("--data", required=True)
    t.add_argument("--dof", type=int, help="joints (default: inferred from the header)")
    t.add_argument("--model", choices=("svgp", "svdkl"), default="svdkl")
    t.add_argument("--inducing", type=int, default=128)
    t.add_argument("--hidden", type=_ints, default=(64, 64))
    t.add_argument("--feature-dim", type=int, default=8)
    t.add_argument("--activation", choices=("relu", "tanh"), default="relu")
    t.add_argument("--train-config", help="flat key = value file of training settings")
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--out", required=True, help="model container path (.npz)")
    t.add_argument("--history", help="write per-epoch history CSV here")
    t.add_argument("--timing", action="store_true", help="include wall-clock time in the report")
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a saved model on a dataset")
    e.add_argument("--model-file", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--dof", type=int)
    common(e)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", help="closed-loop tracking run")
    s.add_argument("--plant-config")
    s.add_argument("--trajectory", help="trajectory config file (default: random, seeded)")
    s.add_argument("--duration", type=float, default=10.0, help="for the random trajectory")
    s.add_argument("--ff", choices=("analytic", "none", "model"), default="analytic")
    s.add_argument("--model-file")
    s.add_argument("--gains", choices=("fixed", "variable"), default="fixed")
    s.add_argument("--gain-config")
    s.add_argument("--payload-schedule", help="'start:end:mass,...'")
    s.add_argument("--trace", help="write the per-step trace CSV here")
    common(s)
    s.set_defaults(func=cmd_simulate)

    o = sub.add_parser("online", help="warm start then online learning with variable gains")
    o.add_argument("--warmstart-trajectories", type=int, default=50)
    o.add_argument("--batches", type=int, default=50)
    o.add_argument("--payload", type=float)
    o.add_argument("--payload-schedule", help="'start:end:mass,...'")
    o.add_argument("--gain-config")
    o.add_argument("--trace")
    o.add_argument("--model-out")
    common(o)
    o.set_defaults(func=cmd_online)

    b = sub.add_parser("benchmark", help="training time versus dataset size")
    b.add_argument("--sizes", type=_ints, default=(2000, 4000, 8000, 16000))
    b.add_argument("--model", type=lambda v: tuple(v.split(",")), default=("svgp", "svdkl"))
    b.add_argument("--epochs", type=int, default=3)
    b.add_argument("--repeats", type=int, default=1)
    b.add_argument("--out")
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DataError, DimensionMismatch, EmptyDataset, VersionMismatch, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ArithmeticError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
