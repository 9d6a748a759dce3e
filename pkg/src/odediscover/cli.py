"""Command-line front end.

Subcommands: gen, train, sweep, eval, ablate, equation, plot. Every flag can
also come from a config file of flat key=value lines grouped into sections
named after the subcommands; command-line flags win. The environment
variable ODEDISCOVER_THREADS caps worker counts everywhere.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import basis, io_files, systems
from .adaptation import AdaptConfig
from .experiments import (
    ExperimentConfig,
    evaluate_model_on_split,
    evaluate_sindy_on_split,
    run_ablation,
)
from .model import extract_equation
from .systems import environment_for, generate, get_system
from .trainer import (
    AllConfigsFailedError,
    HyperConfig,
    SweepGrid,
    fit,
    n_workers_default,
    split_validation,
    sweep_and_select,
)


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


_FLAG_OPTIONS = {"composed", "no-refine", "no-adapt", "plot-data"}


def _load_config_defaults(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Expand --config into pseudo-flags placed before the explicit ones.

    The config file is ini-style with one section per subcommand; keys match
    the long option names. Because argparse lets later occurrences win,
    anything typed on the command line overrides the file.
    """
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        parser.error("--config needs a file argument")
    path = argv[i + 1]
    cfg = configparser.ConfigParser()
    if not cfg.read(path):
        parser.error(f"cannot read config file {path}")
    rest = argv[:i] + argv[i + 2 :]
    section = rest[0] if rest and not rest[0].startswith("-") else None
    if not section or not cfg.has_section(section):
        return rest
    injected: list[str] = []
    for key, value in cfg.items(section):
        opt = key.replace("_", "-")
        if opt in _FLAG_OPTIONS:
            if value.strip().lower() in ("1", "true", "yes", "on"):
                injected.append(f"--{opt}")
        else:
            injected += [f"--{opt}", value]
    return [rest[0]] + injected + rest[1:]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="odediscover",
        description="Learn sparse symbolic ODEs shared across tasks and forecast OOD trajectories.",
    )
    parser.add_argument("--config", help="ini-style config file with per-command sections")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a benchmark dataset")
    g.add_argument("--system", required=True, choices=list(systems.SYSTEM_NAMES))
    g.add_argument("--split", default="id", help="id | ood-x0 | ood-x0-w")
    g.add_argument("--tasks", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--noise-sigma", type=float, default=None)
    g.add_argument("--n-steps", type=int, default=None)
    g.add_argument("--dt", type=float, default=None)
    g.add_argument("--prefix-len", type=int, default=None)

    t = sub.add_parser("train", help="fit one hyperparameter configuration")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--lambda-phi", type=float, default=1e-3)
    t.add_argument("--lambda-rex", type=float, default=0.0)
    t.add_argument("--eta", type=float, default=1e-2)
    t.add_argument("--epochs", type=int, default=2000)
    t.add_argument("--batch-tasks", type=int, default=128)
    t.add_argument("--optimizer", default="adam", choices=["adam", "sgd"])
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--val-frac", type=float, default=0.2)
    t.add_argument("--composed", action="store_true", help="use the 2-layer composed library")

    s = sub.add_parser("sweep", help="grid sweep plus sparsity-aware selection")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--runlog", default=None, help="JSON-lines sweep log to append to")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--val-frac", type=float, default=0.2)
    s.add_argument("--lambda-phi-grid", type=_float_list, default=SweepGrid().lambda_phis)
    s.add_argument("--lambda-rex-grid", type=_float_list, default=SweepGrid().lambda_rexs)
    s.add_argument("--eta-grid", type=_float_list, default=SweepGrid().etas)
    s.add_argument("--epochs", type=int, default=2000)
    s.add_argument("--batch-tasks", type=int, default=128)
    s.add_argument("--threads", type=int, default=None)
    s.add_argument("--composed", action="store_true")

    e = sub.add_parser("eval", help="adapt, forecast, and score a test dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--model", default=None, help="model file (required for metaphysica)")
    e.add_argument("--method", default="metaphysica", choices=["metaphysica", "sindy"])
    e.add_argument("--adapt-steps", type=int, default=1000)
    e.add_argument("--adapt-eta", type=float, default=1e-2)
    e.add_argument("--no-refine", action="store_true", help="stop after the least-squares warm start")
    e.add_argument("--no-adapt", action="store_true", help="use the mean of the training weights")
    e.add_argument("--pooling", default="per_dim", choices=["per_dim", "raw"])
    e.add_argument("--plot-data", action="store_true", help="also write predicted-vs-true CSV")

    a = sub.add_parser("ablate", help="run one ablation variant end to end")
    a.add_argument("--system", required=True, choices=list(systems.SYSTEM_NAMES))
    a.add_argument("--variant", required=True, choices=["no-l1", "no-adapt", "no-vrex"])
    a.add_argument("--out", required=True)
    a.add_argument("--splits", default="ood-x0")
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--n-train", type=int, default=1000)
    a.add_argument("--n-test", type=int, default=200)
    a.add_argument("--epochs", type=int, default=2000)
    a.add_argument("--threads", type=int, default=None)

    q = sub.add_parser("equation", help="print the learned symbolic ODE")
    q.add_argument("--model", required=True)
    q.add_argument("--system", default=None, help="use this system's state variable names")
    q.add_argument(
        "--weights",
        default=None,
        help="'mean' for the average training weights, or a training task index",
    )

    p = sub.add_parser("plot", help="summary SVG of mean NRMSE per report")
    p.add_argument("--report", nargs="+", required=True)
    p.add_argument("--out", required=True)
    return parser


def cmd_gen(args) -> int:
    system = get_system(args.system)
    env = environment_for(system, args.split)
    grid = systems.default_grid(system)
    if args.n_steps is not None or args.dt is not None:
        grid = systems.TimeGrid(
            0.0,
            args.dt if args.dt is not None else grid.dt,
            args.n_steps if args.n_steps is not None else grid.n_steps,
        )
    ds = generate(
        system,
        env,
        args.tasks,
        grid=grid,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
        prefix_len=args.prefix_len,
    )
    io_files.save_dataset(ds, args.out)
    print(f"wrote {len(ds.tasks)} tasks to {args.out}")
    return 0


def cmd_train(args) -> int:
    ds = io_files.load_dataset(args.data)
    train_tasks, val_tasks = split_validation(ds, args.val_frac)
    lib = None
    if args.composed:
        lib = basis.compose_layer2(basis.make_library(ds.system.d))
    cfg = HyperConfig(
        lambda_phi=args.lambda_phi,
        lambda_rex=args.lambda_rex,
        eta=args.eta,
        epochs=args.epochs,
        batch_tasks=args.batch_tasks,
        optimizer=args.optimizer,
    )
    model, report = fit(
        train_tasks, cfg, seed=args.seed, val_tasks=val_tasks,
        val_prefix_len=ds.prefix_len, lib=lib,
    )
    model = model.with_selection(
        {
            "lambda_phi": cfg.lambda_phi,
            "lambda_rex": cfg.lambda_rex,
            "eta": cfg.eta,
            "epochs": cfg.epochs,
            "batch_tasks": cfg.batch_tasks,
            "optimizer": cfg.optimizer,
            "val_loss": report.val_loss,
            "phi_l0": report.phi_l0,
            "seed": args.seed,
        }
    )
    io_files.save_model(model, args.out)
    print(f"wrote model to {args.out} (val_loss={report.val_loss:.6g}, L0={report.phi_l0})")
    return 0


def cmd_sweep(args) -> int:
    ds = io_files.load_dataset(args.data)
    lib = None
    if args.composed:
        lib = basis.compose_layer2(basis.make_library(ds.system.d))
    grid = SweepGrid(
        lambda_phis=args.lambda_phi_grid,
        lambda_rexs=args.lambda_rex_grid,
        etas=args.eta_grid,
        epochs=args.epochs,
        batch_tasks=args.batch_tasks,
    )
    try:
        model, records = sweep_and_select(
            ds, grid, seed=args.seed, val_frac=args.val_frac, lib=lib,
            n_workers=args.threads,
        )
    except AllConfigsFailedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for rec in records:
        if rec.failed:
            print(
                f"warning: config lambda_phi={rec.config.lambda_phi:g} "
                f"lambda_rex={rec.config.lambda_rex:g} eta={rec.config.eta:g} failed: {rec.message}",
                file=sys.stderr,
            )
    if args.runlog:
        io_files.save_runlog(
            [
                {
                    "lambda_phi": r.config.lambda_phi,
                    "lambda_rex": r.config.lambda_rex,
                    "eta": r.config.eta,
                    "val_loss": r.val_loss,
                    "phi_l0": r.phi_l0,
                    "failed": r.failed,
                    "final_loss": r.final_loss,
                    "wall_time": r.wall_time,
                }
                for r in records
            ],
            args.runlog,
        )
    io_files.save_model(model, args.out)
    sel = model.selection_record
    print(
        f"wrote model to {args.out} "
        f"(lambda_phi={sel['lambda_phi']:g}, lambda_rex={sel['lambda_rex']:g}, "
        f"eta={sel['eta']:g}, val_loss={sel['val_loss']:.6g}, L0={sel['phi_l0']})"
    )
    return 0


def cmd_eval(args) -> int:
    ds = io_files.load_dataset(args.data)
    pooling = args.pooling
    if args.method == "sindy":
        lib = basis.make_library(ds.system.d)
        result = evaluate_sindy_on_split(ds, lib, pooling=pooling)
        equation = ""
        model = None
    else:
        if not args.model:
            print("error: --model is required for method metaphysica", file=sys.stderr)
            return 2
        model = io_files.load_model(args.model)
        adapt_cfg = AdaptConfig(
            steps=args.adapt_steps,
            eta=args.adapt_eta,
            refine_with_rollout=not args.no_refine,
        )
        result = evaluate_model_on_split(
            model, ds, adapt_cfg, pooling=pooling, no_adapt=args.no_adapt
        )
        equation = extract_equation(model, state_names=list(ds.system.state_names))
        result.equation = equation
        result.selection = model.selection_record

    report = {
        "system": ds.system.name,
        "split": ds.split,
        "method": args.method,
        "variant": "no_adapt" if getattr(args, "no_adapt", False) else None,
        "pooling": pooling,
        "empty": len(ds.tasks) == 0,
        "nrmse_mean": result.mean,
        "nrmse_std": None
        if not [v for v in result.nrmse if v is not None]
        else float(np.std([v for v in result.nrmse if v is not None])),
        "nan_star_count": result.nan_star_count,
        "nan_star_flagged": result.nan_star_count > 0,
        "seeds": [
            {
                "seed": ds.seed,
                "mean": result.mean,
                "nan_star_count": result.nan_star_count,
                "equation": equation,
                "selection": result.selection,
                "per_task": [
                    {"task_id": i, "nrmse": v, "nan_star": v is None}
                    for i, v in enumerate(result.nrmse)
                ],
            }
        ],
    }
    io_files.save_report(report, args.out)
    if args.plot_data and len(ds.tasks) > 0:
        _write_plot_data(args, ds, model, result)
    shown = "n/a" if result.mean is None else f"{result.mean:.4f}"
    print(
        f"wrote report to {args.out} (mean NRMSE={shown}, NaN*={result.nan_star_count})"
    )
    return 0


def _write_plot_data(args, ds, model, result) -> None:
    from .adaptation import adapt_batch, forecast_batch
    from .ode_sim import TimeGrid

    p = ds.prefix_len
    dt = ds.grid.dt
    horizon = ds.grid.n_steps - p
    prefix_states = np.stack([t.trajectory.states[: p + 1] for t in ds.tasks])
    truth = np.stack([t.trajectory.states[p:] for t in ds.tasks])
    if args.method == "sindy":
        from .sindy import sindy_forecast_batch

        lib = basis.make_library(ds.system.d)
        pred, _ = sindy_forecast_batch(prefix_states, dt, horizon, lib)
    else:
        adapt_cfg = AdaptConfig(
            steps=args.adapt_steps, eta=args.adapt_eta,
            refine_with_rollout=not args.no_refine,
        )
        if args.no_adapt:
            w_mean = model.train_weights.mean(axis=0)
            ws = np.broadcast_to(w_mean, (len(ds.tasks),) + w_mean.shape)
        else:
            ws, _ = adapt_batch(model, prefix_states, dt, adapt_cfg)
        pred, _ = forecast_batch(
            model, ws, prefix_states[:, -1], TimeGrid(ds.grid.t0 + p * dt, dt, horizon)
        )
    times = ds.grid.t0 + dt * np.arange(p, ds.grid.n_steps + 1)
    io_files.save_plot_data(
        pred, truth, times, [t.task_id for t in ds.tasks],
        Path(args.out) / "plotdata.csv",
    )


def cmd_ablate(args) -> int:
    variant = args.variant.replace("-", "_")
    splits = tuple(s.strip().lower().replace("-", "_") for s in args.splits.split(","))
    cfg = ExperimentConfig(
        system=args.system,
        splits=splits,
        n_seeds=args.seeds,
        n_train=args.n_train,
        n_test=args.n_test,
        grid=SweepGrid(epochs=args.epochs),
        n_workers=args.threads,
    )
    try:
        reports, _models, _recs = run_ablation(
            args.system, variant, cfg, progress=lambda m: print(m, file=sys.stderr)
        )
    except AllConfigsFailedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, rep in reports.items():
        io_files.save_report(rep.to_dict(), out, stem=f"ablation_{variant}_{split}")
        shown = "NaN*" if rep.mean is None else f"{rep.mean:.4f}"
        print(f"{args.system} {split} {variant}: mean NRMSE {shown} (NaN*={rep.nan_star_count})")
    return 0


def cmd_equation(args) -> int:
    model = io_files.load_model(args.model)
    names = None
    if args.system:
        names = list(get_system(args.system).state_names)
    w = None
    if args.weights is not None:
        if model.train_weights is None:
            print("error: model has no stored training weights", file=sys.stderr)
            return 1
        if args.weights == "mean":
            w = model.train_weights.mean(axis=0)
        else:
            w = model.train_weights[int(args.weights)]
    print(extract_equation(model, w=w, state_names=names))
    return 0


def cmd_plot(args) -> int:
    entries = []
    for path in args.report:
        obj = json.loads(Path(path).read_text())
        label_bits = [obj.get("system", "?"), obj.get("split", "?"), obj.get("method", "?")]
        if obj.get("variant"):
            label_bits.append(obj["variant"])
        entries.append(("/".join(label_bits), obj.get("nrmse_mean")))
    io_files.svg_nrmse_bars(entries, args.out)
    print(f"wrote {args.out}")
    return 0


_COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "equation": cmd_equation,
    "plot": cmd_plot,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    argv = _load_config_defaults(parser, argv)
    args = parser.parse_args(argv)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
