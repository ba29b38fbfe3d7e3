"""Unified command-line entry point.

Subcommands: simulate, ingest, train, predict, impute, recover, forecast,
eval-intensity, eval, plot, report. Every run writes a manifest with the
fully resolved configuration; path defaults can come from the environment
variables STFLOW_DATA, STFLOW_OUT, and STFLOW_CKPT.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation, ingest, plots, simulate
from .errors import (
    DataError,
    IntegrationError,
    SimulationIntegrityError,
    StflowError,
    TrainingError,
)
from .events import load_sequences
from .manifest import read_manifest, write_manifest
from .model import ModelConfig, load_checkpoint
from .ode import SolverConfig
from .train import TrainConfig, fit

EXIT_ARGUMENT = 2
EXIT_DATA = 3
EXIT_INTEGRATION = 4
EXIT_TRAINING = 5


def _env_default(var: str) -> str | None:
    return os.environ.get(var)


def _load_dataset(data_dir: str | Path):
    data_dir = Path(data_dir)
    names = {"train": "train.jsonl", "val": "val.jsonl", "test": "test.jsonl"}
    mpath = data_dir / "manifest.json"
    if mpath.exists():
        m = json.loads(mpath.read_text())
        names.update(m.get("files", {}))
    splits = {}
    for split, fname in names.items():
        fpath = data_dir / fname
        splits[split] = load_sequences(fpath) if fpath.exists() else []
    return splits


def _dataset_process(data_dir: str | Path):
    mpath = Path(data_dir) / "manifest.json"
    if mpath.exists():
        m = json.loads(mpath.read_text())
        if "process" in m:
            return simulate.load_process_from_manifest(mpath)
    return None


def _dataset_domain(data_dir: str | Path):
    mpath = Path(data_dir) / "manifest.json"
    if mpath.exists():
        m = json.loads(mpath.read_text())
        if "domain" in m:
            from .events import DomainSpec
            return DomainSpec.from_dict(m["domain"])
        if "summary" in m and "time_horizon" in m.get("summary", {}):
            from .events import DomainSpec
            seqs = _load_dataset(data_dir)
            locs = np.concatenate([s.locations for split in seqs.values() for s in split if len(s)])
            box = np.stack([locs.min(axis=0), locs.max(axis=0)], axis=1)
            return DomainSpec(m["summary"]["time_horizon"], box)
    raise DataError(f"no usable manifest under {data_dir}; cannot infer the domain")


# ------------------------------------------------------------- subcommands


def cmd_simulate(args) -> int:
    process = simulate.make_process(args.process)
    out = Path(args.out)
    write_manifest(out, "simulate", vars(args))
    simulate.generate_dataset(process, args.n_train, args.n_val, args.n_test,
                              args.seed, out_dir=out)
    counts = {"train": args.n_train, "val": args.n_val, "test": args.n_test}
    print(f"simulated {args.process} dataset under {out}: {counts}")
    return 0


def cmd_ingest(args) -> int:
    out = Path(args.out)
    write_manifest(out, "ingest", vars(args))
    summary = ingest.ingest_benchmark(args.name, args.raw, out)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_train(args) -> int:
    splits = _load_dataset(args.data)
    domain = _dataset_domain(args.data)
    overrides = {}
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
    tcfg_kwargs = overrides.get("train", {})
    mcfg_kwargs = overrides.get("model", {})
    for key in ("lr", "batch_size", "max_epochs", "seed", "patience"):
        val = getattr(args, key if key != "max_epochs" else "epochs", None)
        if val is not None:
            tcfg_kwargs[key] = val
    cfg = TrainConfig(**tcfg_kwargs)
    mcfg = ModelConfig(spatial_dim=domain.dim, **mcfg_kwargs)
    out = Path(args.out)
    write_manifest(out, "train", {"args": vars(args), "train_config": cfg.__dict__,
                                  "model_config": mcfg.__dict__})
    log = (lambda rec: print(f"epoch {rec['epoch']:4d}  train {rec['train_loss']:.4f}  "
                             f"val {rec['val_loss']:.4f}  {rec['seconds']:.1f}s", flush=True))
    _, history, ckpt = fit(splits["train"], splits["val"], domain, mcfg, cfg, out,
                           log_fn=log if not args.quiet else None)
    print(f"checkpoint written to {ckpt} (best val "
          f"{min(h['val_loss'] for h in history):.4f} over {len(history)} epochs)")
    return 0


def _solver_from_args(args) -> SolverConfig:
    return SolverConfig(method=args.solver, budget=args.budget,
                        rtol=args.rtol, atol=args.atol)


def cmd_eval_intensity(args) -> int:
    bundle = load_checkpoint(args.ckpt)
    splits = _load_dataset(args.data)
    process = _dataset_process(args.data)
    if process is None:
        raise DataError("eval-intensity needs a synthetic dataset with a process manifest")
    solver = _solver_from_args(args)
    out = Path(args.out)
    write_manifest(out, "eval-intensity", vars(args))
    log = None if args.quiet else (lambda rec: print(f"  seq {rec['sequence']}", flush=True))
    report, records = evaluation.evaluate_intensity_recovery(
        bundle, process, splits["test"], splits["train"], g=args.grid, solver=solver,
        limit=args.limit, baseline_limit=args.baseline_limit, log_fn=log,
    )
    evaluation.save_snapshots(out / "snapshots.npz", records)
    (out / "intensity_report.json").write_text(json.dumps(report, indent=2))
    print(json.dumps({k: report[k] for k in ("model", "constant_baseline")}, indent=2,
                     default=str))
    return 0


_TASK_COMMANDS = {
    "predict": lambda a: "next",
    "impute": lambda a: f"impute-random-{a.ratio}",
    "recover": lambda a: f"recover-block-{a.length}",
    "forecast": lambda a: f"forecast-{a.mode}-{a.horizon}",
}


def cmd_task(args) -> int:
    task_name = args.task if args.command == "eval" else _TASK_COMMANDS[args.command](args)
    splits = _load_dataset(args.data)
    bundle = load_checkpoint(args.ckpt) if args.predictor == "arch" else None
    out = Path(args.out)
    write_manifest(out, args.command, vars(args))
    reports = []
    for seed in args.seeds:
        rep = evaluation.run_task(
            task_name, args.predictor, splits["test"], splits["train"], bundle,
            seed=seed, n_euler_steps=args.steps, m_samples=args.samples,
        )
        rep.meta["checkpoint"] = str(args.ckpt) if bundle else None
        rep.to_json(out / f"task_{task_name}_{args.predictor}_seed{seed}.json")
        reports.append(rep)
        print(f"{task_name} [{args.predictor}] seed {seed}: temporal RMSE "
              f"{rep.temporal_rmse:.4f}, spatial {rep.spatial_dist:.4f}")
    agg = {
        "task": task_name,
        "predictor": args.predictor,
        "seeds": list(args.seeds),
        "temporal_rmse_mean": float(np.mean([r.temporal_rmse for r in reports])),
        "temporal_rmse_std": float(np.std([r.temporal_rmse for r in reports])),
        "spatial_dist_mean": float(np.mean([r.spatial_dist for r in reports])),
        "spatial_dist_std": float(np.std([r.spatial_dist for r in reports])),
    }
    (out / f"summary_{task_name}_{args.predictor}.json").write_text(json.dumps(agg, indent=2))
    print(json.dumps(agg, indent=2))
    return 0


def cmd_plot(args) -> int:
    written = plots.plot_snapshots(args.snapshots, args.out, max_sequences=args.max_sequences)
    print(f"wrote {len(written)} figure(s) under {args.out}")
    return 0


def cmd_report(args) -> int:
    src = Path(args.dir)
    rows = []
    for path in sorted(src.rglob("task_*.json")):
        rep = evaluation.TaskReport.from_json(path)
        rows.append({"task": rep.task, "predictor": rep.predictor,
                     "temporal_rmse": rep.temporal_rmse, "spatial_dist": rep.spatial_dist,
                     "seed": rep.meta.get("seed", 0)})
    if not rows:
        raise DataError(f"no task reports found under {src}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "report", vars(args))

    groups: dict[tuple, dict] = {}
    for r in rows:
        g = groups.setdefault((r["task"], r["predictor"]), {"temporal": [], "spatial": []})
        g["temporal"].append(r["temporal_rmse"])
        g["spatial"].append(r["spatial_dist"])
    table = []
    for (task, predictor), g in sorted(groups.items()):
        table.append({
            "task": task, "predictor": predictor,
            "temporal_rmse": float(np.mean(g["temporal"])),
            "temporal_std": float(np.std(g["temporal"])),
            "spatial_dist": float(np.mean(g["spatial"])),
            "spatial_std": float(np.std(g["spatial"])),
            "n_runs": len(g["temporal"]),
        })
    csv_path = out / "report.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(table[0].keys()))
        writer.writeheader()
        writer.writerows(table)
    txt = [f"{'task':24s} {'model':10s} {'spatial':>18s} {'temporal':>18s}  runs"]
    for row in table:
        txt.append(
            f"{row['task']:24s} {row['predictor']:10s} "
            f"{row['spatial_dist']:9.4f} +-{row['spatial_std']:6.4f} "
            f"{row['temporal_rmse']:9.4f} +-{row['temporal_std']:6.4f}  {row['n_runs']}"
        )
    (out / "report.txt").write_text("\n".join(txt) + "\n")
    plots.plot_report_bars(table, out / "report.png")
    print("\n".join(txt))
    print(f"report written to {csv_path}, {out / 'report.txt'}, {out / 'report.png'}")
    return 0


# ------------------------------------------------------------------ parser


def _add_solver_args(p):
    p.add_argument("--solver", default="dopri5", choices=["dopri5", "rk4", "euler"])
    p.add_argument("--budget", type=int, default=20)
    p.add_argument("--rtol", type=float, default=1e-5)
    p.add_argument("--atol", type=float, default=1e-8)


def _add_task_args(p):
    p.add_argument("--ckpt", default=_env_default("STFLOW_CKPT"))
    p.add_argument("--data", default=_env_default("STFLOW_DATA"), required=_env_default("STFLOW_DATA") is None)
    p.add_argument("--out", default=_env_default("STFLOW_OUT"), required=_env_default("STFLOW_OUT") is None)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--steps", type=int, default=10, help="Euler steps for generation")
    p.add_argument("--samples", type=int, default=1, help="samples averaged per prediction")
    p.add_argument("--predictor", default="arch", help="arch | hpp | knn-<k>")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stflow", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--process", required=True, choices=["sthp", "stsc"])
    p.add_argument("--out", default=_env_default("STFLOW_OUT"), required=_env_default("STFLOW_OUT") is None)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-val", type=int, default=200)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ingest", help="convert a raw benchmark drop")
    p.add_argument("--name", required=True, choices=sorted(ingest.BENCHMARKS))
    p.add_argument("--raw", required=True)
    p.add_argument("--out", default=_env_default("STFLOW_OUT"), required=_env_default("STFLOW_OUT") is None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train the velocity model")
    p.add_argument("--data", default=_env_default("STFLOW_DATA"), required=_env_default("STFLOW_DATA") is None)
    p.add_argument("--out", default=_env_default("STFLOW_OUT"), required=_env_default("STFLOW_OUT") is None)
    p.add_argument("--config", help="JSON file with 'train' and 'model' blocks")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, dest="batch_size", default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    for name, helptext in (
        ("predict", "next-event prediction"),
        ("impute", "recover randomly missing events"),
        ("recover", "recover a contiguous block of events"),
        ("forecast", "forecast a trajectory of future events"),
        ("eval", "run an arbitrary named task"),
    ):
        p = sub.add_parser(name, help=helptext)
        _add_task_args(p)
        if name == "impute":
            p.add_argument("--ratio", type=float, default=0.2)
        if name == "recover":
            p.add_argument("--length", type=int, default=5)
        if name == "forecast":
            p.add_argument("--horizon", type=int, default=5)
            p.add_argument("--mode", choices=["joint", "ar"], default="joint")
        if name == "eval":
            p.add_argument("--task", required=True)
        p.set_defaults(func=cmd_task)

    p = sub.add_parser("eval-intensity", help="intensity recovery vs ground truth")
    p.add_argument("--ckpt", default=_env_default("STFLOW_CKPT"), required=_env_default("STFLOW_CKPT") is None)
    p.add_argument("--data", default=_env_default("STFLOW_DATA"), required=_env_default("STFLOW_DATA") is None)
    p.add_argument("--out", default=_env_default("STFLOW_OUT"), required=_env_default("STFLOW_OUT") is None)
    p.add_argument("--grid", type=int, default=8)
    p.add_argument("--limit", type=int, default=None, help="cap on test sequences")
    p.add_argument("--baseline-limit", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    _add_solver_args(p)
    p.set_defaults(func=cmd_eval_intensity)

    p = sub.add_parser("plot", help="render intensity heatmaps from snapshots")
    p.add_argument("--snapshots", required=True)
    p.add_argument("--out", default=_env_default("STFLOW_OUT"), required=_env_default("STFLOW_OUT") is None)
    p.add_argument("--max-sequences", type=int, default=8)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("report", help="aggregate task reports into tables")
    p.add_argument("--dir", required=True)
    p.add_argument("--out", default=_env_default("STFLOW_OUT"), required=_env_default("STFLOW_OUT") is None)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"argument error: {exc}", file=sys.stderr)
        return EXIT_ARGUMENT
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (IntegrationError, SimulationIntegrityError) as exc:
        print(f"integration error: {exc}", file=sys.stderr)
        return EXIT_INTEGRATION
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except StflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
