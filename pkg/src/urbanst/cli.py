"""``urbanst`` command line: batch workflows over the dataset/checkpoint containers."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from contextlib import nullcontext
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import curate, load_dataset, read_coords_csv, read_csv_dataset, read_descriptor, save_dataset
from .errors import ConfigError, UrbanSTError
from .evaluation import (
    FoundationModel,
    HistoricalAverage,
    KNNImputer,
    MeanImputer,
    ProtocolSpec,
    TASKS,
    format_table,
    run_protocol,
    write_reports_csv,
)
from .graph import gaussian_threshold_graph, load_adjacency, moore_grid_graph, save_adjacency
from .model import ModelConfig, init_model, load_checkpoint, save_checkpoint
from .synthetic import grid_sinusoids, random_walks, ring_sinusoids
from .tokenizer import FILL_MODES, cluster_dataset, save_plan
from .trainer import TrainConfig, TrainingSet, finetune_fewshot, parse_config_entries, train

logger = logging.getLogger("urbanst")

MANIFEST_NAME = "manifest.json"


def _write_manifest(args, outputs: list[str], started: float) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = {}
    for key in ("dataset", "checkpoint", "csv", "coords", "adjacency"):
        value = getattr(args, key, None)
        if value:
            inputs[key] = [str(v) for v in value] if isinstance(value, list) else str(value)
    manifest = {
        "command": args.command,
        "argv": args.argv,
        "config": str(getattr(args, "config", None) or ""),
        "seed": getattr(args, "seed", None),
        "inputs": inputs,
        "outputs": sorted(outputs),
        "tool_version": __version__,
        "started_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "wall_clock_s": round(time.time() - started, 3),
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")


def _load_configs(path: str | None, seed: int) -> tuple[ModelConfig, TrainConfig]:
    entries = read_descriptor(Path(path)) if path else {}
    entries["seed"] = str(seed)
    return ModelConfig.from_dict(entries), parse_config_entries(entries)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> list[str]:
    if args.kind == "sinusoid":
        periods = tuple(float(p) for p in args.periods.split(","))
        x, mask = ring_sinusoids(args.nodes, args.steps, periods, args.noise, args.seed, name=args.name)
    elif args.kind == "grid":
        periods = tuple(float(p) for p in args.periods.split(","))
        x, mask = grid_sinusoids(args.width, args.height, args.steps, periods, args.noise, args.seed,
                                 name=args.name)
    else:
        x, mask = random_walks(args.nodes, args.steps, args.noise, args.seed, name=args.name)
    save_dataset(args.out, x, mask)
    return ["descriptor.txt", "values.f32le", "mask.u8"]


def cmd_ingest(args) -> list[str]:
    coords = read_coords_csv(args.coords) if args.coords else None
    grid = tuple(args.grid) if args.grid else None
    x, mask = read_csv_dataset(args.csv, coords=coords, grid_shape=grid, name=args.name)
    x, mask, kept = curate(x, mask, args.target_dt, args.agg, args.eps, args.max_gap)
    save_dataset(args.out, x, mask)
    Path(args.out, "kept_nodes.txt").write_text("\n".join(str(k) for k in kept) + "\n")
    return ["descriptor.txt", "values.f32le", "mask.u8", "kept_nodes.txt"]


def cmd_graph(args) -> list[str]:
    x, _ = load_dataset(args.dataset)
    if args.kind == "moore":
        if x.format != "grid":
            raise ConfigError("moore graphs need a grid dataset")
        adj = moore_grid_graph(*x.grid_shape)
    else:
        adj = gaussian_threshold_graph(x.coords, args.r)
    save_adjacency(args.out, adj)
    return ["adjacency.txt", "adjacency.f32le"]


def cmd_cluster(args) -> list[str]:
    x, _ = load_dataset(args.dataset)
    plan = cluster_dataset(x, args.sp, args.fill_mode)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    save_plan(Path(args.out) / "plan.txt", plan)
    return ["plan.txt"]


def cmd_pretrain(args) -> list[str]:
    model_cfg, train_cfg = _load_configs(args.config, args.seed)
    sets = []
    for path in args.dataset:
        x, mask = load_dataset(path)
        if x.n_channels != model_cfg.C:
            raise ConfigError(f"{path}: {x.n_channels} channels, model expects C={model_cfg.C}")
        sets.append(TrainingSet.from_tensor(x, mask, cluster_dataset(x, model_cfg.S_p)))
    state = init_model(model_cfg, args.seed, train_cfg.float_dtype)
    state, history = train(state, sets, train_cfg)
    out = Path(args.out)
    save_checkpoint(out / "checkpoint", state)
    history.to_csv(out / "loss.csv")
    return ["checkpoint", "loss.csv"]


def cmd_finetune(args) -> list[str]:
    state = load_checkpoint(args.checkpoint)
    _, train_cfg = _load_configs(args.config, args.seed)
    x, mask = load_dataset(args.dataset)
    data = TrainingSet.from_tensor(x, mask, cluster_dataset(x, state.config.S_p))
    state, history = finetune_fewshot(state, data, train_cfg, args.fraction)
    out = Path(args.out)
    save_checkpoint(out / "checkpoint", state)
    history.to_csv(out / "loss.csv")
    return ["checkpoint", "loss.csv"]


def cmd_evaluate(args) -> list[str]:
    x, mask = load_dataset(args.dataset)
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint)
        subject = FoundationModel(state, cluster_dataset(x, state.config.S_p))
    elif args.baseline == "ha":
        subject = HistoricalAverage()
    elif args.baseline == "mean":
        subject = MeanImputer()
    else:
        if args.adjacency:
            adj = load_adjacency(args.adjacency)
        elif x.format == "grid":
            adj = moore_grid_graph(*x.grid_shape)
        else:
            adj = gaussian_threshold_graph(x.coords, args.r)
        subject = KNNImputer(adj, args.k)
    _, train_cfg = _load_configs(args.config, args.seed)
    spec = ProtocolSpec.named(args.protocol, args.shot)
    report = run_protocol(subject, x, mask, spec, args.seed, train_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_reports_csv(out / "metrics.csv", [report])
    (out / "metrics.txt").write_text(format_table([report]))
    print(format_table([report]), end="")
    return ["metrics.csv", "metrics.txt"]


def cmd_gradcheck(args) -> list[str]:
    from .gradcheck import run_suite

    reports = run_suite(args.seed)
    lines = [r.line() for r in reports]
    print("\n".join(lines))
    args.failed = not all(r.passed for r in reports)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        Path(args.out, "gradcheck.txt").write_text("\n".join(lines) + "\n")
        return ["gradcheck.txt"]
    return []


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="urbanst", description=__doc__)
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a seeded synthetic dataset")
    p.add_argument("--kind", choices=("sinusoid", "grid", "random_walk"), default="sinusoid")
    p.add_argument("--nodes", type=int, default=32)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--height", type=int, default=4)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--periods", default="24,168")
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--name", default="synthetic")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="CSV files -> curated dataset directory")
    p.add_argument("--csv", action="append", required=True, help="one file per channel")
    p.add_argument("--coords", help="node,lat,lon CSV for sensor data")
    p.add_argument("--grid", type=int, nargs=2, metavar=("W", "H"))
    p.add_argument("--name", default="dataset")
    p.add_argument("--target-dt", type=int, default=5)
    p.add_argument("--agg", choices=("mean", "sum"), default="mean")
    p.add_argument("--eps", type=float, default=1e-8)
    p.add_argument("--max-gap", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("graph", help="build a predefined adjacency matrix")
    p.add_argument("--dataset", required=True)
    p.add_argument("--kind", choices=("gaussian", "moore"), default="gaussian")
    p.add_argument("--r", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("cluster", help="capacity-constrained clustering plan")
    p.add_argument("--dataset", required=True)
    p.add_argument("--sp", type=int, default=16)
    p.add_argument("--fill-mode", choices=FILL_MODES, default="binary_mask")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("pretrain", help="masked-reconstruction pre-training")
    p.add_argument("--dataset", action="append", required=True)
    p.add_argument("--config", help="key = value file with model and training fields")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="few-shot fine-tuning on a train-split prefix")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--fraction", type=float, default=0.10)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="run one benchmark protocol")
    who = p.add_mutually_exclusive_group(required=True)
    who.add_argument("--checkpoint")
    who.add_argument("--baseline", choices=("ha", "mean", "knn"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--protocol", choices=TASKS, default="forecast_short")
    p.add_argument("--shot", choices=("zero", "few", "full"), default="zero")
    p.add_argument("--config", help="training fields used by few-shot fine-tuning")
    p.add_argument("--adjacency", help="adjacency directory for the KNN baseline")
    p.add_argument("--r", type=float, default=0.5)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _thread_limit(n: int | None):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        with _thread_limit(args.threads):
            outputs = args.func(args)
    except UrbanSTError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if getattr(args, "out", None):
        _write_manifest(args, outputs, started)
    return 1 if getattr(args, "failed", False) else 0


def dispatch(argv: list[str]) -> int:
    """Run one subcommand; argparse usage errors exit with status 2."""
    try:
        return main(argv)
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
