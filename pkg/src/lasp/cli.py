"""Command line entry points: train, eval, analyze-subsets, sweep."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from . import _kernels
from .data import Dataset
from .errors import ConfigError, LaspError
from .harness import (
    DSRS_SETTINGS,
    METHODS,
    RunConfig,
    analyze_subsets,
    build_streams,
    evaluate,
    load_run_checkpoint,
    load_run_config,
    run_config_from_dict,
    subset_table_rows,
    sweep_embedding_size,
    train_continual,
)
from .memory import ReplayBuffer
from .numerics import make_rng, spawn_rngs


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "method", None) is not None:
        updates["method"] = args.method
    if getattr(args, "dsrs", None) is not None:
        updates["dsrs"] = args.dsrs
    return dataclasses.replace(cfg, **updates) if updates else cfg


def _cmd_train(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    record = train_continual(cfg, out_dir=args.out)
    print(json.dumps(record.final, sort_keys=True))
    return 0


def _cmd_eval(args) -> int:
    cfg = load_run_config(args.config) if args.config else None
    model, meta, buffer = load_run_checkpoint(args.checkpoint, cfg)
    if cfg is None:
        cfg = run_config_from_dict(meta["run_config"])
    data_rng = spawn_rngs(cfg.seed, 1)[0]
    train_stream, test_stream = build_streams(cfg, data_rng)
    result = evaluate(
        model, train_stream, test_stream, buffer, cfg.scenario,
        probe_epochs=cfg.probe_epochs, probe_step_size=cfg.probe_step_size,
    )
    print(json.dumps(result, sort_keys=True))
    return 0


def _cmd_analyze_subsets(args) -> int:
    model, meta, _ = load_run_checkpoint(args.checkpoint)
    cfg = run_config_from_dict(meta["run_config"])
    data_rng = spawn_rngs(cfg.seed, 1)[0]
    train_stream, _ = build_streams(cfg, data_rng)
    boundary = args.boundary
    if not 1 <= boundary < len(train_stream):
        raise ConfigError(
            f"--boundary must lie in [1, {len(train_stream) - 1}] for a {len(train_stream)}-task stream"
        )
    past = Dataset.concatenate([t.data for t in train_stream.tasks[:boundary]])
    future = Dataset.concatenate([t.data for t in train_stream.tasks[boundary:]])
    result = analyze_subsets(
        model, past, future, k=args.k, n_subsets=args.n, rng=make_rng(args.analysis_seed),
        probe_epochs=cfg.probe_epochs, probe_step_size=cfg.probe_step_size,
    )
    for label, value in subset_table_rows(result):
        print(f"{label}: {value:.6f}")
    if result["higher_std_on_future"]:
        print("flag: subset accuracies vary more on future tasks than on past tasks")
    print(json.dumps(result, sort_keys=True))
    return 0


def _cmd_sweep(args) -> int:
    cfg = load_run_config(args.config)
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--sizes must be a comma-separated list of integers: {exc}") from exc
    if not sizes:
        raise ConfigError("--sizes must name at least one embedding size")
    rows = sweep_embedding_size(cfg, sizes, n_seeds=args.seeds, out_dir=args.out)
    for row in rows:
        print(
            f"dim={row['embedding_dim']} method={row['method']} "
            f"acc={row['accuracy_mean']:.4f} +- {row['accuracy_std']:.4f}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lasp", description="Continual contrastive learning harness.")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run continual training from a config file")
    train.add_argument("--config", required=True)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--out", default=None)
    train.add_argument("--method", choices=METHODS, default=None)
    train.add_argument("--dsrs", choices=DSRS_SETTINGS, default=None)
    train.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a saved checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--config", default=None, help="must match the config stored in the checkpoint")
    ev.set_defaults(func=_cmd_eval)

    an = sub.add_parser(
        "analyze-subsets",
        help="random-subset probe analysis of a checkpointed model at a chosen task boundary",
    )
    an.add_argument("--checkpoint", required=True)
    an.add_argument("--k", type=int, default=10)
    an.add_argument("--n", type=int, default=100)
    an.add_argument("--boundary", type=int, default=1, help="tasks before this index count as past")
    an.add_argument("--analysis-seed", type=int, default=0)
    an.set_defaults(func=_cmd_analyze_subsets)

    sw = sub.add_parser("sweep", help="train across embedding sizes and tabulate accuracy")
    sw.add_argument("--config", required=True)
    sw.add_argument("--sizes", required=True, help="comma-separated embedding sizes, e.g. 8,32,128")
    sw.add_argument("--seeds", type=int, default=3)
    sw.add_argument("--out", default=None)
    sw.set_defaults(func=_cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LaspError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
