"""Command-line entry point for the full experiment lifecycle.

Subcommands: prepare, train, eval, count-params, analyze-activations,
analyze-assignments, ablate. Exit codes: 0 success, 1 usage error, 2 data
error, 3 numeric failure. The MOELAB_SEED environment variable overrides the
configured seed.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import (Experiment, count_parameters, parse_config,
                     serialize_config, with_seed)
from .data import ByteTokenizer, TokenShard, load_eval_set, prepare
from .errors import ConfigError, DataError, MoelabError, NumericError, RoutingError
from .telemetry import (assignment_profile, downsample_columns, read_activations,
                        render_heatmap, write_profiles)
from .train import TrainRun, evaluate, run_experiment


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # exit 1, not argparse's 2
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="moelab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="tokenize a text corpus into shards")
    p.add_argument("--corpus", required=True, help="directory of UTF-8 .txt files")
    p.add_argument("--out", required=True, help="output directory for train.bin/val.bin")
    p.add_argument("--labels", action="store_true",
                   help="corpus has one subdirectory per language code")
    p.add_argument("--split", type=float, default=0.9, help="train fraction")

    p = sub.add_parser("train", help="train a model into a run directory")
    p.add_argument("--config", required=True, help="config file")
    p.add_argument("--run", required=True, help="run name")
    p.add_argument("--runs-dir", default="runs")
    p.add_argument("--data", required=True, help="directory with train.bin/val.bin")
    p.add_argument("--force", action="store_true", help="overwrite an existing run")
    p.add_argument("--eval-batches", type=int, default=8)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory with val.bin")
    p.add_argument("--eval-batches", type=int, default=8)

    p = sub.add_parser("count-params", help="print total/active parameter counts")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("analyze-activations",
                       help="render expert-activation history as an SVG heatmap")
    p.add_argument("--run", required=True)
    p.add_argument("--runs-dir", default="runs")
    p.add_argument("--out", required=True, help="output .svg path")

    p = sub.add_parser("analyze-assignments",
                       help="expert-assignment profiles over an evaluation set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eval-set", required=True, help="setname/category/*.txt tree")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("ablate", help="expand a grid file into runs and a results table")
    p.add_argument("--grid", required=True, help="key = v1,v2,... grid file")
    p.add_argument("--runs", required=True, help="directory for the expanded runs")
    p.add_argument("--data", required=True, help="directory with train.bin/val.bin")
    p.add_argument("--force", action="store_true")
    p.add_argument("--eval-batches", type=int, default=8)
    p.add_argument("--jobs", type=int, default=1, help="parallel runs")
    return parser


def _load_experiment(config_path: str, overrides: list[str]) -> Experiment:
    text = Path(config_path).read_text(encoding="utf-8")
    experiment = parse_config(text, overrides=tuple(overrides))
    env_seed = os.environ.get("MOELAB_SEED")
    if env_seed is not None:
        experiment = with_seed(experiment, int(env_seed))
    return experiment


def _load_shards(data_dir: str) -> tuple[TokenShard, TokenShard]:
    directory = Path(data_dir)
    train_path = directory / "train.bin"
    val_path = directory / "val.bin"
    if not train_path.exists() or not val_path.exists():
        raise DataError(f"{directory}: expected train.bin and val.bin")
    return TokenShard.read(train_path), TokenShard.read(val_path)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def _cmd_prepare(args) -> int:
    train_shard, val_shard = prepare(args.corpus, ByteTokenizer(),
                                     split_fraction=args.split, labeled=args.labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_shard.write(out / "train.bin")
    val_shard.write(out / "val.bin")
    print(f"train: {train_shard.n_documents} docs, {train_shard.n_tokens} tokens")
    print(f"val:   {val_shard.n_documents} docs, {val_shard.n_tokens} tokens")
    return 0


def _cmd_train(args) -> int:
    experiment = _load_experiment(args.config, args.set)
    train_shard, val_shard = _load_shards(args.data)
    run_dir = Path(args.runs_dir) / args.run
    summary = run_experiment(experiment, run_dir, train_shard, val_shard,
                             force=args.force, eval_batches=args.eval_batches,
                             log=print)
    print(f"done: {summary['iterations']} iterations, "
          f"headline perplexity {summary['perplexity']:.4f}")
    print(f"checkpoint: {summary['checkpoint']}")
    return 0


def _cmd_eval(args) -> int:
    run = TrainRun.from_checkpoint(args.checkpoint)
    _, val_shard = _load_shards(args.data)
    result = evaluate(run.model, val_shard, eval_batches=args.eval_batches)
    print(f"cross_entropy {result.cross_entropy:.6f}")
    print(f"perplexity {result.perplexity:.6f}")
    return 0


def _cmd_count_params(args) -> int:
    experiment = _load_experiment(args.config, args.set)
    total, active = count_parameters(experiment.model, experiment.routing)
    print(f"total {total}")
    print(f"active {active}")
    return 0


def _cmd_analyze_activations(args) -> int:
    run_dir = Path(args.runs_dir) / args.run
    csv_path = run_dir / "telemetry" / "activations.csv"
    if not csv_path.exists():
        raise DataError(f"{csv_path}: no activation telemetry found")
    records = read_activations(csv_path)
    if not records:
        raise DataError(f"{csv_path}: empty telemetry")
    layers = sorted({r.layer for r in records})
    iterations = sorted({r.iteration for r in records})
    n_experts = len(records[0].counts)
    index = {(r.iteration, r.layer): r for r in records}
    # rows = (layer, expert), columns = iterations; values are per-iteration
    # selection shares within the layer
    matrix = np.zeros((len(layers) * n_experts, len(iterations)))
    row_labels = []
    for li, layer in enumerate(layers):
        for e in range(n_experts):
            row_labels.append(f"L{layer} E{e}")
        for ci, iteration in enumerate(iterations):
            counts = index[(iteration, layer)].counts.astype(np.float64)
            share = counts / counts.sum() if counts.sum() else counts
            matrix[li * n_experts:(li + 1) * n_experts, ci] = share
    reduced = downsample_columns(matrix)
    factor = -(-len(iterations) // reduced.shape[1])  # group width after downsampling
    col_labels = [str(iterations[min(c * factor, len(iterations) - 1)])
                  for c in range(reduced.shape[1])]
    svg = render_heatmap(reduced, row_labels=row_labels, col_labels=col_labels,
                         title=f"expert activation share: {args.run}",
                         legend_label="share")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg)
    print(f"wrote {out}")
    return 0


def _cmd_analyze_assignments(args) -> int:
    run = TrainRun.from_checkpoint(args.checkpoint)
    eval_set = load_eval_set(args.eval_set, ByteTokenizer(),
                             context_length=run.experiment.model.context_length)
    profiles = assignment_profile(run.model, eval_set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_profiles(out / "profiles.csv", profiles)
    n_experts = profiles[0].mass.shape[1]
    uniform = 1.0 / n_experts
    with open(out / "specialization.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["category", "tv_distance_from_uniform"])
        for prof in profiles:
            mean_mass = prof.mass.mean(axis=0)
            tv = 0.5 * float(np.abs(mean_mass - uniform).sum())
            writer.writerow([prof.category, repr(tv)])
    for prof in profiles:
        stacked = np.vstack([prof.mass, prof.mass.mean(axis=0, keepdims=True)])
        rows = [f"L{i}" for i in range(prof.mass.shape[0])] + ["mean"]
        svg = render_heatmap(stacked, row_labels=rows,
                             col_labels=[f"E{e}" for e in range(n_experts)],
                             title=f"assignment: {prof.category}",
                             legend_label="mass")
        (out / f"{prof.category}.svg").write_text(svg)
    print(f"wrote {len(profiles)} profiles to {out}")
    return 0


# --------------------------------------------------------------------------
# Grid ablation
# --------------------------------------------------------------------------

def expand_grid(text: str) -> list[tuple[str, str]]:
    """Expand a grid document into (cell_name, cell_config_text) pairs.

    Grid files use the flat config grammar with comma-separated value lists;
    expansion is the Cartesian product in file order. `language_map` values
    keep their commas and cannot be varied.
    """
    keys: list[str] = []
    options: list[list[str]] = []
    for raw_line in text.splitlines():
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"grid line is not key = value: {raw_line.strip()!r}")
        key = key.strip()
        values = [value.strip()] if key == "language_map" else \
            [v.strip() for v in value.split(",")]
        keys.append(key)
        options.append(values)
    varying = [i for i, vals in enumerate(options) if len(vals) > 1]
    cells = []
    for combo in itertools.product(*options):
        if varying:
            name = "_".join(f"{keys[i]}-{combo[i]}" for i in varying)
        else:
            name = "base"
        body = "\n".join(f"{k} = {v}" for k, v in zip(keys, combo)) + "\n"
        cells.append((name, body))
    return cells


def _run_cell(cell: tuple[str, str], runs_dir: str, data_dir: str,
              eval_batches: int, force: bool) -> dict:
    name, body = cell
    experiment = parse_config(body)
    env_seed = os.environ.get("MOELAB_SEED")
    if env_seed is not None:
        experiment = with_seed(experiment, int(env_seed))
    train_shard, val_shard = _load_shards(data_dir)
    summary = run_experiment(experiment, Path(runs_dir) / name, train_shard,
                             val_shard, force=force, eval_batches=eval_batches)
    total, active = count_parameters(experiment.model, experiment.routing)
    routing = experiment.routing
    return {
        "run": name,
        "n_experts": routing.n_experts if routing else "",
        "top_k": routing.top_k if routing else "",
        "unit": routing.unit if routing else "",
        "scope": routing.scope if routing else "",
        "strategy": routing.strategy if routing else "",
        "lambda_balance": routing.lambda_balance if routing else "",
        "ffn_width_multiplier": experiment.model.ffn_width_multiplier,
        "total_params": total,
        "active_params": active,
        "val_perplexity": summary["perplexity"],
    }


def _cmd_ablate(args) -> int:
    cells = expand_grid(Path(args.grid).read_text(encoding="utf-8"))
    runs_dir = Path(args.runs)
    runs_dir.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_run_cell, cell, str(runs_dir), args.data,
                                   args.eval_batches, args.force)
                       for cell in cells]
            rows = [f.result() for f in futures]
    else:
        for cell in cells:
            print(f"running {cell[0]}", file=sys.stderr)
            rows.append(_run_cell(cell, str(runs_dir), args.data,
                                  args.eval_batches, args.force))
    results_path = runs_dir / "results.csv"
    with open(results_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()),
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {results_path}")
    return 0


_COMMANDS = {
    "prepare": _cmd_prepare,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "count-params": _cmd_count_params,
    "analyze-activations": _cmd_analyze_activations,
    "analyze-assignments": _cmd_analyze_assignments,
    "ablate": _cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, RoutingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
