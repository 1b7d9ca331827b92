"""Command line entry point.

Commands: train, eval, clusters, synth, reconcile. Exit codes: 1 for
configuration problems, 2 for data problems, 3 for training divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, default_config
from .data import chrono_split, load_dataset, save_dataset, synth_generate
from .hierarchy import build_C, build_Q, cumulative_selection, load_selections, save_selections
from .metrics import persistence_baseline
from .reconciler import build_projector, coherency_residual, reconcile
from .selector import export_assignments
from .training import evaluate, load_checkpoint, save_checkpoint, train


class DataError(RuntimeError):
    pass


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else default_config()
    cfg.apply_overrides(args.set or [])
    if getattr(args, "seed", None) is not None:
        cfg.set("training", "seed", str(args.seed))
    if getattr(args, "out", None):
        cfg.set("output", "dir", args.out)
    return cfg


def _load_data(path):
    if not path:
        raise DataError("no dataset path configured (set dataset.path or --set)")
    if not Path(path).exists():
        raise DataError(f"dataset directory {path} does not exist")
    return load_dataset(path)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    dataset = _load_data(cfg.get("dataset", "path"))
    out_dir = Path(cfg.get("output", "dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config_used.cfg")

    level_sizes = cfg.level_sizes(dataset.n_nodes)
    model_cfg = cfg.model_config(dataset.n_nodes)
    result = train(dataset, model_cfg, cfg.train_config(), cfg.loss_weights(),
                   level_sizes, cfg.anneal())

    with open(out_dir / "epochs.jsonl", "w") as fh:
        for record in result.history:
            fh.write(json.dumps(record.to_dict()) + "\n")
    save_checkpoint(out_dir / "checkpoint.npz", result, model_cfg)
    save_selections(out_dir / "clusters.txt", export_assignments(result.trained.selector))
    if result.diverged:
        print("training diverged; last good checkpoint written", file=sys.stderr)
        return 3

    report = evaluate(result.trained, dataset, "test", result.train_config)
    pers = persistence_baseline(dataset, _test_span(dataset, cfg, model_cfg),
                                model_cfg.window, model_cfg.horizon)
    payload = {"test": report.to_dict(), "persistence": pers.to_dict(),
               "best_epoch": result.best_epoch, "best_val_mae": result.best_val_mae}
    (out_dir / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def _test_span(dataset, cfg: RunConfig, model_cfg):
    return chrono_split(dataset.n_steps, cfg.get("training", "split"),
                        model_cfg.window, model_cfg.horizon)[2]


def cmd_eval(args) -> int:
    result = load_checkpoint(args.checkpoint)
    dataset = _load_data(args.data)
    report = evaluate(result.trained, dataset, args.split, result.train_config,
                      mae_steps=args.mae_steps or ())
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def cmd_clusters(args) -> int:
    result = load_checkpoint(args.checkpoint)
    selections = export_assignments(result.trained.selector)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_selections(out_dir / "assignments.txt", selections)

    dataset = _load_data(args.data)
    if dataset.n_nodes != selections[0].n_in:
        raise DataError(f"dataset has {dataset.n_nodes} nodes, checkpoint expects {selections[0].n_in}")
    columns: dict[str, np.ndarray] = {}
    for level in range(1, len(selections) + 1):
        members = cumulative_selection(selections, level)  # (N, N_k)
        for c in range(members.shape[1]):
            series = dataset.values[:, members[:, c] > 0]
            if series.shape[1] == 0:
                continue
            tag = f"level{level}_c{c}"
            columns[f"{tag}_median"] = np.median(series, axis=1)
            columns[f"{tag}_q40"] = np.quantile(series, 0.4, axis=1)
            columns[f"{tag}_q60"] = np.quantile(series, 0.6, axis=1)
    header = ",".join(columns)
    body = np.column_stack(list(columns.values()))
    np.savetxt(out_dir / "aggregates.csv", body, delimiter=",", header=header, comments="")
    print(f"wrote {out_dir / 'assignments.txt'} and {out_dir / 'aggregates.csv'}")
    return 0


def cmd_synth(args) -> int:
    dataset = synth_generate(args.clusters, args.nodes_per_cluster, args.steps,
                             args.noise, args.seed)
    save_dataset(args.out, dataset)
    print(f"wrote synthetic dataset ({dataset.n_nodes} nodes, {dataset.n_steps} steps) to {args.out}")
    return 0


def cmd_reconcile(args) -> int:
    forecast = np.loadtxt(args.forecast, delimiter=",", ndmin=2)
    selections = load_selections(args.hierarchy)
    Q = build_Q(build_C(selections)).astype(np.float64)
    total = selections[0].n_in + sum(s.n_out for s in selections)
    if forecast.shape[0] != total:
        raise DataError(f"forecast has {forecast.shape[0]} rows, hierarchy implies {total}")
    projector = build_projector(Q)
    before = coherency_residual(Q, forecast)
    reconciled = reconcile(forecast, projector)
    after = coherency_residual(Q, reconciled)
    np.savetxt(args.out, reconciled, delimiter=",")
    report = {"residual_before": before, "residual_after": after}
    print(json.dumps(report, indent=2))
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2) + "\n")
    return 0


def _add_common(sub):
    sub.add_argument("--config", help="config file (defaults used when omitted)")
    sub.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                     help="override a config value")
    sub.add_argument("--seed", type=int, help="override training.seed")
    sub.add_argument("--out", help="override output.dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierts",
                                     description="hierarchical graph-based time series forecasting")
    parser.add_argument("--dump-defaults", action="store_true",
                        help="print the default configuration and exit")
    sub = parser.add_subparsers(dest="command")

    p_train = sub.add_parser("train", help="train a model and report test metrics")
    _add_common(p_train)
    p_train.set_defaults(func=cmd_train)

    det = "accepted for uniformity; this command is deterministic"
    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--split", default="test", choices=("train", "val", "test"))
    p_eval.add_argument("--mae-steps", type=int, nargs="*", default=None)
    p_eval.add_argument("--seed", type=int, help=det)
    p_eval.add_argument("--out", help="also write the report to this file")
    p_eval.set_defaults(func=cmd_eval)

    p_cl = sub.add_parser("clusters", help="export learned assignments and cluster aggregates")
    p_cl.add_argument("--checkpoint", required=True)
    p_cl.add_argument("--data", required=True)
    p_cl.add_argument("--out", required=True)
    p_cl.add_argument("--seed", type=int, help=det)
    p_cl.set_defaults(func=cmd_clusters)

    p_sy = sub.add_parser("synth", help="generate a synthetic clustered dataset")
    p_sy.add_argument("--out", required=True)
    p_sy.add_argument("--clusters", type=int, default=3)
    p_sy.add_argument("--nodes-per-cluster", type=int, default=10)
    p_sy.add_argument("--steps", type=int, default=2000)
    p_sy.add_argument("--noise", type=float, default=0.25)
    p_sy.add_argument("--seed", type=int, default=0)
    p_sy.set_defaults(func=cmd_synth)

    p_rc = sub.add_parser("reconcile", help="project a forecast file onto the coherent subspace")
    p_rc.add_argument("--forecast", required=True, help="CSV, one stacked series per row")
    p_rc.add_argument("--hierarchy", required=True, help="selection file, node:cluster per level")
    p_rc.add_argument("--out", required=True)
    p_rc.add_argument("--report", help="also write the residual report to this file")
    p_rc.add_argument("--seed", type=int, help=det)
    p_rc.set_defaults(func=cmd_reconcile)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.dump_defaults:
        print(default_config().dump(), end="")
        return 0
    if not getattr(args, "command", None):
        parser.print_help()
        return 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
