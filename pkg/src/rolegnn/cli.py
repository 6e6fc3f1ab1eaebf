"""Command-line surface: validate, roundtrip, demo-gsl, synth, train, eval,
export-structure.

Every run prints exactly one JSON report to stdout (and writes it next to the
other outputs when an output directory is involved). Exit codes: 0 success,
2 usage, 3 invalid bundle, 4 incompatible checkpoint/schema/roles, 5 failed
round-trip, 6 divergence, 7 other engine error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import synth
from .config import DEFAULTS, default_seed
from .errors import (BundleError, CheckpointMismatch, EngineError, RoleError,
                     TrainingDiverged)
from .model import ModelConfig
from .rdb import canonical_form, ingest_bundle, load_task, validate_fd
from .schema_graph import (RoleAssignment, build_schema_graph, construct_reg,
                           demo_add_counterexample, demo_prune_counterexample,
                           enumerate_edge_triples, enumerate_pruning_maps,
                           invert_reg)
from .training import (TrainConfig, build_state, dataset_digest, evaluate,
                       export_structure, train, transfer_structure)

EXIT_BUNDLE = 3
EXIT_INCOMPATIBLE = 4
EXIT_ROUNDTRIP = 5
EXIT_DIVERGED = 6
EXIT_ENGINE = 7

TRAIN_FLAGS = {
    "lr": float, "channels": int, "layers": int, "dropout": float,
    "neighbor_samples": int, "beta": float, "gamma": float, "alpha": float,
    "mu": float, "tau": float, "negatives": int, "epochs": int,
    "batch_size": int, "seed": int,
}


def _emit_report(report: dict, out_dir: Path | None) -> None:
    text = json.dumps(report, indent=2, default=str)
    print(text)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "run_report.json", "w", encoding="utf-8") as fh:
            fh.write(text)


def _base_report(command: str, seed: int, config: dict) -> dict:
    return {"command": command, "seed": seed, "config": config,
            "started_unix": time.time()}


def _resolve_config(args: argparse.Namespace) -> dict:
    """flags > --config file > defaults."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            cfg.update(json.load(fh))
    for name in TRAIN_FLAGS:
        val = getattr(args, name, None)
        if val is not None:
            cfg[name] = val
    if cfg.get("seed") is None:
        cfg["seed"] = default_seed()
    return cfg


def _edge_list(g) -> list:
    return sorted(sorted(e) for e in g[1])


def cmd_validate(args) -> int:
    t0 = time.time()
    db = ingest_bundle(args.bundle)
    violations = validate_fd(db)
    report = _base_report("validate", default_seed(), {})
    report.update({
        "bundle": str(args.bundle),
        "dataset_digest": dataset_digest(db),
        "tables": {n: db.row_count(n) for n in db.table_names},
        "fd_violations": [{"table": v.table, "row": v.row, "column": v.column,
                           "value": v.value} for v in violations],
        "wall_clock_s": time.time() - t0,
    })
    _emit_report(report, None)
    return 0


def cmd_roundtrip(args) -> int:
    t0 = time.time()
    db = ingest_bundle(args.bundle)
    sg = build_schema_graph(db)
    triples = enumerate_edge_triples(sg)
    seed = args.seed if args.seed is not None else default_seed()
    if args.roles == "all-node":
        roles = RoleAssignment.uniform(triples, "node")
    elif args.roles == "all-edge":
        roles = RoleAssignment.uniform(triples, "edge")
    elif args.roles == "random":
        roles = RoleAssignment.random(triples, seed)
    else:
        roles = RoleAssignment.learn_all(triples)
    reg = construct_reg(db, sg, roles)
    rebuilt = invert_reg(reg)
    verdict = canonical_form(rebuilt) == canonical_form(db)
    report = _base_report("roundtrip", seed, {"roles": args.roles})
    report.update({
        "bundle": str(args.bundle),
        "dataset_digest": dataset_digest(db),
        "graph_summary": reg.summary(),
        "verdict": "PASS" if verdict else "FAIL",
        "wall_clock_s": time.time() - t0,
    })
    _emit_report(report, None)
    return 0 if verdict else EXIT_ROUNDTRIP


def cmd_demo_gsl(args) -> int:
    t0 = time.time()
    g1, g2, pruned = demo_prune_counterexample()
    a1, a2, aug = demo_add_counterexample()
    non_identity, collisions = enumerate_pruning_maps()
    print("pruning counterexample:")
    print(f"  original A edges: {_edge_list(g1)}")
    print(f"  original B edges: {_edge_list(g2)}")
    print(f"  both prune to:    {_edge_list(pruned)}  (A != B, images equal)")
    print("addition counterexample:")
    print(f"  original A edges: {_edge_list(a1)}")
    print(f"  original B edges: {_edge_list(a2)}")
    print(f"  both augment to:  {_edge_list(aug)}  (inferred edges untagged)")
    print(f"exhaustive 3-node check: {collisions}/{non_identity} "
          f"non-identity pruning maps collide")
    report = _base_report("demo-gsl", default_seed(), {})
    report.update({
        "prune": {"g1": _edge_list(g1), "g2": _edge_list(g2),
                  "pruned": _edge_list(pruned)},
        "add": {"g1": _edge_list(a1), "g2": _edge_list(a2),
                "augmented": _edge_list(aug)},
        "exhaustive": {"non_identity_maps": non_identity,
                       "maps_with_collision": collisions},
        "wall_clock_s": time.time() - t0,
    })
    _emit_report(report, None)
    return 0 if collisions == non_identity else EXIT_ENGINE


def cmd_synth(args) -> int:
    t0 = time.time()
    params = {}
    for kv in args.params:
        if "=" not in kv:
            raise BundleError(f"synth params must be key=value, got {kv!r}")
        k, v = kv.split("=", 1)
        try:
            params[k] = int(v)
        except ValueError:
            try:
                params[k] = float(v)
            except ValueError:
                params[k] = v
    if args.seed is not None:
        params.setdefault("seed", args.seed)
    params.setdefault("seed", default_seed())
    out = Path(args.output)
    synth.emit(args.generator, params, out)
    db = ingest_bundle(out)
    report = _base_report("synth", int(params["seed"]),
                          {"generator": args.generator, "params": params})
    report.update({
        "output": str(out),
        "dataset_digest": dataset_digest(db),
        "tables": {n: db.row_count(n) for n in db.table_names},
        "wall_clock_s": time.time() - t0,
    })
    _emit_report(report, out)
    return 0


def _model_and_train_cfg(cfg: dict) -> tuple[ModelConfig, TrainConfig]:
    mcfg = ModelConfig(channels=int(cfg["channels"]), layers=int(cfg["layers"]),
                       dropout=float(cfg["dropout"]), alpha=float(cfg["alpha"]),
                       mu=float(cfg["mu"]), cat_dim=int(cfg["cat_dim"]),
                       seed=int(cfg["seed"]))
    tcfg = TrainConfig(epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]),
                       lr=float(cfg["lr"]), beta=float(cfg["beta"]),
                       gamma=float(cfg["gamma"]), alpha=float(cfg["alpha"]),
                       mu=float(cfg["mu"]), tau=float(cfg["tau"]),
                       negatives=int(cfg["negatives"]),
                       neighbor_samples=int(cfg["neighbor_samples"]),
                       seed=int(cfg["seed"]), patience=int(cfg["patience"]),
                       subspace_dim=int(cfg["subspace_dim"]))
    return mcfg, tcfg


def cmd_train(args) -> int:
    t0 = time.time()
    cfg = _resolve_config(args)
    db = ingest_bundle(args.bundle)
    task = load_task(args.task, db)
    mcfg, tcfg = _model_and_train_cfg(cfg)
    out_dir = Path(args.output) if args.output else None
    if args.transfer_from:
        summary = transfer_structure(args.transfer_from, db, task, mcfg, tcfg,
                                     out_dir=out_dir)
    else:
        state = build_state(db, task, mcfg, tcfg, roles_mode=args.roles)
        summary = train(state, out_dir=out_dir, quiet=args.quiet)
    report = _base_report("train", int(cfg["seed"]), cfg)
    report.update({
        "bundle": str(args.bundle),
        "task": task.name,
        "roles": args.roles if not args.transfer_from else "transfer",
        "dataset_digest": dataset_digest(db),
        "best_val_metric": summary["best_val_metric"],
        "metric_name": summary["metric_name"],
        "epochs_run": summary["epochs_run"],
        "structure_path": summary.get("structure_path"),
        "checkpoint": summary.get("checkpoint"),
        "wall_clock_s": time.time() - t0,
    })
    _emit_report(report, out_dir)
    return 0


def cmd_eval(args) -> int:
    t0 = time.time()
    db = ingest_bundle(args.bundle)
    task = load_task(args.task, db)
    metrics = evaluate(args.checkpoint, db, task, args.split)
    report = _base_report("eval", default_seed(), {"split": args.split})
    report.update({
        "checkpoint": str(args.checkpoint),
        "bundle": str(args.bundle),
        "task": task.name,
        "dataset_digest": dataset_digest(db),
        "metrics": metrics,
        "wall_clock_s": time.time() - t0,
    })
    _emit_report(report, None)
    return 0


def cmd_export_structure(args) -> int:
    t0 = time.time()
    report_data = export_structure(args.checkpoint, args.output)
    report = _base_report("export-structure", default_seed(), {})
    report.update({
        "checkpoint": str(args.checkpoint),
        "output": str(args.output),
        "structure": report_data,
        "wall_clock_s": time.time() - t0,
    })
    _emit_report(report, None)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rolegnn",
        description="Relational deep learning with learnable table roles")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="ingest a bundle and report FD checks")
    p.add_argument("bundle")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("roundtrip",
                       help="entity-graph construction + inversion equality")
    p.add_argument("bundle")
    p.add_argument("--roles", default="learn",
                   choices=["learn", "all-node", "all-edge", "random"])
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_roundtrip)

    p = sub.add_parser("demo-gsl",
                       help="pruning/addition invertibility counterexamples")
    p.set_defaults(fn=cmd_demo_gsl)

    p = sub.add_parser("synth", help="emit a synthetic bundle")
    p.add_argument("generator")
    p.add_argument("params", nargs="*", help="key=value generator parameters")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="alternating training run")
    p.add_argument("bundle")
    p.add_argument("task", help="task directory (task.json + task_*.csv)")
    for name, typ in TRAIN_FLAGS.items():
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ,
                       default=None)
    p.add_argument("--roles", default="learn",
                   choices=["learn", "all-node", "all-edge", "random"])
    p.add_argument("--transfer-from", dest="transfer_from", default=None)
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("-o", "--output", default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("checkpoint")
    p.add_argument("bundle")
    p.add_argument("task")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("export-structure",
                       help="write the learned-structure report")
    p.add_argument("checkpoint")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=cmd_export_structure)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except BundleError as exc:
        print(f"bundle error: {exc}", file=sys.stderr)
        return EXIT_BUNDLE
    except (CheckpointMismatch, RoleError) as exc:
        print(f"incompatible inputs: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except TrainingDiverged as exc:
        print(f"diverged: {exc} {exc.diagnostics}", file=sys.stderr)
        return EXIT_DIVERGED
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ENGINE


if __name__ == "__main__":
    sys.exit(main())
