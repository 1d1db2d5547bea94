"""Experiment command line.

Subcommands: ``prepare`` splits an interaction file, ``train`` runs one
experiment end to end, ``evaluate`` scores a saved checkpoint, ``sweep-k``
retrains across neighborhood sizes, and ``synth`` writes a synthetic
dataset. Exit codes: 0 success, 1 runtime failure, 2 configuration or
input problem.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .evaluation import EvalReport, evaluate_all_ranking
from .graphs import GraphConfig, GraphError, SparseItemGraph, save_graph
from .ingest import (
    IngestError,
    InteractionSet,
    SplitBundle,
    cold_start_split,
    load_interactions,
    load_modality_features,
    save_index_maps,
    save_interactions,
    split_dataset,
)
from .synthetic import SyntheticError, SyntheticSpec, generate_synthetic, write_synthetic
from .training import (
    CheckpointError,
    Pipeline,
    TrainingDivergedError,
    TrainResult,
    compute_item_representations,
    load_checkpoint,
    save_checkpoint,
    save_history,
    train,
    train_mf,
)

_CONFIG_ERRORS = (
    ConfigError,
    IngestError,
    CheckpointError,
    GraphError,
    SyntheticError,
    FileNotFoundError,
    IsADirectoryError,
    PermissionError,
)


def _split_bundle(cfg: ExperimentConfig, interactions: InteractionSet) -> SplitBundle:
    if cfg.min_train_count > 0:
        return cold_start_split(
            interactions, cfg.min_train_count, seed=cfg.seed, ratios=cfg.ratios
        )
    return split_dataset(interactions, ratios=cfg.ratios, seed=cfg.seed)


def _load_experiment_data(cfg: ExperimentConfig):
    if not cfg.interactions:
        raise ConfigError("[data] interactions path is required")
    interactions = load_interactions(cfg.interactions, format=cfg.interactions_format)
    features = []
    if cfg.mode == "full":
        if not cfg.features:
            raise ConfigError("full mode requires [data] features; use mode=mf for the baseline")
        for mod, path in cfg.features.items():
            features.append(
                load_modality_features(
                    path, mod, expected_items=interactions.n_items, max_missing=cfg.max_missing
                )
            )
    return interactions, features


def _write_manifest(
    cfg: ExperimentConfig, out_dir: Path, interactions: InteractionSet, result: TrainResult
) -> None:
    manifest = {
        "package_version": __version__,
        "numpy_version": np.__version__,
        "scipy_version": scipy.__version__,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "mode": result.mode,
        "seed": cfg.seed,
        "n_users": interactions.n_users,
        "n_items": interactions.n_items,
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.history),
        "stopped_early": result.stopped_early,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _run_training(cfg: ExperimentConfig):
    interactions, features = _load_experiment_data(cfg)
    splits = _split_bundle(cfg, interactions)
    if cfg.mode == "mf":
        result = train_mf(splits, cfg.train)
    else:
        result = train(splits, features, cfg.graph, cfg.train)
    return interactions, features, splits, result


def _report_for(
    cfg: ExperimentConfig, splits: SplitBundle, result: TrainResult
) -> EvalReport:
    return evaluate_all_ranking(
        result.params.user_emb,
        result.item_representations,
        splits,
        ks=cfg.ks,
        which=cfg.eval_which,
        seed=cfg.seed,
    )


def cmd_prepare(args: argparse.Namespace) -> int:
    interactions = load_interactions(args.interactions, format=args.format)
    ratios = tuple(float(x) for x in args.ratios.split(","))
    if args.min_train_count > 0:
        splits = cold_start_split(interactions, args.min_train_count, seed=args.seed, ratios=ratios)
    else:
        splits = split_dataset(interactions, ratios=ratios, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_interactions(splits.train, out / "train.csv")
    if splits.validation.n_records:
        save_interactions(splits.validation, out / "validation.csv")
    save_interactions(splits.test, out / "test.csv")
    save_index_maps(interactions, out / "index_maps.json")
    meta = {
        "seed": args.seed,
        "ratios": list(ratios),
        "min_train_count": args.min_train_count,
        "n_users": interactions.n_users,
        "n_items": interactions.n_items,
        "n_records": interactions.n_records,
        "cold_users": sorted(interactions.user_ids[u] for u in splits.cold_user_ids),
        "cold_items": sorted(interactions.item_ids[i] for i in splits.cold_item_ids),
    }
    with open(out / "split_meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"prepared {interactions.n_records} records into {out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.set or [])
    interactions, features, splits, result = _run_training(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "mode": result.mode,
        "seed": cfg.seed,
        "best_epoch": result.best_epoch,
        "config_hash": cfg.config_hash(),
        "n_layers": cfg.train.n_layers,
        "graph": cfg.to_dict()["graph"],
    }
    save_checkpoint(result.params, out / "checkpoint.mmck", meta)
    save_history(result.history, out / "history.csv", val_k=cfg.train.val_k)
    report = _report_for(cfg, splits, result)
    report.save_json(out / "report.json")
    report.save_csv(out / "report.csv")
    _write_manifest(cfg, out, interactions, result)
    if args.export_graphs and result.mode == "full":
        gdir = out / "graphs"
        gdir.mkdir(exist_ok=True)
        pipeline = Pipeline(features, cfg.graph, cfg.train.n_layers)
        for mod, graph in pipeline.initial.items():
            save_graph(graph, gdir / f"initial_{mod}.csv")
        pipeline.rebuild(result.params)
        _, ctx = pipeline.forward(result.params)
        fused = SparseItemGraph(n_items=interactions.n_items, adjacency=ctx["fused"])
        save_graph(fused, gdir / "fused.csv")
    seg = report.segments["all"]
    kk = max(cfg.ks)
    print(
        f"trained {result.mode} model: best epoch {result.best_epoch}, "
        f"val recall@{cfg.train.val_k} {result.best_val_recall:.4f}, "
        f"test recall@{kk} {seg.metrics['recall'][kk]:.4f}"
    )
    print(f"outputs in {out}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.set or [])
    params, meta = load_checkpoint(args.checkpoint)
    interactions, features = _load_experiment_data(
        cfg if params.weights is not None else _as_mf(cfg)
    )
    if params.n_items != interactions.n_items or params.n_users != interactions.n_users:
        raise CheckpointError(
            f"checkpoint covers {params.n_users} users x {params.n_items} items, "
            f"data has {interactions.n_users} x {interactions.n_items}"
        )
    if params.weights is not None:
        have = set(f.modality_id for f in features)
        want = set(params.modality_ids)
        if have != want:
            raise CheckpointError(
                f"checkpoint modalities {sorted(want)} != configured {sorted(have)}"
            )
    splits = _split_bundle(cfg, interactions)
    graph_cfg = cfg.graph
    n_layers = cfg.train.n_layers
    if isinstance(meta.get("graph"), dict):
        graph_cfg = GraphConfig(**meta["graph"])
    if "n_layers" in meta:
        n_layers = int(meta["n_layers"])
    item_rep = compute_item_representations(params, features, graph_cfg, n_layers)
    report = evaluate_all_ranking(
        params.user_emb, item_rep, splits, ks=cfg.ks, which=cfg.eval_which, seed=cfg.seed
    )
    out = Path(args.out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.save_json(out / "report.json")
    report.save_csv(out / "report.csv")
    seg = report.segments["all"]
    kk = max(cfg.ks)
    print(
        f"evaluated {args.checkpoint} on {cfg.eval_which}: "
        f"recall@{kk} {seg.metrics['recall'][kk]:.4f} over {seg.n_users} users"
    )
    return 0


def _as_mf(cfg: ExperimentConfig) -> ExperimentConfig:
    clone = load_config(None, [])
    clone.__dict__.update(cfg.__dict__)
    clone.mode = "mf"
    return clone


def sweep_k(
    splits: SplitBundle,
    features,
    graph_config: GraphConfig,
    train_config,
    k_values,
    *,
    eval_ks=(10, 20),
    which: str = "test",
    seed: int = 0,
) -> list[dict]:
    """Train and evaluate once per neighborhood size.

    Returns one row per k holding the all-segment ranking metrics at every
    cutoff in eval_ks. A single-element k_values reproduces the metrics a
    full training run at that k reports.
    """
    n_items = splits.train.n_items
    ks = [int(k) for k in k_values]
    if not ks or any(k < 1 or k >= n_items for k in ks):
        raise ConfigError(f"sweep k values must lie in [1, {n_items - 1}], got {list(k_values)}")
    rows = []
    for k in ks:
        gcfg = dataclasses.replace(graph_config, k=k)
        result = train(splits, features, gcfg, train_config)
        report = evaluate_all_ranking(
            result.params.user_emb,
            result.item_representations,
            splits,
            ks=eval_ks,
            which=which,
            seed=seed,
        )
        seg = report.segments["all"]
        row = {"k": k}
        for m in ("precision", "recall", "map", "ndcg"):
            for kk in eval_ks:
                row[f"{m}@{kk}"] = float(seg.metrics[m][kk])
        rows.append(row)
    return rows


def cmd_sweep_k(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.set or [])
    if cfg.mode != "full":
        raise ConfigError("sweep-k requires mode=full")
    sweep_ks = [int(x) for x in args.ks.split(",") if x.strip()]
    if not sweep_ks:
        raise ConfigError(f"--ks must be positive ints, got {args.ks!r}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    interactions, features = _load_experiment_data(cfg)
    splits = _split_bundle(cfg, interactions)
    rows = sweep_k(
        splits,
        features,
        cfg.graph,
        cfg.train,
        sweep_ks,
        eval_ks=cfg.ks,
        which=cfg.eval_which,
        seed=cfg.seed,
    )
    header = ["k"] + [f"{m}@{kk}" for m in ("precision", "recall", "map", "ndcg") for kk in cfg.ks]
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(row[h]) if h != "k" else str(row[h]) for h in header) + "\n")
    for row in rows:
        print(f"k={row['k']}: ndcg@{max(cfg.ks)} {row[f'ndcg@{max(cfg.ks)}']:.4f}")
    print(f"sweep written to {out / 'sweep.csv'}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    modalities = []
    for part in args.modalities.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" not in part:
            raise SyntheticError(f"modality spec {part!r} is not name:dim")
        name, dim = part.split(":", 1)
        modalities.append((name.strip(), int(dim)))
    spec = SyntheticSpec(
        n_users=args.n_users,
        n_items=args.n_items,
        n_blocks=args.n_blocks,
        min_interactions=args.min_interactions,
        max_interactions=args.max_interactions,
        interaction_noise=args.noise,
        feature_noise=args.feature_noise,
        popularity_exponent=args.popularity_exponent,
        modalities=tuple(modalities),
        seed=args.seed,
    )
    dataset = generate_synthetic(spec)
    paths = write_synthetic(dataset, args.out_dir)
    print(
        f"synthetic dataset: {dataset.interactions.n_records} records, "
        f"{spec.n_users} users x {spec.n_items} items in {spec.n_blocks} blocks"
    )
    for name in sorted(paths):
        print(f"  {name}: {paths[name]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modalrec",
        description="multi-modal latent item-graph recommendation experiments",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="split an interaction file into train/validation/test")
    p.add_argument("--interactions", required=True)
    p.add_argument("--format", default="csv", choices=["csv", "event_log"])
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.add_argument("--min-train-count", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model and write checkpoint, history, report")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--export-graphs", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint against configured data")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-k", help="retrain across neighborhood sizes")
    p.add_argument("--config", required=True)
    p.add_argument("--ks", required=True, help="comma-separated neighborhood sizes")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-users", type=int, default=1000)
    p.add_argument("--n-items", type=int, default=500)
    p.add_argument("--n-blocks", type=int, default=10)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--feature-noise", type=float, default=None)
    p.add_argument("--min-interactions", type=int, default=3)
    p.add_argument("--max-interactions", type=int, default=6)
    p.add_argument("--popularity-exponent", type=float, default=0.8)
    p.add_argument("--modalities", default="visual:8,textual:12")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CONFIG_ERRORS as e:
        print(f"modalrec: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except TrainingDivergedError as e:
        print(f"modalrec: training diverged: {e}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError) as e:
        print(f"modalrec: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
