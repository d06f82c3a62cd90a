"""Command-line pipeline: synth, ingest, build-graphs, train, evaluate, ablate.

Outputs (under ``--out`` or the config's ``out``):

    dataset.npz                      ingest
    ingest_summary.json              ingest
    graphs.npz, graph_census.json    build-graphs
    checkpoint_<modes>_seed<N>.npz   train (one per seed)
    train_log_<modes>_seed<N>.csv    train (per-epoch rows)
    metrics.csv                      train (per-seed rows + mean)
    evaluation.csv                   evaluate (checkpoints + HA/LR baselines)
    ablation.csv                     ablate (one seed-mean row per combination)

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure, 1 anything else.  Failures print a single JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from mrgnn._archive import ArchiveError
from mrgnn.config import ConfigError, ExperimentConfig, config_from_dict, dump_config, load_config
from mrgnn.graphs import NodeSet, load_graph_set, project_lonlat, save_graph_set
from mrgnn.ingest import (
    IngestError,
    PreparedData,
    bin_counts,
    bin_demand,
    filter_nodes,
    load_dataset,
    load_trip_records,
    load_turnstile_counts,
    read_registry,
    save_dataset,
)
from mrgnn.model.network import load_checkpoint
from mrgnn.synthetic import SynthSpec, generate_synthetic, write_raw_files
from mrgnn.train.experiment import (
    MetricsReport,
    RunResult,
    build_graphs,
    combo_label,
    run_ablation,
    run_baselines,
    run_experiment,
)
from mrgnn.train.trainer import DivergenceError, evaluate

log = logging.getLogger("mrgnn")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


class CommandError(Exception):
    def __init__(self, code, kind, message, **extra):
        super().__init__(message)
        self.code, self.kind, self.extra = code, kind, extra


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _config(args, require_raw=False) -> ExperimentConfig:
    if args.config is None:
        raise ConfigError("--config is required")
    cfg = load_config(args.config)
    if args.out is not None:
        cfg.out = str(Path(args.out).resolve())
    if args.seed is not None:
        cfg.train.seeds = (args.seed,)
    cfg.validate(require_raw=require_raw)
    return cfg


def _load_dataset(cfg) -> PreparedData:
    path = cfg.out_dir / "dataset.npz"
    if not path.exists():
        raise CommandError(EXIT_DATA, "data", f"dataset archive not found: {path}; run ingest first", file=str(path))
    return load_dataset(path)


# ---------------------------------------------------------------- commands


def cmd_ingest(args) -> None:
    cfg = _config(args, require_raw=True)
    span, width = cfg.span, cfg.bin_width
    tensors, node_sets, summary = {}, {}, {}
    registries = {m: read_registry(cfg.resolve(cfg.data[m].nodes)) for m in cfg.modes}
    # one projection origin shared by every mode
    lon = np.concatenate([r[1] for r in registries.values()])
    lat = np.concatenate([r[2] for r in registries.values()])
    origin = (float(lon.mean()), float(lat.mean()))

    for m in cfg.modes:
        src = cfg.data[m]
        ids, lon, lat = registries[m]
        ns = NodeSet(m, ids, project_lonlat(lon, lat, origin))
        if m == "subway":
            path = cfg.resolve(src.counts)
            loaded = load_turnstile_counts(path, src.schema == "cumulative", ns.node_ids)
            tensor, dropped = bin_counts(loaded.records, ns, width, span)
            info = {"records": len(loaded.records), "skipped": loaded.skipped, "anomalies": loaded.anomalies}
        else:
            path = cfg.resolve(src.trips)
            loaded = load_trip_records(path, ns.node_ids, m)
            tensor, dropped = bin_demand(loaded.events, ns, width, span, mode=m)
            info = {"events": len(loaded.events), "skipped": loaded.skipped}
        info["out_of_span"] = dropped
        info["inflow_total"] = float(tensor.values[:, :, 0].sum())
        info["outflow_total"] = float(tensor.values[:, :, 1].sum())
        if src.filter:
            tensor, kept = filter_nodes(tensor, m)
        else:
            kept = tensor.node_ids
        info["nodes_kept"] = len(kept)
        info["nodes_dropped"] = sorted(set(ns.node_ids) - set(kept))
        if not kept:
            raise CommandError(EXIT_DATA, "data", f"{m}: every node was filtered out", file=str(path))
        tensors[m] = tensor
        node_sets[m] = ns.subset(kept)
        summary[m] = info
    try:
        data = PreparedData(tensors, node_sets, cfg.split, cfg.T, summary)
    except ValueError as exc:
        raise CommandError(EXIT_DATA, "data", str(exc)) from exc
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(data, out / "dataset.npz")
    _dump_json(summary, out / "ingest_summary.json")
    print(json.dumps({m: {k: v for k, v in s.items() if k != "nodes_dropped"} for m, s in summary.items()}))


def cmd_build_graphs(args) -> None:
    cfg = _config(args)
    data = _load_dataset(cfg)
    missing = [m for m in cfg.modes if m not in data.modes]
    if missing:
        raise CommandError(EXIT_CONFIG, "config", f"dataset has no demand for modes {missing}")
    gs = build_graphs(data, cfg.modes, cfg.eps, cfg.k)
    save_graph_set(gs, cfg.out_dir / "graphs.npz")
    census = gs.census()
    _dump_json(census, cfg.out_dir / "graph_census.json")
    print(json.dumps({"relations": census["relations"], "modes": census["modes"]}))


def _graphs_for(cfg):
    path = cfg.out_dir / "graphs.npz"
    if not path.exists():
        raise CommandError(EXIT_DATA, "data", f"graph set not found: {path}; run build-graphs first", file=str(path))
    gs = load_graph_set(path)
    if tuple(gs.modes) != tuple(cfg.modes):
        raise CommandError(EXIT_CONFIG, "config", f"graph set covers {gs.modes}, config asks for {list(cfg.modes)}")
    return gs


def cmd_train(args) -> None:
    cfg = _config(args)
    data = _load_dataset(cfg)
    gs = _graphs_for(cfg)
    rebuilt = build_graphs(data, cfg.modes, cfg.eps, cfg.k)
    if rebuilt.fingerprint() != gs.fingerprint():
        raise CommandError(EXIT_DATA, "data", "graph set does not match the dataset; rerun build-graphs")
    report = run_experiment(
        data, cfg.modes, cfg.model, cfg.train, None, cfg.eps, cfg.k, cfg.out_dir,
        resume=args.resume, stop_after=args.stop_after_epochs,
    )
    report.write(cfg.out_dir / "metrics.csv")
    for r in report.runs:
        print(json.dumps(r.__dict__))


def cmd_evaluate(args) -> None:
    cfg = _config(args)
    data = _load_dataset(cfg)
    gs = _graphs_for(cfg)
    sub = data.select(gs.modes)
    adj = gs.normalized()
    report = MetricsReport()
    label = combo_label(gs.modes)
    for seed in cfg.train.seeds:
        path = cfg.out_dir / f"checkpoint_{label}_seed{seed}.npz"
        if not path.exists():
            raise CommandError(EXIT_DATA, "data", f"checkpoint not found: {path}", file=str(path))
        model, _, extra, _ = load_checkpoint(path, gs.fingerprint())
        m = evaluate(model, sub.windows["test"], sub.stats, adj)
        report.runs.append(RunResult("mrgnn", label, str(seed), m.rmse, m.mae, m.r2, extra.get("epochs_run", 0)))
    report = report.with_means()
    report.runs.extend(run_baselines(data).runs)
    report.write(cfg.out_dir / "evaluation.csv")
    for r in report.runs:
        print(json.dumps(r.__dict__))


def cmd_ablate(args) -> None:
    cfg = _config(args)
    data = _load_dataset(cfg)
    missing = [m for m in ("bike", "subway", "ridehail") if m not in data.modes]
    if missing:
        raise CommandError(EXIT_CONFIG, "config", f"ablation needs all three modes; dataset lacks {missing}")
    cells = cfg.out_dir / "ablation"
    cells.mkdir(parents=True, exist_ok=True)
    report = run_ablation(data, cfg.model, cfg.train, None, cfg.eps, cfg.k, cells, cfg.out_dir / "ablation.csv")
    for r in report.runs:
        print(json.dumps(r.__dict__))


def cmd_synth(args) -> None:
    raw = {}
    if args.spec is not None:
        try:
            raw = yaml.safe_load(Path(args.spec).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read synthetic spec {args.spec}: {exc}") from exc
    try:
        spec = SynthSpec.from_dict(raw)
        spec.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synthetic spec: {exc}") from exc
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out or "synth")
    data = generate_synthetic(spec, seed)
    info = write_raw_files(data, out, seed)
    end = data.tensors["bike"].bin_start + spec.n_bins * data.tensors["bike"].bin_width
    cfg = config_from_dict({
        "data": {
            "bike": {"trips": "bike_trips.csv", "nodes": "bike_nodes.csv"},
            "subway": {"counts": "subway_counts.csv", "nodes": "subway_nodes.csv", "schema": "cumulative"},
            "ridehail": {"trips": "ridehail_trips.csv", "nodes": "ridehail_nodes.csv"},
        },
        "start": spec.start,
        "end": end.isoformat(),
        "bin_hours": spec.bin_hours,
        "out": "run",
    })
    dump_config(cfg, out / "experiment.yaml")
    info["spec"] = spec.to_dict()
    info["seed"] = seed
    _dump_json(info, out / "synth_summary.json")
    print(json.dumps(info["totals"]))


COMMANDS = {
    "ingest": cmd_ingest,
    "build-graphs": cmd_build_graphs,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "synth": cmd_synth,
}


def _common_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags with suppressed defaults so a value
    # given before the subcommand name is not reset by the subparser
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (YAML)", **kw)
    common.add_argument("--seed", type=int, help="run a single seed instead of the configured list", **kw)
    common.add_argument("--out", help="output directory (overrides the config)", **kw)
    common.add_argument("--resume", action="store_true", help="continue interrupted training runs", **kw)
    common.add_argument("-v", "--verbose", action="store_true", **kw)
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrgnn", description=__doc__.splitlines()[0],
                                     parents=[_common_flags(False)])
    sub = parser.add_subparsers(dest="command", required=True)
    local = _common_flags(True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[local])
        if name == "synth":
            p.add_argument("--spec", type=Path, help="synthetic data spec (YAML)")
        if name == "train":
            p.add_argument("--stop-after-epochs", type=int, default=None, help=argparse.SUPPRESS)
    return parser


def _fail(code, kind, message, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except CommandError as exc:
        return _fail(exc.code, exc.kind, str(exc), **exc.extra)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except IngestError as exc:
        extra = {k: v for k, v in (("file", exc.file), ("column", exc.column)) if v is not None}
        return _fail(EXIT_DATA, "data", str(exc), **extra)
    except ArchiveError as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    except DivergenceError as exc:
        return _fail(EXIT_NUMERIC, "numeric", str(exc))
    except (ValueError, OSError) as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
