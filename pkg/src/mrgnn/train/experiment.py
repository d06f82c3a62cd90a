"""Seeded runs, baselines, and the mode-combination ablation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mrgnn.graphs import MODES, GraphSet, assemble_graph_set
from mrgnn.ingest import PreparedData
from mrgnn.model.network import ModelConfig, ModelState, init_model, save_checkpoint
from mrgnn.train.baselines import LinearBaseline, baseline_ha
from mrgnn.train.loss import regression_metrics
from mrgnn.train.trainer import TrainConfig, TrainingLog, evaluate, train_model

log = logging.getLogger(__name__)

ABLATION_COMBOS = (
    ("bike",),
    ("bike", "subway"),
    ("bike", "ridehail"),
    ("bike", "subway", "ridehail"),
)
REPORT_COLUMNS = ("model", "modes", "seed", "rmse", "mae", "r2", "epochs", "status")


def combo_label(modes) -> str:
    return "+".join(modes)


def canonical_modes(modes, target="bike") -> tuple[str, ...]:
    modes = list(dict.fromkeys(modes))
    if target not in modes:
        raise ValueError(f"mode combination {modes} excludes the target mode {target!r}")
    rest = [m for m in MODES if m in modes and m != target] + sorted(m for m in modes if m not in MODES)
    return (target, *rest)


@dataclass
class RunResult:
    model: str
    modes: str
    seed: str
    rmse: float
    mae: float
    r2: float
    epochs: int = 0
    status: str = "ok"


@dataclass
class MetricsReport:
    runs: list[RunResult] = field(default_factory=list)

    def select(self, model=None, modes=None) -> list[RunResult]:
        return [
            r for r in self.runs
            if r.seed != "mean" and (model is None or r.model == model) and (modes is None or r.modes == modes)
        ]

    def mean(self, model, modes) -> RunResult:
        rs = [r for r in self.select(model, modes) if r.status == "ok"]
        if not rs:
            raise ValueError(f"no successful runs for {model} on {modes}")
        return RunResult(
            model,
            modes,
            "mean",
            float(np.mean([r.rmse for r in rs])),
            float(np.mean([r.mae for r in rs])),
            float(np.mean([r.r2 for r in rs])),
            int(round(np.mean([r.epochs for r in rs]))),
        )

    def with_means(self) -> MetricsReport:
        rows = [r for r in self.runs if r.seed != "mean"]
        out = list(rows)
        for key in dict.fromkeys((r.model, r.modes) for r in rows):
            if any(r.status == "ok" for r in self.select(*key)):
                out.append(self.mean(*key))
        return MetricsReport(out)

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in self.runs:
                w.writerow([r.model, r.modes, r.seed, repr(r.rmse), repr(r.mae), repr(r.r2), r.epochs, r.status])

    @classmethod
    def read(cls, path) -> MetricsReport:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([
            RunResult(r["model"], r["modes"], r["seed"], float(r["rmse"]), float(r["mae"]), float(r["r2"]),
                      int(r["epochs"]), r["status"])
            for r in rows
        ])


def build_graphs(data: PreparedData, modes, eps=0.1, k=5, target="bike") -> GraphSet:
    """Graph set for a mode subset, semantic matrices from the training split only."""
    modes = canonical_modes(modes, target)
    sub = data.select(modes)
    train = {m: sub.raw_split(m, "train") for m in modes}
    return assemble_graph_set(target, sub.node_sets, train, eps, k)


@dataclass
class Architecture:
    channels: tuple[int, ...] = (32, 64)
    kt: int = 2
    head_hidden: int = 64

    def model_config(self, modes, T, dropout) -> ModelConfig:
        return ModelConfig(tuple(modes), T, tuple(self.channels), self.kt, self.head_hidden, dropout)


def run_seed(
    data: PreparedData,
    gs: GraphSet,
    seed: int,
    arch: Architecture,
    tcfg: TrainConfig,
    out_dir=None,
    resume=False,
    stop_after=None,
) -> tuple[RunResult, ModelState, TrainingLog]:
    modes = gs.modes
    sub = data.select(modes)
    adj = gs.normalized()
    cfg = arch.model_config(modes, data.T, tcfg.dropout)
    model = init_model(cfg, seed, gs.fingerprint())
    paths = {}
    if out_dir is not None:
        out_dir = Path(out_dir)
        stem = f"{combo_label(modes)}_seed{seed}"
        paths = {
            "log_path": out_dir / f"train_log_{stem}.csv",
            "state_path": out_dir / f"resume_{stem}.npz",
        }
    best, tlog = train_model(
        model, sub.windows["train"], sub.windows["val"], adj, tcfg, seed,
        resume=resume, stop_after=stop_after, **paths,
    )
    if tlog.stopped == "interrupted":
        return RunResult("mrgnn", combo_label(modes), str(seed), math.nan, math.nan, math.nan, tlog.epochs_run,
                         "interrupted"), best, tlog
    m = evaluate(best, sub.windows["test"], sub.stats, adj)
    if out_dir is not None:
        save_checkpoint(out_dir / f"checkpoint_{combo_label(modes)}_seed{seed}.npz", best, sub.stats,
                        extra={"best_epoch": tlog.best_epoch, "epochs_run": tlog.epochs_run, "stopped": tlog.stopped})
        Path(paths["state_path"]).unlink(missing_ok=True)
    log.info("%s seed %d: rmse %.4f mae %.4f r2 %.4f (%d epochs)", combo_label(modes), seed, m.rmse, m.mae, m.r2,
             tlog.epochs_run)
    return RunResult("mrgnn", combo_label(modes), str(seed), m.rmse, m.mae, m.r2, tlog.epochs_run), best, tlog


def run_experiment(
    data: PreparedData,
    modes,
    arch: Architecture | None = None,
    tcfg: TrainConfig | None = None,
    seeds=None,
    eps=0.1,
    k=5,
    out_dir=None,
    resume=False,
    stop_after=None,
) -> MetricsReport:
    """Train and evaluate once per seed; the report holds per-seed rows and their mean."""
    arch = arch or Architecture()
    tcfg = tcfg or TrainConfig()
    seeds = tcfg.seeds if seeds is None else tuple(seeds)
    gs = build_graphs(data, modes, eps, k)
    runs = [run_seed(data, gs, s, arch, tcfg, out_dir, resume, stop_after)[0] for s in seeds]
    return MetricsReport(runs).with_means()


def run_baselines(data: PreparedData, target="bike") -> MetricsReport:
    """HA and LR test metrics on the target mode, in demand units."""
    st = data.stats[target]
    test = data.windows["test"]
    y = st.denormalize(test.targets[target])
    ha = baseline_ha(data.raw_split(target, "train"), test.target_times)
    tr = data.windows["train"]
    lr = st.denormalize(LinearBaseline().fit(tr.inputs[target], tr.targets[target]).predict(test.inputs[target]))
    rows = []
    for name, pred in (("ha", ha), ("lr", lr)):
        m = regression_metrics(y, pred)
        rows.append(RunResult(name, target, "-", m.rmse, m.mae, m.r2))
    return MetricsReport(rows)


def run_ablation(data, arch=None, tcfg=None, seeds=None, eps=0.1, k=5, out_dir=None, report_path=None,
                 combos=ABLATION_COMBOS) -> MetricsReport:
    """One seed-mean row per mode combination.

    Completed cells are written to ``report_path`` as they finish; a failing
    cell is recorded with status ``failed`` and the error re-raised.
    """
    report = MetricsReport()
    for combo in combos:
        try:
            cell = run_experiment(data, combo, arch, tcfg, seeds, eps, k, out_dir)
            report.runs.append(cell.mean("mrgnn", combo_label(canonical_modes(combo))))
        except Exception:
            nan = math.nan
            report.runs.append(RunResult("mrgnn", combo_label(combo), "mean", nan, nan, nan, 0, "failed"))
            if report_path is not None:
                report.write(report_path)
            raise
        if report_path is not None:
            report.write(report_path)
    return report
