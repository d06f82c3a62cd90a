from mrgnn.train.baselines import LinearBaseline, baseline_ha, baseline_lr
from mrgnn.train.experiment import (
    ABLATION_COMBOS,
    Architecture,
    MetricsReport,
    RunResult,
    build_graphs,
    run_ablation,
    run_baselines,
    run_experiment,
)
from mrgnn.train.loss import Metrics, loss, loss_and_grad, regression_metrics
from mrgnn.train.optim import Adam
from mrgnn.train.trainer import DivergenceError, TrainConfig, TrainingLog, evaluate, train_model

__all__ = [
    "ABLATION_COMBOS",
    "Adam",
    "Architecture",
    "DivergenceError",
    "LinearBaseline",
    "Metrics",
    "MetricsReport",
    "RunResult",
    "TrainConfig",
    "TrainingLog",
    "baseline_ha",
    "baseline_lr",
    "build_graphs",
    "evaluate",
    "loss",
    "loss_and_grad",
    "regression_metrics",
    "run_ablation",
    "run_baselines",
    "run_experiment",
    "train_model",
]
