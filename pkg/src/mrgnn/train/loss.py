"""Prediction-regularized objective and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def mse(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    d = pred - target
    return float(np.mean(d * d))


def loss(preds: dict, targets: dict, eps_r: float, target: str = "bike") -> float:
    """Target-mode MSE plus eps_r times the summed auxiliary-mode MSEs."""
    return loss_and_grad(preds, targets, eps_r, target)[0]


def loss_and_grad(preds: dict, targets: dict, eps_r: float, target: str = "bike"):
    """Returns (total, per-mode MSE, dLoss/dpreds)."""
    if eps_r < 0:
        raise ValueError("eps_r must be >= 0")
    if target not in preds:
        raise ValueError(f"no predictions for target mode {target!r}")
    terms, grads = {}, {}
    total = 0.0
    for m, p in preds.items():
        y = targets[m]
        terms[m] = mse(p, y)
        w = 1.0 if m == target else eps_r
        total += w * terms[m]
        grads[m] = (2.0 * w / p.size) * (np.asarray(p) - np.asarray(y))
    return total, terms, grads


@dataclass(frozen=True)
class Metrics:
    rmse: float
    mae: float
    r2: float  # nan when the targets are constant

    def as_dict(self) -> dict:
        return {"rmse": self.rmse, "mae": self.mae, "r2": self.r2}


def regression_metrics(y_true, y_pred) -> Metrics:
    """RMSE, MAE and R^2 pooled over every element."""
    y_true = np.asarray(y_true, dtype=np.float64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.float64).ravel()
    if y_true.shape != y_pred.shape or y_true.size == 0:
        raise ValueError("metrics need equally sized, non-empty inputs")
    err = y_pred - y_true
    sse = float(np.sum(err * err))
    rmse = math.sqrt(sse / y_true.size)
    mae = float(np.mean(np.abs(err)))
    dev = y_true - y_true.mean()
    sst = float(np.sum(dev * dev))
    r2 = 1.0 - sse / sst if sst > 0 else float("nan")
    return Metrics(rmse, mae, r2)
