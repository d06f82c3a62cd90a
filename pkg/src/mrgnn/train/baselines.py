"""Historical-average and linear-regression baselines."""

from __future__ import annotations

import logging
from datetime import timedelta

import numpy as np

from mrgnn.ingest import DemandTensor

log = logging.getLogger(__name__)

WEEK = timedelta(days=7)


def week_slots(times, origin, bin_width: timedelta) -> np.ndarray:
    """Bin-of-week index of each timestamp, counted from ``origin``."""
    per_week = int(WEEK / bin_width)
    if WEEK % bin_width:
        raise ValueError(f"bin width {bin_width} does not divide a week")
    w = int(bin_width.total_seconds())
    t = np.asarray(times, dtype="datetime64[s]").astype(np.int64)
    off = t - np.datetime64(origin, "s").astype(np.int64)
    return np.floor_divide(off, w) % per_week


def baseline_ha(train: DemandTensor, target_times) -> np.ndarray:
    """Mean of training bins sharing the target's bin-of-week slot; unseen slots predict 0.

    Returns [S, N, 2] in the units of ``train``.
    """
    if train.n_bins == 0:
        raise ValueError("empty training split")
    per_week = int(WEEK / train.bin_width)
    if train.n_bins < per_week:
        log.warning("training split shorter than one week; some slots are never observed")
    slots = week_slots(train.bin_times(), train.bin_start, train.bin_width)
    sums = np.zeros((per_week,) + train.values.shape[1:])
    np.add.at(sums, slots, train.values)
    counts = np.bincount(slots, minlength=per_week).astype(np.float64)
    means = np.zeros_like(sums)
    seen = counts > 0
    means[seen] = sums[seen] / counts[seen, None, None]
    return means[week_slots(target_times, train.bin_start, train.bin_width)]


class LinearBaseline:
    """One linear map with intercept from a node's T x 2 lags to its next 2-channel value.

    Coefficients are shared by all nodes and fitted by least squares over every
    (sample, node) pair; rank-deficient designs get the minimum-norm solution.
    """

    def __init__(self):
        self.coef: np.ndarray | None = None  # [2T + 1, 2], intercept last

    @staticmethod
    def design(x: np.ndarray) -> np.ndarray:
        S, T, N, C = x.shape
        lags = x.transpose(0, 2, 1, 3).reshape(S * N, T * C)
        return np.hstack([lags, np.ones((S * N, 1))])

    def fit(self, x: np.ndarray, y: np.ndarray) -> LinearBaseline:
        X = self.design(np.asarray(x, dtype=np.float64))
        Y = np.asarray(y, dtype=np.float64).reshape(-1, y.shape[-1])
        self.coef = np.linalg.lstsq(X, Y, rcond=None)[0]
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        if self.coef is None:
            raise RuntimeError("fit the baseline first")
        S, _, N, _ = x.shape
        return (self.design(np.asarray(x, dtype=np.float64)) @ self.coef).reshape(S, N, -1)


def baseline_lr(train_x, train_y, test_x) -> np.ndarray:
    return LinearBaseline().fit(train_x, train_y).predict(test_x)
