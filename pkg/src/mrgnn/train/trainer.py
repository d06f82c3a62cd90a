"""Mini-batch training with early stopping and resumable state."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mrgnn._archive import read_archive, write_archive
from mrgnn.ingest import WindowedDataset
from mrgnn.model.network import ModelState, backward, forward, predict
from mrgnn.train.loss import Metrics, loss_and_grad, regression_metrics
from mrgnn.train.optim import Adam

log = logging.getLogger(__name__)

STATE_FORMAT = "mrgnn-trainstate"
STATE_VERSION = 1


class DivergenceError(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.002
    batch_size: int = 32
    max_epochs: int = 500
    dropout: float = 0.3
    weight_decay: float = 1e-5
    patience: int = 20
    eps_r: float = 0.2
    seeds: tuple[int, ...] = tuple(range(10))
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.eps_r < 0:
            raise ValueError("eps_r must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1 or self.lr <= 0:
            raise ValueError("batch_size, max_epochs and lr must be positive")
        if not self.seeds:
            raise ValueError("at least one seed is required")


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)  # (epoch, train_loss, val_loss)
    best_epoch: int = 0
    stopped: str = ""

    @property
    def epochs_run(self) -> int:
        return len(self.records)

    @property
    def best_val(self) -> float:
        return min((r[2] for r in self.records), default=math.inf)


def validation_loss(model: ModelState, ds: WindowedDataset, adj: dict, eps_r: float) -> float:
    preds = predict(model, ds.inputs, adj)
    return loss_and_grad(preds, ds.targets, eps_r, model.config.target)[0]


def _write_log_header(path: Path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_loss\n")


def _append_log(path: Path, rec) -> None:
    with open(path, "a") as fh:
        fh.write(f"{rec[0]},{rec[1]!r},{rec[2]!r}\n")


def _save_state(path, epoch, model, best, opt, rng, tlog, wait):
    meta, opt_arrays = opt.state()
    arrays = {f"param.{k}": v for k, v in model.params.items()}
    arrays.update({f"best.{k}": v for k, v in best.params.items()})
    arrays.update({f"opt.{k}": v for k, v in opt_arrays.items()})
    body = {
        "epoch": epoch,
        "wait": wait,
        "opt": meta,
        "rng": rng.bit_generator.state,
        "records": [list(r) for r in tlog.records],
        "best_epoch": tlog.best_epoch,
    }
    tmp = Path(str(path) + ".tmp")
    write_archive(tmp, STATE_FORMAT, STATE_VERSION, body, arrays)
    tmp.replace(path)


def train_model(
    model: ModelState,
    train: WindowedDataset,
    val: WindowedDataset,
    adj: dict,
    config: TrainConfig,
    seed: int | None = None,
    log_path=None,
    state_path=None,
    resume: bool = False,
    stop_after: int | None = None,
) -> tuple[ModelState, TrainingLog]:
    """Adam on the prediction-regularized loss; returns the best-validation parameters.

    With ``state_path`` set, the full optimizer/RNG state is saved after every
    epoch and ``resume=True`` continues from it.  ``stop_after`` ends the call
    after that many epochs in this invocation (state is kept for resuming).
    """
    seed = model.seed if seed is None else seed
    target = model.config.target
    model = model.copy()
    rng = np.random.default_rng(seed)
    opt = Adam(config.lr, config.beta1, config.beta2, weight_decay=config.weight_decay)
    tlog = TrainingLog()
    best, wait, start = model.copy(), 0, 1
    log_path = None if log_path is None else Path(log_path)

    if resume and state_path is not None and Path(state_path).exists():
        body, arrays = read_archive(state_path, STATE_FORMAT, STATE_VERSION)
        model.params = {k[6:]: v.copy() for k, v in arrays.items() if k.startswith("param.")}
        best.params = {k[5:]: v.copy() for k, v in arrays.items() if k.startswith("best.")}
        opt.load_state(body["opt"], {k[4:]: v for k, v in arrays.items() if k.startswith("opt.")})
        rng.bit_generator.state = body["rng"]
        tlog.records = [tuple(r) for r in body["records"]]
        tlog.best_epoch = body["best_epoch"]
        wait, start = body["wait"], body["epoch"] + 1
        log.info("resuming at epoch %d", start)
        if log_path is not None:
            _write_log_header(log_path)
            for rec in tlog.records:
                _append_log(log_path, rec)
    elif log_path is not None:
        _write_log_header(log_path)

    n = len(train)
    if n == 0:
        raise ValueError("empty training set")
    ran = 0
    for epoch in range(start, config.max_epochs + 1):
        if wait >= config.patience:
            break
        perm = rng.permutation(n)
        total = 0.0
        for s in range(0, n, config.batch_size):
            idx = perm[s : s + config.batch_size]
            batch = train.batch(idx)
            preds, tape = forward(model, batch.inputs, adj, training=True, rng=rng)
            value, _, dpreds = loss_and_grad(preds, batch.targets, config.eps_r, target)
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}, batch {s // config.batch_size}")
            grads = backward(model, tape, dpreds)
            opt.step(model.params, grads)
            total += value * len(idx)
        val_loss = validation_loss(model, val, adj, config.eps_r)
        if not math.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        rec = (epoch, total / n, val_loss)
        improved = val_loss < tlog.best_val
        tlog.records.append(rec)
        if improved:
            best, wait, tlog.best_epoch = model.copy(), 0, epoch
        else:
            wait += 1
        if log_path is not None:
            _append_log(log_path, rec)
        if state_path is not None:
            _save_state(state_path, epoch, model, best, opt, rng, tlog, wait)
        ran += 1
        if stop_after is not None and ran >= stop_after and wait < config.patience and epoch < config.max_epochs:
            tlog.stopped = "interrupted"
            return best, tlog
    tlog.stopped = "early_stop" if wait >= config.patience else "max_epochs"
    return best, tlog


def evaluate(model: ModelState, ds: WindowedDataset, stats: dict, adj: dict, mode: str | None = None) -> Metrics:
    """Metrics on denormalized predictions for ``mode`` (default: target mode)."""
    mode = mode or model.config.target
    if mode not in stats:
        raise ValueError(f"no normalization stats for {mode!r}")
    preds = predict(model, ds.inputs, adj)[mode]
    st = stats[mode]
    return regression_metrics(st.denormalize(ds.targets[mode]), st.denormalize(preds))
