"""Mini-batch training with hand-rolled SGD/ADAM, plus curve bookkeeping.

Optimizers are pure functions over flat {'layer.field': array} dicts.  The
training loop shuffles with per-epoch substreams of the config seed, so a rerun
with the same config and dataset reproduces every batch, every update, and
every recorded loss exactly.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from .layers import BatchNormParams
from .networks import (NetworkSpec, backward, flatten_params, forward,
                       init_params, rebuild_params, save_checkpoint)
from .signal_core import Dataset, measure, substream

# Substream paths under TrainConfig.seed: () initializes parameters,
# (_SHUFFLE_STREAM, epoch) orders each epoch's batches.
_SHUFFLE_STREAM = 1


def mse_loss(outputs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-signal squared error and its gradient w.r.t. outputs.

    loss = (1/batch) * sum_b ||out_b - tgt_b||^2
    """
    out = np.asarray(outputs, dtype=np.float64)
    tgt = np.asarray(targets, dtype=np.float64)
    if out.shape != tgt.shape:
        raise ValueError(f"output shape {out.shape} != target shape {tgt.shape}")
    batch = out.shape[0] if out.ndim == 3 else 1
    diff = out - tgt
    loss = float(np.sum(diff * diff)) / batch
    grad = (2.0 / batch) * diff
    return loss, grad


def sgd_step(flat: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float) -> dict[str, np.ndarray]:
    return {k: flat[k] - lr * grads[k] for k in flat}


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_adam(flat: dict[str, np.ndarray]) -> AdamState:
    return AdamState(m={k: np.zeros_like(v) for k, v in flat.items()},
                     v={k: np.zeros_like(v) for k, v in flat.items()})


def adam_step(flat: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8
              ) -> tuple[dict[str, np.ndarray], AdamState]:
    """One ADAM update; returns (new_flat, new_state) without mutating inputs."""
    t = state.t + 1
    new_m, new_v, out = {}, {}, {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k in flat:
        g = grads[k]
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        out[k] = flat[k] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[k], new_v[k] = m, v
    return out, AdamState(m=new_m, v=new_v, t=t)


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 64
    optimizer: str = "adam"  # "adam" or "sgd"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 1
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be positive, got {self.eval_every}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_mse: float  # nan on epochs where eval was skipped
    seconds: float   # wall time; informational only, never written to artifacts


@dataclass
class TrainReport:
    records: list[EpochRecord]
    params: dict
    best_params: dict
    best_epoch: int
    best_test_mse: float
    crossing_epoch: int | None
    baseline_mse: float | None


def network_inputs(spec: NetworkSpec, signals: np.ndarray) -> np.ndarray:
    """Map (batch, n, 1) signals to what the network consumes.

    Nets whose input length equals the signal length eat the signals directly.
    A net that starts with an adjoint layer consumes measurements, so the
    signals are pushed through that layer's fixed operator first.
    """
    n = signals.shape[1]
    if spec.input_length == n:
        return signals
    first = spec.layers[0]
    if first.kind == "adjoint" and first.matrix.n == n \
            and spec.input_length == first.matrix.m:
        return measure(first.matrix, signals)
    raise ConfigError(f"{spec.name}: cannot feed length-{n} signals to input "
                      f"length {spec.input_length}")


def evaluate_mse(spec: NetworkSpec, params: dict, inputs: np.ndarray,
                 targets: np.ndarray, chunk: int = 256) -> float:
    """Eval-mode mean per-signal squared error over a stacked set."""
    total = 0.0
    count = inputs.shape[0]
    for lo in range(0, count, chunk):
        out, _ = forward(spec, params, inputs[lo:lo + chunk], mode="eval")
        diff = out - targets[lo:lo + chunk]
        total += float(np.sum(diff * diff))
    return total / count


def train(spec: NetworkSpec, dataset: Dataset, config: TrainConfig,
          baseline_mse: float | None = None,
          progress=None) -> TrainReport:
    """Train to minimize test-signal reconstruction error.

    Returns the full per-epoch history plus final and best (lowest test MSE)
    parameters.  crossing_epoch is the first epoch whose test MSE drops below
    baseline_mse, when one is given.  `progress`, if set, is called with each
    EpochRecord as it is produced.
    """
    if dataset.n != spec.shapes[-1][0]:
        raise ConfigError(f"{spec.name}: output length {spec.shapes[-1][0]} "
                          f"!= signal length {dataset.n}")
    targets = dataset.train_array()
    inputs = network_inputs(spec, targets)
    test_targets = dataset.test_array()
    test_inputs = network_inputs(spec, test_targets)
    n_train = targets.shape[0]
    if n_train < 1:
        raise ConfigError("training split is empty")

    params = init_params(spec, config.seed)
    flat = flatten_params(spec, params)
    adam = init_adam(flat) if config.optimizer == "adam" else None

    records: list[EpochRecord] = []
    best_epoch, best_mse, best_params = 0, np.inf, params
    crossing = None

    for epoch in range(1, config.epochs + 1):
        tic = time.perf_counter()
        order = substream(config.seed, _SHUFFLE_STREAM, epoch).permutation(n_train)
        loss_sum = 0.0
        for lo in range(0, n_train, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            out, fwd_cache = forward(spec, params, inputs[idx], mode="train")
            loss, grad = mse_loss(out, targets[idx])
            if not np.isfinite(loss):
                raise NumericError(f"epoch {epoch}: non-finite training loss")
            loss_sum += loss * len(idx)
            grads, _ = backward(spec, params, fwd_cache, grad)
            if config.optimizer == "adam":
                flat, adam = adam_step(flat, grads, adam, lr=config.lr,
                                       beta1=config.beta1, beta2=config.beta2,
                                       eps=config.eps)
            else:
                flat = sgd_step(flat, grads, config.lr)
            params = rebuild_params(spec, params, flat)
        train_loss = loss_sum / n_train

        if epoch % config.eval_every == 0 or epoch == config.epochs:
            test_mse = evaluate_mse(spec, params, test_inputs, test_targets)
            if test_mse < best_mse:
                best_epoch, best_mse = epoch, test_mse
                best_params = _copy_params(spec, params)
            if crossing is None and baseline_mse is not None \
                    and test_mse < baseline_mse:
                crossing = epoch
        else:
            test_mse = float("nan")
        rec = EpochRecord(epoch=epoch, train_loss=train_loss, test_mse=test_mse,
                          seconds=time.perf_counter() - tic)
        records.append(rec)
        if progress is not None:
            progress(rec)

    report = TrainReport(records=records, params=params, best_params=best_params,
                         best_epoch=best_epoch, best_test_mse=float(best_mse),
                         crossing_epoch=crossing, baseline_mse=baseline_mse)
    if config.checkpoint_dir is not None:
        _write_artifacts(config.checkpoint_dir, spec, dataset, config, report)
    return report


def _copy_params(spec: NetworkSpec, params: dict) -> dict:
    flat = {k: v.copy() for k, v in flatten_params(spec, params).items()}
    out = rebuild_params(spec, params, flat)
    # snapshot running stats too; rebuild_params shares them by design
    for name, p in out.items():
        if isinstance(p, BatchNormParams):
            p.running_mean = p.running_mean.copy()
            p.running_var = p.running_var.copy()
    return out


def write_train_curve(path: str, records: list[EpochRecord]) -> None:
    """CSV of the training history.

    The seconds column is fixed at 0.0: curve files are byte-reproducible
    artifacts, and wall time is not.  Measured times stay on the in-memory
    records and in the run manifest.
    """
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "test_mse", "seconds"])
        for r in records:
            w.writerow([r.epoch, repr(float(r.train_loss)),
                        repr(float(r.test_mse)), "0.0"])


def _write_artifacts(outdir: str, spec: NetworkSpec, dataset: Dataset,
                     config: TrainConfig, report: TrainReport) -> None:
    os.makedirs(outdir, exist_ok=True)
    meta_common = {
        "dataset": {"n": dataset.n, "k": dataset.k,
                    "n_train": len(dataset.train), "n_test": len(dataset.test),
                    "master_seed": dataset.master_seed},
        "config": {"epochs": config.epochs, "batch_size": config.batch_size,
                   "optimizer": config.optimizer, "lr": config.lr,
                   "seed": config.seed},
    }
    save_checkpoint(os.path.join(outdir, "final.ckpt"), spec, report.params,
                    meta=dict(meta_common, epoch=config.epochs))
    save_checkpoint(os.path.join(outdir, "best.ckpt"), spec, report.best_params,
                    meta=dict(meta_common, epoch=report.best_epoch,
                              test_mse=report.best_test_mse))
    write_train_curve(os.path.join(outdir, "train_curve.csv"), report.records)
