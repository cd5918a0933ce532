"""Variance experiments: minibatch gradient variance, partition variance, trajectory variance.

Gradients for the linear model are closed form. Supervised MSE maps ``x`` to
the one-hot ``e_y`` in the ambient space, so ``W`` is ``d x d`` and the
theory's evaluation point is ``W = I``. The SSL gradient uses the
infinitely-many-views limit ``M = M_tilde = X_B^T X_B / |B|``.

All variances are the scalar ``E ||v - E v||^2`` over flattened parameters.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import models
from .datagen import LabeledDataset, Partition, as_rng, class_blocked_partition, class_interleaved_partition, make_partition
from .losses import SecondMoment, sl_mse_grad, spectral_grad_closed_form
from .trajectories import TrainConfig, train_encoder

LOSS_KINDS = ("sl", "ssl")
CSV_COLUMNS = ("experiment", "loss_kind", "param", "value", "estimate", "stderr", "n_samples")


@dataclass
class VarianceReport:
    estimate: float
    n_samples: int
    stderr: float = 0.0
    config: dict = field(default_factory=dict)


def sample_variance(samples) -> tuple[float, float]:
    """Unbiased scalar variance of row vectors and a standard error for it.

    Two passes over deviations from the first sample, so identical samples
    give exactly 0.
    """
    S = np.asarray(samples, dtype=np.float64)
    S = S.reshape(S.shape[0], -1)
    k = S.shape[0]
    if k < 2:
        raise ValueError("need at least 2 samples for a variance estimate")
    dev = S - S[0]
    dev = dev - dev.sum(axis=0) / k
    q = np.sum(dev * dev, axis=1)
    est = float(q.sum() / (k - 1))
    stderr = float(np.std(q, ddof=1) * k / (k - 1) / np.sqrt(k))
    return est, stderr


def population_variance(samples) -> float:
    S = np.asarray(samples, dtype=np.float64)
    S = S.reshape(S.shape[0], -1)
    dev = S - S[0]
    dev = dev - dev.sum(axis=0) / S.shape[0]
    return float(np.sum(dev * dev) / S.shape[0])


def _check_kind(loss_kind: str) -> None:
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")


def batch_gradient(loss_kind: str, W: np.ndarray, X: np.ndarray, labels=None) -> np.ndarray:
    _check_kind(loss_kind)
    if loss_kind == "sl":
        return sl_mse_grad(W, X, labels)
    return spectral_grad_closed_form(W, SecondMoment.analytic(X))


def _default_W(dataset: LabeledDataset, W) -> np.ndarray:
    return np.eye(dataset.d) if W is None else np.asarray(W, dtype=np.float64)


def grad_variance_mc(
    loss_kind: str, dataset: LabeledDataset, batch_size: int, n_samples: int, seed=0, W=None
) -> VarianceReport:
    """Monte-Carlo gradient variance over batches drawn uniformly without replacement."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    if not 1 <= batch_size <= dataset.n:
        raise ValueError(f"batch size {batch_size} outside [1, {dataset.n}]")
    W = _default_W(dataset, W)
    rng = as_rng(seed)
    grads = np.empty((n_samples, W.size))
    for s in range(n_samples):
        # a batch is a set; sorting makes its gradient independent of draw order
        idx = np.sort(rng.choice(dataset.n, size=batch_size, replace=False))
        y = None if dataset.labels is None else dataset.labels[idx]
        grads[s] = batch_gradient(loss_kind, W, dataset.inputs[idx], y).ravel()
    est, se = sample_variance(grads)
    cfg = {"loss_kind": loss_kind, "batch_size": batch_size, "n": dataset.n, "seed": seed}
    return VarianceReport(est, n_samples, se, cfg)


def grad_variance_exact(loss_kind: str, dataset: LabeledDataset, batch_size: int, W=None) -> VarianceReport:
    """Exact gradient variance by enumerating every batch (small ``n`` only)."""
    W = _default_W(dataset, W)
    grads = []
    for idx in itertools.combinations(range(dataset.n), batch_size):
        idx = np.array(idx)
        y = None if dataset.labels is None else dataset.labels[idx]
        grads.append(batch_gradient(loss_kind, W, dataset.inputs[idx], y).ravel())
    est = population_variance(grads) if len(grads) > 1 else 0.0
    return VarianceReport(est, len(grads), 0.0, {"loss_kind": loss_kind, "batch_size": batch_size, "n": dataset.n})


# ---------------------------------------------------------------------------
# synchronous parallel SGD over a partition


def parallel_sgd_epoch(loss_kind: str, dataset: LabeledDataset, partition: Partition, lr: float, W0=None) -> models.FlatParams:
    """``W - lr * sum_B grad L(B)``: one synchronous update over all batches of ``partition``."""
    partition.validate(dataset.n)
    W = _default_W(dataset, W0)
    total = np.zeros_like(W)
    for b in partition.batches:
        idx = np.sort(np.array(b))
        y = None if dataset.labels is None else dataset.labels[idx]
        total += batch_gradient(loss_kind, W, dataset.inputs[idx], y)
    return models.flatten(models.LinearEncoder(W - lr * total))


def partition_variance(
    loss_kind: str, dataset: LabeledDataset, batch_size: int, n_partitions: int, lr: float, seed=0, W0=None
) -> VarianceReport:
    """Variance of the end-of-epoch parameters over random partitions."""
    if n_partitions < 2:
        raise ValueError("n_partitions must be >= 2")
    rng = as_rng(seed)
    thetas = []
    for _ in range(n_partitions):
        part = make_partition(dataset.n, batch_size, rng)
        thetas.append(parallel_sgd_epoch(loss_kind, dataset, part, lr, W0).vector)
    est, se = sample_variance(thetas)
    cfg = {"loss_kind": loss_kind, "batch_size": batch_size, "lr": lr, "n": dataset.n, "seed": seed}
    return VarianceReport(est, n_partitions, se, cfg)


def adversarial_gap(loss_kind: str, dataset: LabeledDataset, batch_size: int, lr: float, W0=None) -> float:
    """Parameter distance between the class-interleaved and class-blocked partitions."""
    a = parallel_sgd_epoch(loss_kind, dataset, class_interleaved_partition(dataset.labels, batch_size), lr, W0)
    b = parallel_sgd_epoch(loss_kind, dataset, class_blocked_partition(dataset.labels, batch_size), lr, W0)
    return float(np.linalg.norm(a.vector - b.vector))


# ---------------------------------------------------------------------------
# trajectory variance


def trajectory_variance(
    loss_kind: str,
    dataset: LabeledDataset,
    init: models.Encoder,
    n_runs: int,
    lengths: Sequence[int],
    train_cfg: TrainConfig,
    seed: int = 0,
    targets=None,
) -> list[VarianceReport]:
    """End-weight variance after each trajectory length (in epochs).

    ``loss_kind`` is ``"kd"``, ``"sl"`` or ``"ssl"``. Run ``r`` trains from
    ``init`` with seed ``seed + r``, which only changes batch order and
    augmentation noise. Each run is trained once to ``max(lengths)`` epochs;
    its epoch-``L`` checkpoint is exactly the end of an ``L``-epoch run.
    """
    if n_runs < 2:
        raise ValueError("n_runs must be >= 2")
    lengths = [int(v) for v in lengths]
    if any(b < a for a, b in zip(lengths, lengths[1:])) or (lengths and lengths[0] < 0):
        raise ValueError("lengths must be non-negative and ascending")
    if loss_kind == "kd" and targets is None:
        raise ValueError("kd trajectories need teacher representations")
    if loss_kind == "sl":
        targets = dataset.labels
    cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "epochs": max(lengths, default=0)})
    runs = [train_encoder(loss_kind, dataset.inputs, targets, init.arch, cfg, seed + r, init=init).checkpoints for r in range(n_runs)]
    reports = []
    for L in lengths:
        est, se = sample_variance([c[L] for c in runs])
        reports.append(VarianceReport(est, n_runs, se, {"loss_kind": loss_kind, "length": L, "seed": seed}))
    return reports


def csv_rows(experiment: str, loss_kind: str, param: str, values, reports) -> list[dict]:
    return [
        {
            "experiment": experiment,
            "loss_kind": loss_kind,
            "param": param,
            "value": v,
            "estimate": r.estimate,
            "stderr": r.stderr,
            "n_samples": r.n_samples,
        }
        for v, r in zip(values, reports)
    ]


def write_variance_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
