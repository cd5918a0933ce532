"""Pre-training on a (synthetic) set and linear-probe evaluation of frozen encoders."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from . import models
from .datagen import LabeledDataset, as_rng
from .distill import SyntheticDataset
from .errors import ConfigError
from .trajectories import TrainConfig, train_encoder

REPORT_COLUMNS = ("method", "seed", "label_fraction", "accuracy", "err")


@dataclass(frozen=True)
class ProbeConfig:
    l2_weight: float = 1e-3
    label_fraction: float = 0.05
    max_iter: int = 2000
    grad_tol: float = 1e-7
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        bad = []
        if self.l2_weight < 0:
            bad.append("l2_weight")
        if not 0 < self.label_fraction <= 1:
            bad.append("label_fraction")
        if not 0 < self.test_fraction < 1:
            bad.append("test_fraction")
        if bad:
            raise ConfigError(f"invalid ProbeConfig fields: {', '.join(bad)}", bad)


@dataclass
class ProbeResult:
    accuracy: float
    err: float
    per_class: dict[int, float]
    config: ProbeConfig
    grad_norm: float = 0.0
    n_train: int = 0
    n_test: int = 0


def pretrain_on_synthetic(
    syn: SyntheticDataset,
    arch: models.ArchSpec,
    epochs: int = 20,
    seed: int = 0,
    lr: float | None = None,
    batch_size: int = 256,
    momentum: float = 0.0,
    weight_decay: float = 1e-4,
) -> models.Encoder:
    """KD-MSE training on ``(D, Z)`` with step size ``syn.alpha`` unless ``lr`` is given.

    Momentum defaults to 0 so training uses the same plain-SGD update the
    synthetic learning rate was fitted for.
    """
    if arch.d_in != syn.D.shape[1] or arch.d_out != syn.Z.shape[1]:
        raise ValueError(f"architecture {arch.dims} does not match synthetic data {syn.D.shape} -> {syn.Z.shape}")
    cfg = TrainConfig(
        epochs=epochs,
        batch_size=batch_size,
        lr=syn.alpha if lr is None else lr,
        momentum=momentum,
        weight_decay=weight_decay,
    )
    return train_encoder("kd", syn.D, syn.Z, arch, cfg, seed).encoder


def stratified_split(labels, test_fraction: float, seed) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    rng = as_rng(seed)
    train, test = [], []
    for k in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == k))
        cut = int(round(test_fraction * idx.size))
        test.append(idx[:cut])
        train.append(idx[cut:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def stratified_fraction(labels, index, fraction: float, seed) -> np.ndarray:
    """At least one example per class present in ``index``."""
    labels = np.asarray(labels)
    rng = as_rng(seed)
    out = []
    for k in np.unique(labels[index]):
        idx = rng.permutation(index[labels[index] == k])
        out.append(idx[: max(1, int(round(fraction * idx.size)))])
    return np.sort(np.concatenate(out))


def fit_logistic(H: np.ndarray, y: np.ndarray, num_classes: int, l2: float, max_iter: int, grad_tol: float):
    """Multinomial logistic regression: mean cross-entropy + ``l2 * ||W||^2`` (bias unpenalized)."""
    n, r = H.shape
    Y = np.zeros((n, num_classes))
    Y[np.arange(n), y] = 1.0
    Hb = np.hstack([H, np.ones((n, 1))])

    def fg(w):
        Wb = w.reshape(r + 1, num_classes)
        logits = Hb @ Wb
        lse = logsumexp(logits, axis=1, keepdims=True)
        P = np.exp(logits - lse)
        f = float(np.sum(lse[:, 0] - np.sum(logits * Y, axis=1))) / n + l2 * np.sum(Wb[:-1] ** 2)
        G = Hb.T @ (P - Y) / n
        G[:-1] += 2.0 * l2 * Wb[:-1]
        return f, G.ravel()

    w0 = np.zeros((r + 1) * num_classes)
    res = minimize(fg, w0, jac=True, method="L-BFGS-B", options={"maxiter": max_iter, "gtol": grad_tol, "ftol": 0.0})
    grad_norm = float(np.linalg.norm(fg(res.x)[1]))
    return res.x.reshape(r + 1, num_classes), grad_norm


def linear_probe(encoder, dataset: LabeledDataset, cfg: ProbeConfig = ProbeConfig()) -> ProbeResult:
    """Probe frozen representations: train on a labeled fraction of the train split, score the test split."""
    if dataset.labels is None or dataset.n == 0:
        raise ValueError("linear probe needs a non-empty labeled dataset")
    labels = dataset.labels
    K = int(labels.max()) + 1
    for k in range(K):
        if not np.any(labels == k):
            raise ValueError(f"class {k} has no examples")
    train, test = stratified_split(labels, cfg.test_fraction, [cfg.seed, 0])
    missing = sorted(set(range(K)) - set(labels[train].tolist()))
    if missing:
        raise ValueError(f"class {missing[0]} has no examples in the train split")
    labeled = stratified_fraction(labels, train, cfg.label_fraction, [cfg.seed, 1])
    H = encoder_features(encoder, dataset.inputs)
    Wb, gnorm = fit_logistic(H[labeled], labels[labeled], K, cfg.l2_weight, cfg.max_iter, cfg.grad_tol)
    pred = np.argmax(np.hstack([H[test], np.ones((test.size, 1))]) @ Wb, axis=1)
    correct = pred == labels[test]
    acc = float(np.mean(correct))
    per_class = {k: float(np.mean(correct[labels[test] == k])) for k in range(K) if np.any(labels[test] == k)}
    return ProbeResult(acc, 1.0 - acc, per_class, cfg, gnorm, labeled.size, test.size)


def encoder_features(encoder, X) -> np.ndarray:
    if encoder is None:
        return np.asarray(X, dtype=np.float64)
    return models.forward(encoder, X)


@dataclass
class MethodSummary:
    method: str
    mean: float
    std: float
    accuracies: list[float] = field(default_factory=list)


def compare_methods(
    dataset: LabeledDataset,
    methods: Mapping[str, Callable[[int], models.Encoder]],
    probe_cfg: ProbeConfig = ProbeConfig(),
    n_seeds: int = 5,
):
    """Probe every method's encoder for seeds ``0..n_seeds-1``.

    Each method is a callable ``seed -> encoder``. The probe split for seed
    ``s`` is shared across methods. Returns ``(rows, summaries)``.
    """
    rows, summaries = [], []
    for name, build in methods.items():
        accs = []
        for seed in range(n_seeds):
            cfg = ProbeConfig(**{**asdict(probe_cfg), "seed": probe_cfg.seed + seed})
            res = linear_probe(build(seed), dataset, cfg)
            accs.append(res.accuracy)
            rows.append(
                {"method": name, "seed": seed, "label_fraction": cfg.label_fraction, "accuracy": res.accuracy, "err": res.err}
            )
        summaries.append(MethodSummary(name, mean_std(accs)[0], mean_std(accs)[1], accs))
    return rows, summaries


def mean_std(values) -> tuple[float, float]:
    """Two-pass mean and sample standard deviation (0 for a single value)."""
    values = [float(v) for v in values]
    mu = sum(values) / len(values)
    if len(values) < 2:
        return mu, 0.0
    return mu, (sum((v - mu) ** 2 for v in values) / (len(values) - 1)) ** 0.5


def write_report_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
