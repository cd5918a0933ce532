"""Trajectory-matching distillation of synthetic inputs and a synthetic learning rate.

Each outer step samples an expert trajectory and a start epoch ``t``, unrolls
``N`` plain-SGD student updates on the synthetic set starting from the
expert's checkpoint ``t``, and scores the result against checkpoint
``t + expert_epochs`` with the normalized parameter-matching loss. The inner
updates are tensor expressions (closed-form gradients through the student),
so one reverse pass yields gradients for the synthetic inputs and for the
learning rate.

``mode="mkdt"`` matches KD experts with an MSE-to-representation inner loss;
``mode="naive-ssl"`` matches SSL experts with an SSL inner loss (Barlow Twins
or spectral contrastive) on augmented synthetic views.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import models
from .containers import (
    read_f64,
    read_header,
    read_u32_array,
    write_f64,
    write_header,
    write_u32_array,
)
from .datagen import LabeledDataset, as_rng
from .errors import ConfigError
from .losses import (
    BarlowTwinsConfig,
    DegenerateSegmentError,
    barlow_feature_grads,
    mse_output_grad,
    mtt_loss,
    per_example_kd,
    spectral_feature_grad,
)
from .tensor import Graph, ShapeError, Tensor, backward, mul, read_tensor_record, sub, take_rows, write_tensor_record

log = logging.getLogger(__name__)

SYN_MAGIC = b"MKDTSYND"
ALPHA_FLOOR = 1e-6
MODES = ("mkdt", "naive-ssl")
LOG_COLUMNS = ("step", "expert_id", "start_epoch", "mtt_loss", "alpha_syn", "pixel_change")


@dataclass
class SyntheticDataset:
    D: np.ndarray
    Z: np.ndarray
    alpha: float
    init_indices: np.ndarray

    def __post_init__(self):
        self.D = np.asarray(self.D, dtype=np.float64)
        self.Z = np.asarray(self.Z, dtype=np.float64)
        self.init_indices = np.asarray(self.init_indices, dtype=np.int64)
        if self.D.shape[0] != self.Z.shape[0]:
            raise ValueError(f"synthetic inputs ({self.D.shape[0]} rows) and targets ({self.Z.shape[0]}) misaligned")
        if not self.alpha > 0:
            raise ValueError("synthetic learning rate must be positive")

    @property
    def size(self) -> int:
        return self.D.shape[0]

    def copy(self) -> SyntheticDataset:
        return SyntheticDataset(self.D.copy(), self.Z.copy(), self.alpha, self.init_indices.copy())


@dataclass(frozen=True)
class DistillConfig:
    S: int = 300
    N: int = 10
    expert_epochs: int = 2
    T_plus: int = 2
    pixel_lr: float = 1.0
    alpha_lr: float = 1e-3
    batch_size: int | None = None
    momentum: float = 0.5
    alpha0: float = 0.1
    seed: int = 0
    mode: str = "mkdt"
    m: int = 2
    sigma_aug: float = 1.0
    ssl_loss: str = "barlow"
    bt_lambda: float = 5e-3
    log_every: int = 1

    def __post_init__(self):
        bad = []
        if self.S < 0:
            bad.append("S")
        if self.N < 1:
            bad.append("N")
        if self.expert_epochs < 1:
            bad.append("expert_epochs")
        if self.T_plus < 0:
            bad.append("T_plus")
        if not self.pixel_lr >= 0:
            bad.append("pixel_lr")
        if not self.alpha_lr >= 0:
            bad.append("alpha_lr")
        if self.batch_size is not None and self.batch_size < 1:
            bad.append("batch_size")
        if not self.alpha0 > 0:
            bad.append("alpha0")
        if self.mode not in MODES:
            bad.append("mode")
        if self.ssl_loss not in ("barlow", "spectral"):
            bad.append("ssl_loss")
        if self.ssl_loss == "barlow" and self.m != 2:
            bad.append("m")
        if self.log_every < 1:
            bad.append("log_every")
        if bad:
            raise ConfigError(f"invalid DistillConfig fields: {', '.join(bad)}", bad)

    def check_experts(self, experts) -> None:
        for i, e in enumerate(experts):
            if self.T_plus + self.expert_epochs > e.epochs:
                raise ConfigError(
                    f"expert {i} has {e.epochs} epochs; T_plus + expert_epochs = {self.T_plus + self.expert_epochs}",
                    ["T_plus", "expert_epochs"],
                )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Velocity:
    D: np.ndarray
    alpha: float = 0.0


@dataclass
class StepResult:
    loss: float
    syn: SyntheticDataset
    velocity: Velocity
    start_epoch: int
    skipped: bool = False


# ---------------------------------------------------------------------------
# initialization


def select_high_loss_init(dataset: LabeledDataset, experts, Z_T, size: int) -> np.ndarray:
    """Indices of the ``size`` examples with the largest mean epoch-1 KD loss across experts.

    Ties break toward the smaller index.
    """
    X = dataset.inputs if isinstance(dataset, LabeledDataset) else np.asarray(dataset)
    Z = np.asarray(getattr(Z_T, "Z", Z_T))
    if size > X.shape[0]:
        raise ValueError(f"requested {size} examples from a dataset of {X.shape[0]}")
    scores = example_scores(X, experts, Z)
    order = np.lexsort((np.arange(X.shape[0]), -scores))
    return order[:size]


def example_scores(X, experts, Z) -> np.ndarray:
    if not experts:
        raise ValueError("no expert trajectories given")
    total = np.zeros(X.shape[0])
    for e in experts:
        if e.epochs < 1:
            raise ValueError("expert has no epoch-1 checkpoint")
        total += per_example_kd(e.encoder_at(1), X, Z)
    return total / len(experts)


def select_random_init(n: int, size: int, seed) -> np.ndarray:
    if size > n:
        raise ValueError(f"requested {size} examples from a dataset of {n}")
    return np.sort(as_rng(seed).choice(n, size=size, replace=False))


def init_synthetic(dataset: LabeledDataset, Z_T, indices, alpha0: float = 0.1) -> SyntheticDataset:
    indices = np.asarray(indices, dtype=np.int64)
    X = dataset.inputs if isinstance(dataset, LabeledDataset) else np.asarray(dataset)
    Z = np.asarray(getattr(Z_T, "Z", Z_T))
    if indices.size and (indices.min() < 0 or indices.max() >= X.shape[0]):
        raise IndexError("initialization index outside the dataset")
    return SyntheticDataset(X[indices].copy(), Z[indices].copy(), alpha0, indices)


def pixel_change_metric(current, init) -> float:
    current = np.asarray(getattr(current, "D", current))
    init = np.asarray(getattr(init, "D", init))
    if current.shape != init.shape:
        raise ShapeError(f"pixel change: shape {current.shape} vs {init.shape}")
    return float(np.mean(np.abs(current - init)))


# ---------------------------------------------------------------------------
# the unroll


def _batch_schedule(s: int, batch_size: int | None, steps: int, rng) -> list[np.ndarray]:
    """Without-replacement passes over ``range(s)``, reshuffled whenever a pass runs out."""
    b = s if batch_size is None else min(batch_size, s)
    out, pool = [], np.empty(0, dtype=np.int64)
    for _ in range(steps):
        if pool.size < b:
            pool = np.concatenate([pool, rng.permutation(s)])
        out.append(pool[:b])
        pool = pool[b:]
    return out


def unroll(arch, theta0, D: Tensor, Z: np.ndarray, alpha: Tensor, schedule, mode="mkdt", m=2, noise=None, ssl_loss="barlow", bt_lambda=5e-3):
    """Student parameters after ``len(schedule)`` differentiable SGD steps from ``theta0``.

    In ``naive-ssl`` mode ``noise[n]`` holds the example-major view noise for step ``n``.
    """
    theta = [Tensor(p) for p in theta0]
    for n, idx in enumerate(schedule):
        if mode == "mkdt":
            cache: list = []
            out = models.apply(arch, theta, take_rows(D, idx), cache)
            grads = models.backprop(arch, theta, cache, mse_output_grad(out, Z[idx]))
        else:
            views = take_rows(D, np.repeat(idx, m)) + Tensor(noise[n])
            if ssl_loss == "spectral":
                cache = []
                F = models.apply(arch, theta, views, cache)
                grads = models.backprop(arch, theta, cache, spectral_feature_grad(F, m))
            else:
                ca, cb = [], []
                za = models.apply(arch, theta, views[0::2], ca)
                zb = models.apply(arch, theta, views[1::2], cb)
                ga, gb = barlow_feature_grads(za, zb, BarlowTwinsConfig(bt_lambda))
                grads = [x + y for x, y in zip(models.backprop(arch, theta, ca, ga), models.backprop(arch, theta, cb, gb))]
        theta = [sub(p, mul(alpha, g)) for p, g in zip(theta, grads)]
    return theta


def distill_step(syn: SyntheticDataset, expert, cfg: DistillConfig, rng, velocity: Velocity | None = None, start_epoch=None) -> StepResult:
    """One outer step: unroll, match, and update ``D`` and ``alpha`` with momentum SGD.

    A degenerate expert segment or a diverging unroll is skipped: ``syn`` and
    the velocity come back unchanged and ``skipped`` is set.
    """
    rng = as_rng(rng)
    if velocity is None:
        velocity = Velocity(np.zeros_like(syn.D))
    t = int(rng.integers(0, cfg.T_plus + 1)) if start_epoch is None else int(start_epoch)
    if t + cfg.expert_epochs > expert.epochs:
        raise ValueError(f"expert segment [{t}, {t + cfg.expert_epochs}] exceeds {expert.epochs} epochs")
    arch = expert.arch
    man = models.manifest(arch)
    start = expert.checkpoints[t]
    target = expert.checkpoints[t + cfg.expert_epochs]
    schedule = _batch_schedule(syn.size, cfg.batch_size, cfg.N, rng)
    noise = None
    if cfg.mode == "naive-ssl":
        noise = [cfg.sigma_aug * rng.standard_normal((len(idx) * cfg.m, syn.D.shape[1])) for idx in schedule]

    g = Graph()
    D = g.leaf(syn.D)
    alpha = g.leaf(np.asarray(syn.alpha))
    theta = unroll(
        arch, models.split_flat(start, man), D, syn.Z, alpha, schedule, cfg.mode, cfg.m, noise, cfg.ssl_loss, cfg.bt_lambda
    )
    try:
        loss = mtt_loss(theta, start, target)
    except DegenerateSegmentError:
        log.warning("skipping degenerate expert segment starting at epoch %d", t)
        g.free()
        return StepResult(float("nan"), syn, velocity, t, skipped=True)
    if not np.isfinite(loss.item()):
        log.warning("skipping step: unroll from epoch %d diverged (alpha_syn=%g)", t, syn.alpha)
        g.free()
        return StepResult(loss.item(), syn, velocity, t, skipped=True)
    gD, ga = backward(loss, [D, alpha])

    vD = cfg.momentum * velocity.D + gD.data
    va = cfg.momentum * velocity.alpha + float(ga.data)
    new = SyntheticDataset(
        syn.D - cfg.pixel_lr * vD,
        syn.Z,
        max(syn.alpha - cfg.alpha_lr * va, ALPHA_FLOOR),
        syn.init_indices,
    )
    return StepResult(loss.item(), new, Velocity(vD, va), t)


def distill(experts, init_indices, dataset: LabeledDataset, Z_T, cfg: DistillConfig):
    """Run ``cfg.S`` outer steps; returns the final synthetic set and the per-step log rows."""
    cfg.check_experts(experts)
    syn = init_synthetic(dataset, Z_T, init_indices, cfg.alpha0)
    return run_distillation(experts, syn, cfg)


def naive_mtt_ssl(experts_ssl, init_indices, dataset: LabeledDataset, cfg: DistillConfig, Z_T=None):
    """Same loop as :func:`distill` with SSL experts and the configured SSL inner loss.

    ``Z_T`` only fills the (unused) synthetic targets; zeros are used when absent.
    """
    if cfg.mode != "naive-ssl":
        cfg = DistillConfig(**{**cfg.to_dict(), "mode": "naive-ssl"})
    cfg.check_experts(experts_ssl)
    if Z_T is None:
        Z_T = np.zeros((dataset.n, experts_ssl[0].arch.d_out))
    syn = init_synthetic(dataset, Z_T, init_indices, cfg.alpha0)
    return run_distillation(experts_ssl, syn, cfg)


def run_distillation(experts, syn: SyntheticDataset, cfg: DistillConfig):
    """The outer loop shared by both modes; skipped steps are left out of the log."""
    rng = as_rng([cfg.seed, 2])
    init_D = syn.D.copy()
    velocity = None
    rows = []
    for step in range(cfg.S):
        k = int(rng.integers(len(experts)))
        res = distill_step(syn, experts[k], cfg, rng, velocity)
        syn, velocity = res.syn, res.velocity
        if res.skipped:
            continue
        if step % cfg.log_every == 0 or step == cfg.S - 1:
            rows.append(
                {
                    "step": step,
                    "expert_id": k,
                    "start_epoch": res.start_epoch,
                    "mtt_loss": res.loss,
                    "alpha_syn": syn.alpha,
                    "pixel_change": pixel_change_metric(syn.D, init_D),
                }
            )
    return syn, rows


def write_log_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# container: magic, version, init indices (u32 length + u32[]), D record, Z record, alpha f64


def save_synthetic(path, syn: SyntheticDataset) -> None:
    with open(path, "wb") as fh:
        write_header(fh, SYN_MAGIC)
        write_u32_array(fh, syn.init_indices)
        write_tensor_record(fh, syn.D)
        write_tensor_record(fh, syn.Z)
        write_f64(fh, syn.alpha)


def load_synthetic(path) -> SyntheticDataset:
    with open(path, "rb") as fh:
        read_header(fh, SYN_MAGIC)
        idx = read_u32_array(fh)
        D = read_tensor_record(fh)
        Z = read_tensor_record(fh)
        alpha = read_f64(fh)
    return SyntheticDataset(D, Z, alpha, idx)
