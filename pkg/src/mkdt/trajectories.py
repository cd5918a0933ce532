"""Teacher training, teacher representations, and expert trajectories.

All training runs share :func:`train_encoder`: minibatch SGD (momentum and
weight decay, PyTorch convention) or Adam over one of three objectives

* ``"kd"``  -- MSE to stored teacher representations,
* ``"sl"``  -- MSE to one-hot labels,
* ``"ssl"`` -- Barlow Twins or spectral contrastive loss on additive-noise views.

A run is a deterministic function of its seed: initialization draws from the
stream ``[seed, 0]`` and batch order / augmentation noise from ``[seed, 1]``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import models
from .containers import read_blob, read_header, read_u32, write_blob, write_header, write_u32
from .datagen import LabeledDataset, as_rng
from .errors import ConfigError
from .losses import (
    BarlowTwinsConfig,
    barlow_twins,
    one_hot,
    spectral_contrastive,
    mse_to_targets,
)
from .tensor import Graph, Tensor, backward, read_tensor_record, write_tensor_record

log = logging.getLogger(__name__)

TRAJ_MAGIC = b"MKDTTRAJ"
REPS_MAGIC = b"MKDTREPS"
OBJECTIVES = ("kd", "sl", "ssl")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    optimizer: str = "sgd"
    ssl_loss: str = "barlow"
    sigma_aug: float = 1.0
    m: int = 2
    bt_lambda: float = 5e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        bad = []
        if self.epochs < 0:
            bad.append("epochs")
        if self.batch_size < 1:
            bad.append("batch_size")
        if self.lr < 0:
            bad.append("lr")
        if self.optimizer not in ("sgd", "adam"):
            bad.append("optimizer")
        if self.ssl_loss not in ("barlow", "spectral"):
            bad.append("ssl_loss")
        if self.m < 1:
            bad.append("m")
        if bad:
            raise ConfigError(f"invalid TrainConfig fields: {', '.join(bad)}", bad)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}", sorted(unknown))
        return cls(**d)


TEACHER_DEFAULTS = TrainConfig(
    epochs=60, batch_size=128, lr=0.01, momentum=0.9, weight_decay=0.0, sigma_aug=0.3, bt_lambda=0.02
)
EXPERT_DEFAULTS = TrainConfig(epochs=20, batch_size=64, lr=0.1, momentum=0.9, weight_decay=1e-4)


@dataclass
class TrainResult:
    encoder: models.Encoder
    checkpoints: list[np.ndarray]
    epoch_loss: list[float]
    eval_loss: list[float]


class _Optimizer:
    def __init__(self, cfg: TrainConfig, params: list[np.ndarray]):
        self.cfg = cfg
        self.state = [np.zeros_like(p) for p in params]
        self.state2 = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        cfg = self.cfg
        self.t += 1
        out = []
        for k, (p, g) in enumerate(zip(params, grads)):
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p
            if cfg.optimizer == "sgd":
                if cfg.momentum:
                    self.state[k] = cfg.momentum * self.state[k] + g
                    g = self.state[k]
                out.append(p - cfg.lr * g)
            else:
                b1, b2 = cfg.adam_betas
                self.state[k] = b1 * self.state[k] + (1 - b1) * g
                self.state2[k] = b2 * self.state2[k] + (1 - b2) * g * g
                mhat = self.state[k] / (1 - b1**self.t)
                vhat = self.state2[k] / (1 - b2**self.t)
                out.append(p - cfg.lr * mhat / (np.sqrt(vhat) + cfg.adam_eps))
        return out


def objective_loss(objective: str, f, X, targets, cfg: TrainConfig, noise_seed) -> Tensor:
    if objective == "kd":
        return mse_to_targets(f(X), targets)
    if objective == "sl":
        return mse_to_targets(f(X), one_hot(targets, f.arch.d_out))
    if cfg.ssl_loss == "barlow":
        return barlow_twins(f, X, BarlowTwinsConfig(cfg.bt_lambda), cfg.sigma_aug, noise_seed)
    return spectral_contrastive(f, X, cfg.m, cfg.sigma_aug, noise_seed)


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator, min_size: int = 1) -> list[np.ndarray]:
    perm = rng.permutation(n)
    batches = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if batches and len(batches[-1]) < min_size:
        batches.pop()
    return batches


def train_encoder(
    objective: str,
    X: np.ndarray,
    targets,
    arch: models.ArchSpec,
    cfg: TrainConfig,
    seed: int,
    init: models.Encoder | None = None,
    eval_seed: int = 12345,
) -> TrainResult:
    """Train from ``init`` (or a seeded fan-in init) and checkpoint after every epoch.

    ``targets`` is the teacher representation matrix for ``kd``, the label
    vector for ``sl`` and ignored for ``ssl``. ``eval_loss[e]`` is the full-data
    objective at checkpoint ``e`` (SSL views use the fixed ``eval_seed``).
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    X = np.asarray(X, dtype=np.float64)
    if objective == "ssl" and cfg.ssl_loss == "barlow" and min(cfg.batch_size, X.shape[0]) < 2:
        raise ValueError("Barlow Twins training needs batch size >= 2")
    if objective == "kd":
        targets = np.asarray(targets, dtype=np.float64)
        if targets.shape[0] != X.shape[0]:
            raise ValueError(f"teacher representations have {targets.shape[0]} rows for {X.shape[0]} examples")
    enc = init if init is not None else models.init(arch, "fan_in", [seed, 0])
    arch = enc.arch
    rng = as_rng([seed, 1])
    params = [p.copy() for p in enc.params]
    opt = _Optimizer(cfg, params)
    min_size = 2 if objective == "ssl" else 1

    def full_loss(ps):
        return objective_loss(objective, models.Bound(arch, [Tensor(p) for p in ps]), X, targets, cfg, eval_seed).item()

    checkpoints = [np.concatenate([p.ravel() for p in params])]
    eval_loss = [full_loss(params)]
    epoch_loss = []
    for _ in range(cfg.epochs):
        batch_losses = []
        for idx in epoch_batches(X.shape[0], cfg.batch_size, rng, min_size):
            g = Graph()
            f = models.Bound(arch, [g.leaf(p) for p in params])
            tgt = None if objective == "ssl" else targets[idx]
            loss = objective_loss(objective, f, X[idx], tgt, cfg, rng)
            if not np.isfinite(loss.item()):
                g.free()
                raise FloatingPointError(f"training diverged in epoch {len(epoch_loss) + 1} (loss {loss.item()})")
            batch_losses.append(loss.item())
            grads = [t.data for t in backward(loss, f.params)]
            params = opt.step(params, grads)
        epoch_loss.append(float(np.mean(batch_losses)) if batch_losses else float("nan"))
        checkpoints.append(np.concatenate([p.ravel() for p in params]))
        eval_loss.append(full_loss(params))
    return TrainResult(models.from_params(arch, params), checkpoints, epoch_loss, eval_loss)


# ---------------------------------------------------------------------------
# teacher


@dataclass
class TeacherRepresentations:
    Z: np.ndarray
    teacher_hash: str


def train_teacher_ssl(
    dataset: LabeledDataset, arch: models.ArchSpec, cfg: TrainConfig = TEACHER_DEFAULTS, seed: int = 0
) -> TrainResult:
    """Barlow Twins (or spectral) pre-training of the teacher; labels are ignored."""
    if cfg.ssl_loss == "barlow" and cfg.batch_size < 2:
        raise ValueError("Barlow Twins training needs batch size >= 2")
    return train_encoder("ssl", dataset.inputs, None, arch, cfg, seed)


def compute_teacher_reps(teacher: models.Encoder, dataset: LabeledDataset | np.ndarray) -> TeacherRepresentations:
    X = dataset.inputs if isinstance(dataset, LabeledDataset) else np.asarray(dataset)
    return TeacherRepresentations(models.forward(teacher, X), models.param_hash(teacher))


# container: magic, version, teacher hash (u32 length + UTF-8), Z record


def save_teacher_reps(path, reps: TeacherRepresentations) -> None:
    with open(path, "wb") as fh:
        write_header(fh, REPS_MAGIC)
        write_blob(fh, reps.teacher_hash.encode("utf-8"))
        write_tensor_record(fh, reps.Z)


def load_teacher_reps(path) -> TeacherRepresentations:
    with open(path, "rb") as fh:
        read_header(fh, REPS_MAGIC)
        h = read_blob(fh).decode("utf-8")
        Z = read_tensor_record(fh)
    if Z.ndim != 2:
        raise ValueError(f"teacher representations must be a matrix, got shape {Z.shape}")
    return TeacherRepresentations(Z, h)


# ---------------------------------------------------------------------------
# expert trajectories


@dataclass
class ExpertTrajectory:
    checkpoints: list[np.ndarray]
    arch: models.ArchSpec
    config: TrainConfig
    seed: int
    objective: str = "kd"
    eval_loss: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.checkpoints) < 2:
            raise ValueError("an expert trajectory needs at least 2 checkpoints")
        size = self.checkpoints[0].size
        if any(c.shape != (size,) for c in self.checkpoints):
            raise ValueError("checkpoints do not share one manifest")

    @property
    def epochs(self) -> int:
        return len(self.checkpoints) - 1

    def encoder_at(self, epoch: int) -> models.Encoder:
        return models.unflatten(self.checkpoints[epoch], self.arch)

    def meta(self) -> dict:
        return {
            "arch": self.arch.to_dict(),
            "train": self.config.to_dict(),
            "seed": self.seed,
            "objective": self.objective,
            "eval_loss": list(self.eval_loss),
        }


def train_expert_kd(
    dataset: LabeledDataset,
    Z_T: np.ndarray | TeacherRepresentations,
    arch: models.ArchSpec,
    cfg: TrainConfig = EXPERT_DEFAULTS,
    seed: int = 0,
    init: models.Encoder | None = None,
) -> ExpertTrajectory:
    Z = Z_T.Z if isinstance(Z_T, TeacherRepresentations) else np.asarray(Z_T)
    if Z.shape[0] != dataset.n:
        raise ValueError(f"teacher representations ({Z.shape[0]} rows) are not aligned with {dataset.n} examples")
    res = train_encoder("kd", dataset.inputs, Z, arch, cfg, seed, init=init)
    return ExpertTrajectory(res.checkpoints, arch, cfg, seed, "kd", res.eval_loss)


def train_expert_ssl(
    dataset: LabeledDataset, arch: models.ArchSpec, cfg: TrainConfig, seed: int = 0
) -> ExpertTrajectory:
    res = train_encoder("ssl", dataset.inputs, None, arch, cfg, seed)
    return ExpertTrajectory(res.checkpoints, arch, cfg, seed, "ssl", res.eval_loss)


def train_experts(dataset, Z_T, arch, cfg=EXPERT_DEFAULTS, k: int = 10, base_seed: int = 0, objective: str = "kd", threads: int = 1):
    """``k`` experts with seeds ``base_seed + i``; results are ordered by seed regardless of ``threads``."""
    seeds = [base_seed + i for i in range(k)]

    def one(s):
        if objective == "kd":
            return train_expert_kd(dataset, Z_T, arch, cfg, s)
        return train_expert_ssl(dataset, arch, cfg, s)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, seeds))
    return [one(s) for s in seeds]


# container: magic, version, config JSON (u32 length + UTF-8), count u32, tensor records


def save_trajectory(path, traj: ExpertTrajectory) -> None:
    with open(path, "wb") as fh:
        write_header(fh, TRAJ_MAGIC)
        write_blob(fh, json.dumps(traj.meta(), sort_keys=True).encode("utf-8"))
        write_u32(fh, len(traj.checkpoints))
        for c in traj.checkpoints:
            write_tensor_record(fh, c)


def load_trajectory(path) -> ExpertTrajectory:
    with open(path, "rb") as fh:
        read_header(fh, TRAJ_MAGIC)
        meta = json.loads(read_blob(fh).decode("utf-8"))
        count = read_u32(fh)
        checkpoints = [read_tensor_record(fh) for _ in range(count)]
    return ExpertTrajectory(
        checkpoints,
        models.ArchSpec.from_dict(meta["arch"]),
        TrainConfig.from_dict(meta["train"]),
        meta["seed"],
        meta.get("objective", "kd"),
        meta.get("eval_loss", []),
    )

