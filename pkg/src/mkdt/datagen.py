"""Sparse-coding toy data, additive-noise augmentation, and batch partitions.

Randomness comes from numpy's PCG64 bit generator (``np.random.default_rng``)
with Gaussian variates drawn by its ziggurat sampler, so every stream is a
deterministic function of its integer seed.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np

from .containers import read_header, read_u32, write_header, write_u32
from .errors import ConfigError, TruncatedError
from .tensor import _read_exact, read_tensor_record, write_tensor_record

DATA_MAGIC = b"MKDTDATA"


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class SparseCodingConfig:
    """``x = e_k + eps`` with ``eps ~ N(0, sigma_noise**2 I)``; ``sigma_*`` are standard deviations."""

    d: int = 8
    num_classes: int = 2
    n: int = 1000
    sigma_noise: float = 0.1
    sigma_aug: float = 1.0
    m: int = 2
    seed: int = 0

    def __post_init__(self):
        bad = []
        if self.d < 1:
            bad.append("d")
        if not 1 <= self.num_classes <= self.d:
            bad.append("num_classes")
        if self.n < 1 or self.n % self.num_classes:
            bad.append("n")
        if self.sigma_noise < 0:
            bad.append("sigma_noise")
        if self.sigma_aug < 0:
            bad.append("sigma_aug")
        if self.m < 1:
            bad.append("m")
        if bad:
            raise ConfigError(f"invalid SparseCodingConfig fields: {', '.join(bad)}", bad)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray | None = None
    metadata: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be a matrix, got shape {self.inputs.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n,):
                raise ValueError(f"labels shape {self.labels.shape} does not match n={self.n}")
            if self.labels.size and self.labels.min() < 0:
                raise ValueError("labels must be non-negative")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    @property
    def num_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1

    def subset(self, index) -> LabeledDataset:
        index = np.asarray(index, dtype=np.intp)
        labels = None if self.labels is None else self.labels[index]
        return LabeledDataset(self.inputs[index], labels, f"{self.metadata}[subset {index.size}]")


@dataclass(frozen=True)
class Partition:
    batches: tuple[tuple[int, ...], ...]

    @property
    def batch_size(self) -> int:
        return len(self.batches[0])

    def canonical(self) -> frozenset:
        """Order-free form, handy for counting distinct partitions."""
        return frozenset(frozenset(b) for b in self.batches)

    def validate(self, n: int) -> None:
        flat = [i for b in self.batches for i in b]
        if sorted(flat) != list(range(n)):
            raise ValueError("partition batches are not an exact cover of the dataset")
        if len({len(b) for b in self.batches}) != 1:
            raise ValueError("partition batches differ in size")


def generate_sparse_coding(cfg: SparseCodingConfig) -> LabeledDataset:
    """Class-blocked rows: the first ``n/K`` examples are class 0, and so on."""
    rng = as_rng(cfg.seed)
    per = cfg.n // cfg.num_classes
    labels = np.repeat(np.arange(cfg.num_classes), per)
    inputs = np.zeros((cfg.n, cfg.d))
    inputs[np.arange(cfg.n), labels] = 1.0
    inputs += cfg.sigma_noise * rng.standard_normal((cfg.n, cfg.d))
    return LabeledDataset(inputs, labels, f"sparse-coding {cfg.to_dict()}")


def generate_with_outliers(
    cfg: SparseCodingConfig, fraction: float = 0.05, scale: float = 4.0
) -> tuple[LabeledDataset, np.ndarray]:
    """Sparse-coding data where a random ``fraction`` of rows get ``scale`` times the noise.

    Returns the dataset and the sorted planted indices.
    """
    data = generate_sparse_coding(cfg)
    rng = as_rng([cfg.seed, 1])
    count = int(round(fraction * cfg.n))
    planted = np.sort(rng.choice(cfg.n, size=count, replace=False))
    clean = np.zeros((count, cfg.d))
    clean[np.arange(count), data.labels[planted]] = 1.0
    # Rescale the already-drawn noise so the rest of the dataset is untouched.
    data.inputs[planted] = clean + scale * (data.inputs[planted] - clean)
    data.metadata += f" planted={count}x{scale}"
    return data, planted


def augment(x, m: int, sigma_aug: float, seed) -> np.ndarray:
    """``m`` noisy views of each row of ``x``.

    A vector gives an ``(m, d)`` array; a ``(b, d)`` batch gives ``(b*m, d)``
    with the views of example ``i`` in rows ``i*m .. i*m+m-1``.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    rows = np.atleast_2d(x)
    rng = as_rng(seed)
    views = np.repeat(rows, m, axis=0)
    if sigma_aug > 0:
        views = views + sigma_aug * rng.standard_normal(views.shape)
    return views


def make_partition(n: int | LabeledDataset, batch_size: int, seed) -> Partition:
    if isinstance(n, LabeledDataset):
        n = n.n
    if batch_size < 1 or n % batch_size:
        raise ValueError(f"dataset size {n} is not divisible by batch size {batch_size}")
    perm = as_rng(seed).permutation(n)
    return Partition(tuple(tuple(int(i) for i in row) for row in perm.reshape(-1, batch_size)))


def class_interleaved_partition(labels, batch_size: int) -> Partition:
    """Each batch cycles over classes taking one remaining example from each."""
    labels = np.asarray(labels)
    queues = [list(np.flatnonzero(labels == k)) for k in range(int(labels.max()) + 1)]
    order = []
    for k in itertools.cycle(range(len(queues))):
        if not any(queues):
            break
        if queues[k]:
            order.append(int(queues[k].pop(0)))
    return _chunk(order, batch_size)


def class_blocked_partition(labels, batch_size: int) -> Partition:
    """Each batch is filled from one class before moving to the next."""
    labels = np.asarray(labels)
    order = [int(i) for k in range(int(labels.max()) + 1) for i in np.flatnonzero(labels == k)]
    return _chunk(order, batch_size)


def _chunk(order, batch_size):
    if len(order) % batch_size:
        raise ValueError(f"dataset size {len(order)} is not divisible by batch size {batch_size}")
    return Partition(tuple(tuple(order[i : i + batch_size]) for i in range(0, len(order), batch_size)))


def enumerate_partitions(n: int, batch_size: int):
    """Yield every unordered partition of ``range(n)`` into equal batches (small n only)."""

    def rec(remaining):
        if not remaining:
            yield ()
            return
        first, rest = remaining[0], remaining[1:]
        for others in itertools.combinations(rest, batch_size - 1):
            left = [i for i in rest if i not in others]
            for tail in rec(left):
                yield ((first, *others),) + tail

    yield from (Partition(p) for p in rec(list(range(n))))


# ---------------------------------------------------------------------------
# container: magic, version u32, flags u32 (bit 0: labels), n u32, inputs record, labels u32[n]


def save_dataset(path, data: LabeledDataset) -> None:
    with open(path, "wb") as fh:
        write_header(fh, DATA_MAGIC)
        write_u32(fh, 1 if data.labels is not None else 0)
        write_u32(fh, data.n)
        write_tensor_record(fh, data.inputs)
        if data.labels is not None:
            fh.write(np.ascontiguousarray(data.labels, dtype="<u4").tobytes())


def load_dataset(path) -> LabeledDataset:
    with open(path, "rb") as fh:
        read_header(fh, DATA_MAGIC)
        flags = read_u32(fh)
        n = read_u32(fh)
        inputs = read_tensor_record(fh)
        if inputs.ndim != 2 or inputs.shape[0] != n:
            raise TruncatedError(f"truncated or inconsistent: header n={n}, inputs {inputs.shape}")
        labels = None
        if flags & 1:
            labels = np.frombuffer(_read_exact(fh, 4 * n), dtype="<u4").astype(np.int64)
    return LabeledDataset(inputs, labels, f"loaded from {path}")
