"""Small encoders whose parameter gradients can be written as tensor expressions.

Encoders are immutable values holding numpy parameter arrays. The
differentiable entry points (:func:`apply` and :func:`backprop`) take the
parameters as a list of :class:`~mkdt.tensor.Tensor` objects so the same code
builds inner-loop updates inside an autodiff graph.

Flat parameter order: for each layer, the weight matrix in row-major order,
then (MLP only) its bias vector.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .containers import read_blob, read_header, write_blob, write_header
from .datagen import as_rng
from .tensor import Tensor, as_tensor, matmul, mul, read_tensor_record, reshape, tanh, relu, ShapeError, write_tensor_record

ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class ArchSpec:
    kind: str  # "linear" | "mlp"
    dims: tuple[int, ...]  # (d_in, hidden..., d_out)
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.kind not in ("linear", "mlp"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "linear" and len(self.dims) != 2:
            raise ValueError("linear encoder needs dims (d_in, d_out)")
        if self.kind == "mlp" and len(self.dims) < 2:
            raise ValueError("mlp needs at least (d_in, d_out)")
        if any(d < 1 for d in self.dims):
            raise ValueError(f"non-positive layer width in {self.dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def d_in(self) -> int:
        return self.dims[0]

    @property
    def d_out(self) -> int:
        return self.dims[-1]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dims": list(self.dims), "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> ArchSpec:
        return cls(d["kind"], tuple(d["dims"]), d.get("activation", "tanh"))


def teacher_arch(d_in: int, hidden: int = 64, r: int = 16) -> ArchSpec:
    return ArchSpec("mlp", (d_in, hidden, r), "tanh")


def student_arch(d_in: int, hidden: int = 16, r: int = 16) -> ArchSpec:
    return ArchSpec("mlp", (d_in, hidden, r), "tanh")


@dataclass(frozen=True)
class LinearEncoder:
    W: np.ndarray

    @property
    def arch(self) -> ArchSpec:
        return ArchSpec("linear", (self.W.shape[1], self.W.shape[0]))

    @property
    def params(self) -> list[np.ndarray]:
        return [self.W]


@dataclass(frozen=True)
class MLPEncoder:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases differ in length")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise ValueError(f"layer {k}: bias shape {b.shape} does not match weight {w.shape}")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k}: input width {w.shape[1]} != previous output {self.weights[k - 1].shape[0]}")

    @property
    def arch(self) -> ArchSpec:
        dims = (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)
        return ArchSpec("mlp", dims, self.activation)

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


Encoder = LinearEncoder | MLPEncoder


def manifest(arch: ArchSpec) -> tuple[tuple[str, tuple[int, ...]], ...]:
    if arch.kind == "linear":
        return (("W", (arch.d_out, arch.d_in)),)
    entries = []
    for k, (a, b) in enumerate(zip(arch.dims[:-1], arch.dims[1:])):
        entries.append((f"layer{k}.weight", (b, a)))
        entries.append((f"layer{k}.bias", (b,)))
    return tuple(entries)


def from_params(arch: ArchSpec, params: Sequence[np.ndarray]) -> Encoder:
    params = [np.array(p, dtype=np.float64) for p in params]
    expected = manifest(arch)
    if len(params) != len(expected) or any(p.shape != s for p, (_, s) in zip(params, expected)):
        raise ShapeError(f"parameter shapes {[p.shape for p in params]} do not match manifest {expected}")
    if arch.kind == "linear":
        return LinearEncoder(params[0])
    return MLPEncoder(tuple(params[0::2]), tuple(params[1::2]), arch.activation)


def init(arch: ArchSpec, scheme: str = "fan_in", seed=0) -> Encoder:
    """Build an encoder.

    ``identity``: W = I (square linear encoders only). ``fan_in``: weights
    uniform on ``[-sqrt(3/fan_in), sqrt(3/fan_in)]`` (std ``1/sqrt(fan_in)``),
    zero biases. ``zeros``: all parameters zero.
    """
    if scheme == "identity":
        if arch.kind != "linear" or arch.d_in != arch.d_out:
            raise ValueError(f"identity init needs a square linear encoder, got {arch.to_dict()}")
        return LinearEncoder(np.eye(arch.d_in))
    rng = as_rng(seed)
    params = []
    for name, shape in manifest(arch):
        if scheme == "zeros" or name.endswith("bias"):
            params.append(np.zeros(shape))
        elif scheme == "fan_in":
            bound = np.sqrt(3.0 / shape[1])
            params.append(rng.uniform(-bound, bound, size=shape))
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
    return from_params(arch, params)


# ---------------------------------------------------------------------------
# flat parameter vectors


@dataclass(frozen=True)
class FlatParams:
    vector: np.ndarray
    manifest: tuple[tuple[str, tuple[int, ...]], ...] = field(default=())

    def __post_init__(self):
        total = sum(int(np.prod(s)) for _, s in self.manifest)
        if self.vector.ndim != 1 or self.vector.size != total:
            raise ShapeError(f"flat vector of size {self.vector.size} does not match manifest total {total}")


def flatten(enc: Encoder) -> FlatParams:
    vec = np.concatenate([p.ravel() for p in enc.params])
    return FlatParams(vec, manifest(enc.arch))


def split_flat(vector: np.ndarray, man) -> list[np.ndarray]:
    out, offset = [], 0
    for _, shape in man:
        size = int(np.prod(shape))
        out.append(vector[offset : offset + size].reshape(shape).copy())
        offset += size
    return out


def unflatten(flat: FlatParams | np.ndarray, arch: ArchSpec) -> Encoder:
    man = manifest(arch)
    if isinstance(flat, FlatParams):
        if tuple(flat.manifest) != man:
            raise ShapeError(f"manifest mismatch: {flat.manifest} vs {man}")
        vector = flat.vector
    else:
        vector = np.asarray(flat, dtype=np.float64)
        if vector.size != sum(int(np.prod(s)) for _, s in man):
            raise ShapeError(f"flat vector of size {vector.size} does not match {man}")
    return from_params(arch, split_flat(vector, man))


def param_hash(enc: Encoder) -> str:
    h = hashlib.sha256()
    for p in enc.params:
        h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# differentiable forward/backprop over parameter tensors


def _ones(n: int, k: int = 1) -> Tensor:
    return Tensor(np.ones((n, k)))


def apply(arch: ArchSpec, params: Sequence[Tensor], X, cache: list | None = None) -> Tensor:
    """Representations ``f(X)`` row by row; optionally records layer inputs in ``cache``."""
    X = as_tensor(X)
    if X.data.ndim != 2 or X.shape[1] != arch.d_in:
        raise ShapeError(f"forward: batch shape {X.shape} does not match encoder input dim {arch.d_in}")
    if arch.kind == "linear":
        if cache is not None:
            cache.append(X)
        return matmul(X, params[0].T)
    n = X.shape[0]
    a = X
    layers = len(params) // 2
    for k in range(layers):
        W, b = params[2 * k], params[2 * k + 1]
        if cache is not None:
            cache.append(a)
        h = matmul(a, W.T) + matmul(_ones(n), reshape(b, (1, b.shape[0])))
        a = h if k == layers - 1 else _activate(arch.activation, h)
    return a


def _activate(name: str, h: Tensor) -> Tensor:
    return tanh(h) if name == "tanh" else relu(h)


def backprop(arch: ArchSpec, params: Sequence[Tensor], cache: Sequence[Tensor], G: Tensor) -> list[Tensor]:
    """Parameter gradients given ``G = dLoss/dOutput`` and the layer inputs from :func:`apply`.

    Built from ordinary tensor ops, so the result is itself differentiable.
    The derivative of relu is treated as a constant mask.
    """
    if arch.kind == "linear":
        return [matmul(G.T, cache[0])]
    layers = len(params) // 2
    grads: list[Tensor] = [None] * len(params)
    delta = G
    n = G.shape[0]
    for k in range(layers - 1, -1, -1):
        a_in = cache[k]
        grads[2 * k] = matmul(delta.T, a_in)
        grads[2 * k + 1] = reshape(matmul(Tensor(np.ones((1, n))), delta), (delta.shape[1],))
        if k:
            back = matmul(delta, params[2 * k])
            if arch.activation == "tanh":
                delta = mul(back, 1.0 - mul(a_in, a_in))
            else:
                delta = mul(back, Tensor((a_in.data > 0).astype(np.float64)))
    return grads


def forward(enc: Encoder, X) -> np.ndarray:
    """Plain numpy forward pass."""
    X = np.asarray(X, dtype=np.float64)
    return apply(enc.arch, [Tensor(p) for p in enc.params], Tensor(X)).data


@dataclass
class Bound:
    """An architecture with its parameters held as tensors (constants or graph leaves)."""

    arch: ArchSpec
    params: list[Tensor]

    def __call__(self, X, cache: list | None = None) -> Tensor:
        return apply(self.arch, self.params, X, cache)

    def gradients(self, cache, G) -> list[Tensor]:
        return backprop(self.arch, self.params, cache, G)

    def to_encoder(self) -> Encoder:
        return from_params(self.arch, [p.data for p in self.params])


def bind(enc, graph=None) -> Bound:
    """View ``enc`` as a :class:`Bound`; with a graph, its parameters become leaves."""
    if isinstance(enc, Bound):
        return enc
    if graph is None:
        return Bound(enc.arch, [Tensor(p) for p in enc.params])
    return Bound(enc.arch, [graph.leaf(p) for p in enc.params])


# ---------------------------------------------------------------------------
# container: magic, version, arch JSON (u32 length + UTF-8), FlatParams record

ENC_MAGIC = b"MKDTENCD"


def save_encoder(path, enc: Encoder) -> None:
    with open(path, "wb") as fh:
        write_header(fh, ENC_MAGIC)
        write_blob(fh, json.dumps(enc.arch.to_dict(), sort_keys=True).encode("utf-8"))
        write_tensor_record(fh, flatten(enc).vector)


def load_encoder(path) -> Encoder:
    with open(path, "rb") as fh:
        read_header(fh, ENC_MAGIC)
        arch = ArchSpec.from_dict(json.loads(read_blob(fh).decode("utf-8")))
        vector = read_tensor_record(fh)
    return unflatten(vector, arch)
