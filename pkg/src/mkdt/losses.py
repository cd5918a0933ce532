"""Loss functions: supervised MSE, spectral contrastive, Barlow Twins, KD-MSE, trajectory matching.

Functions that take an ``encoder`` accept either an encoder value or a
:class:`~mkdt.models.Bound` whose parameters live on a graph; they return a
scalar :class:`~mkdt.tensor.Tensor`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datagen import augment
from .models import bind
from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    matmul,
    mul,
    power,
    sq_frobenius,
    sub,
    take_rows,
    trace,
)


class DegenerateSegmentError(ValueError):
    """Expert segment start and target coincide, so the matching loss is undefined."""


@dataclass(frozen=True)
class BarlowTwinsConfig:
    lam: float = 5e-3

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("Barlow Twins lambda must be positive")


@dataclass(frozen=True)
class SecondMoment:
    """``M`` over all augmented views and ``M_tilde`` over per-example mean views."""

    M: np.ndarray
    M_tilde: np.ndarray

    @classmethod
    def from_views(cls, views: np.ndarray, m: int) -> SecondMoment:
        views = np.asarray(views, dtype=np.float64)
        b = views.shape[0] // m
        means = views.reshape(b, m, -1).mean(axis=1)
        return cls(views.T @ views / views.shape[0], means.T @ means / b)

    @classmethod
    def analytic(cls, X: np.ndarray) -> SecondMoment:
        """The infinitely-many-views limit used in the theory: ``M = M_tilde = X^T X / |B|``."""
        X = np.asarray(X, dtype=np.float64)
        M = X.T @ X / X.shape[0]
        return cls(M, M)


def one_hot(labels, width: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= width):
        raise ShapeError(f"labels in [{labels.min()}, {labels.max()}] do not fit output dim {width}")
    out = np.zeros((labels.size, width))
    out[np.arange(labels.size), labels] = 1.0
    return out


def mse_to_targets(out: Tensor, targets) -> Tensor:
    """``mean_i ||out_i - t_i||^2``."""
    targets = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if out.shape != targets.shape:
        raise ShapeError(f"mse: output shape {out.shape} vs target shape {targets.shape}")
    return mul(sq_frobenius(sub(out, Tensor(targets))), 1.0 / out.shape[0])


def mse_output_grad(out: Tensor, targets) -> Tensor:
    """Gradient of :func:`mse_to_targets` w.r.t. ``out``, as a tensor expression."""
    return mul(sub(out, as_tensor(targets)), 2.0 / out.shape[0])


def supervised_mse(encoder, X, labels) -> Tensor:
    f = bind(encoder)
    return mse_to_targets(f(X), one_hot(labels, f.arch.d_out))


def kd_mse(student, X, Z, indices=None) -> Tensor:
    """Mean squared distance between student representations and stored teacher rows."""
    f = bind(student)
    Z = np.asarray(Z, dtype=np.float64)
    if indices is not None:
        indices = np.asarray(indices, dtype=np.intp)
        n = as_tensor(X).shape[0]
        if indices.size and (indices.min() < 0 or indices.max() >= min(n, Z.shape[0])):
            raise IndexError(f"batch index out of range for {n} inputs / {Z.shape[0]} teacher rows")
        X = take_rows(X, indices)
        Z = Z[indices]
    out = f(X)
    if out.shape[1] != Z.shape[1]:
        raise ShapeError(f"kd_mse: student dim {out.shape[1]} vs representation dim {Z.shape[1]}")
    return mse_to_targets(out, Z)


def per_example_kd(student, X, Z) -> np.ndarray:
    out = bind(student)(X).data
    return np.sum((out - np.asarray(Z)) ** 2, axis=1)


# ---------------------------------------------------------------------------
# spectral contrastive loss


def _view_means_matrix(b: int, m: int) -> Tensor:
    P = np.zeros((b, b * m))
    for i in range(b):
        P[i, i * m : (i + 1) * m] = 1.0 / m
    return Tensor(P)


def spectral_from_features(F: Tensor, m: int) -> Tensor:
    """Sampled spectral contrastive loss from view features grouped ``m`` per example.

    The positive term averages ``f(v_a)^T f(v_c)`` over every ordered pair of
    views of the same example (``a == c`` included); the negative term averages
    ``(f(v)^T f(v'))^2`` over every ordered pair of views in the batch. With a
    linear encoder this equals :func:`spectral_matrix_loss` on
    ``SecondMoment.from_views`` exactly.
    """
    total = F.shape[0]
    if total % m:
        raise ShapeError(f"spectral: {total} views not divisible by m={m}")
    b = total // m
    S = matmul(_view_means_matrix(b, m), F)
    C = matmul(F.T, F)
    return sub(mul(sq_frobenius(C), 1.0 / total**2), mul(sq_frobenius(S), 2.0 / b))


def spectral_feature_grad(F: Tensor, m: int) -> Tensor:
    """Gradient of :func:`spectral_from_features` w.r.t. ``F`` as a tensor expression."""
    total = F.shape[0]
    b = total // m
    P = _view_means_matrix(b, m)
    S = matmul(P, F)
    C = matmul(F.T, F)
    return sub(mul(matmul(F, C), 4.0 / total**2), mul(matmul(P.T, S), 4.0 / b))


def spectral_contrastive(encoder, X, m: int, sigma_aug: float, seed) -> Tensor:
    """Spectral contrastive loss on ``m`` freshly sampled views per row of ``X``.

    The additive noise is drawn once from ``seed`` and added to ``X`` inside
    the graph, so the loss is differentiable w.r.t. both parameters and ``X``.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    X = as_tensor(X)
    noise = augment(np.zeros(X.shape), m, sigma_aug, seed)
    rep = np.repeat(np.arange(X.shape[0]), m)
    views = take_rows(X, rep) + Tensor(noise)
    return spectral_from_features(bind(encoder)(views), m)


def spectral_matrix_loss(W, sm: SecondMoment) -> Tensor:
    """``-2 Tr(W M_tilde W^T) + Tr(M W^T W M W^T W)``."""
    W = as_tensor(W)
    M, Mt = Tensor(sm.M), Tensor(sm.M_tilde)
    if W.data.ndim != 2 or W.shape[1] != sm.M.shape[0]:
        raise ShapeError(f"spectral_matrix_loss: W {W.shape} vs M {sm.M.shape}")
    A = matmul(W.T, W)
    MA = matmul(M, A)
    return sub(trace(matmul(MA, MA)), mul(trace(matmul(matmul(W, Mt), W.T)), 2.0))


def spectral_grad_closed_form(W, sm: SecondMoment) -> np.ndarray:
    """``-4 W M_tilde + 4 W M W^T W M``; equals ``-4WM + 4WMW^TWM`` when ``M == M_tilde``."""
    W = np.asarray(W.data if isinstance(W, Tensor) else W, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] != sm.M.shape[0]:
        raise ShapeError(f"spectral_grad_closed_form: W {W.shape} vs M {sm.M.shape}")
    WM = W @ sm.M
    return -4.0 * W @ sm.M_tilde + 4.0 * WM @ W.T @ WM


def sl_mse_grad(W, X, labels) -> np.ndarray:
    """Closed-form gradient of the supervised MSE for a linear map: ``(2/|B|) sum (Wx - e_y) x^T``."""
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    R = X @ W.T - one_hot(labels, W.shape[0])
    return 2.0 / X.shape[0] * R.T @ X


# ---------------------------------------------------------------------------
# Barlow Twins


def _batch_normalize(z: Tensor) -> Tensor:
    b = z.shape[0]
    var = np.var(z.data, axis=0)
    # Threshold is relative to the feature scale to catch collapsed dims only.
    tiny = 1e-24 * max(1.0, float(np.max(np.abs(z.data))) ** 2)
    bad = np.flatnonzero(var <= tiny)
    if bad.size:
        raise ValueError(f"barlow twins: embedding dimension {int(bad[0])} has zero variance across the batch")
    ones_col = Tensor(np.ones((b, 1)))
    ones_row = Tensor(np.ones((1, b)) / b)
    mu = matmul(ones_row, z)
    c = sub(z, matmul(ones_col, mu))
    v = matmul(ones_row, mul(c, c))
    return mul(c, matmul(ones_col, power(v, -0.5)))


def cross_correlation(za: Tensor, zb: Tensor) -> Tensor:
    za, zb = as_tensor(za), as_tensor(zb)
    if za.shape != zb.shape:
        raise ShapeError(f"barlow twins: view embeddings {za.shape} vs {zb.shape}")
    if za.shape[0] < 2:
        raise ValueError("barlow twins needs a batch of at least 2 examples")
    return mul(matmul(_batch_normalize(za).T, _batch_normalize(zb)), 1.0 / za.shape[0])


def barlow_twins_loss(za, zb, cfg: BarlowTwinsConfig = BarlowTwinsConfig()) -> Tensor:
    """``sum_i (1 - F_ii)^2 + lam * sum_{i != j} F_ij^2`` on batch-normalized embeddings."""
    F = cross_correlation(za, zb)
    eye = Tensor(np.eye(F.shape[0]))
    diag = mul(F, eye)
    return sq_frobenius(sub(eye, diag)) + mul(sq_frobenius(sub(F, diag)), cfg.lam)


def _normalize_backward(zhat: Tensor, inv_std: Tensor, g: Tensor) -> Tensor:
    """Pull ``g = dL/dzhat`` back through per-column standardization with biased std."""
    b = zhat.shape[0]
    ones_col = Tensor(np.ones((b, 1)))
    mean_row = Tensor(np.ones((1, b)) / b)
    centered = sub(g, matmul(ones_col, matmul(mean_row, g)))
    proj = mul(zhat, matmul(ones_col, matmul(mean_row, mul(g, zhat))))
    return mul(sub(centered, proj), matmul(ones_col, inv_std))


def _normalize_parts(z: Tensor) -> tuple[Tensor, Tensor]:
    zhat = _batch_normalize(z)
    b = z.shape[0]
    ones_row = Tensor(np.ones((1, b)) / b)
    c = sub(z, matmul(Tensor(np.ones((b, 1))), matmul(ones_row, z)))
    return zhat, power(matmul(ones_row, mul(c, c)), -0.5)


def barlow_feature_grads(za: Tensor, zb: Tensor, cfg: BarlowTwinsConfig = BarlowTwinsConfig()) -> tuple[Tensor, Tensor]:
    """Gradients of :func:`barlow_twins_loss` w.r.t. both view embeddings, as tensor expressions."""
    za, zb = as_tensor(za), as_tensor(zb)
    if za.shape != zb.shape:
        raise ShapeError(f"barlow twins: view embeddings {za.shape} vs {zb.shape}")
    b = za.shape[0]
    ha, inv_a = _normalize_parts(za)
    hb, inv_b = _normalize_parts(zb)
    F = mul(matmul(ha.T, hb), 1.0 / b)
    eye = Tensor(np.eye(F.shape[0]))
    diag = mul(F, eye)
    GF = mul(sub(diag, eye), 2.0) + mul(sub(F, diag), 2.0 * cfg.lam)
    ga = mul(matmul(hb, GF.T), 1.0 / b)
    gb = mul(matmul(ha, GF), 1.0 / b)
    return _normalize_backward(ha, inv_a, ga), _normalize_backward(hb, inv_b, gb)


def barlow_twins(encoder, X, cfg: BarlowTwinsConfig = BarlowTwinsConfig(), sigma_aug: float = 1.0, seed=0) -> Tensor:
    """Barlow Twins on two additive-noise views of each row of ``X``."""
    X = as_tensor(X)
    noise = augment(np.zeros(X.shape), 2, sigma_aug, seed)
    f = bind(encoder)
    za = f(X + Tensor(noise[0::2]))
    zb = f(X + Tensor(noise[1::2]))
    return barlow_twins_loss(za, zb, cfg)


# ---------------------------------------------------------------------------
# trajectory matching


def mtt_loss(theta_end, theta_start, theta_target) -> Tensor:
    """``||end - target||^2 / ||start - target||^2``.

    ``theta_end`` is a flat vector (array or tensor) or a list of per-layer
    tensors in flat order; start and target are flat vectors.
    """
    start = np.asarray(getattr(theta_start, "vector", theta_start), dtype=np.float64)
    target = np.asarray(getattr(theta_target, "vector", theta_target), dtype=np.float64)
    if start.shape != target.shape:
        raise ShapeError(f"mtt_loss: start {start.shape} vs target {target.shape}")
    denom = float(np.sum((start - target) ** 2))
    if not denom > 0:
        raise DegenerateSegmentError("degenerate expert segment: start and target parameters coincide")
    if isinstance(theta_end, (list, tuple)):
        parts = _split_like(target, [t.shape for t in theta_end])
        num = None
        for t, p in zip(theta_end, parts):
            term = sq_frobenius(sub(t, Tensor(p)))
            num = term if num is None else num + term
    else:
        end = as_tensor(getattr(theta_end, "vector", theta_end))
        if end.shape != target.shape:
            raise ShapeError(f"mtt_loss: end {end.shape} vs target {target.shape}")
        num = sq_frobenius(sub(end, Tensor(target)))
    return mul(num, 1.0 / denom)


def _split_like(vector: np.ndarray, shapes: Sequence[tuple[int, ...]]) -> list[np.ndarray]:
    out, offset = [], 0
    for s in shapes:
        size = int(np.prod(s))
        out.append(vector[offset : offset + size].reshape(s))
        offset += size
    if offset != vector.size:
        raise ShapeError(f"mtt_loss: parameter tensors cover {offset} entries, vector has {vector.size}")
    return out
