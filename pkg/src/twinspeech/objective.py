"""Barlow Twins (BT) and modified Barlow Twins (MBT) correlation objectives.

Both variants share the loss

    L(C; lam) = sum_i (1 - C_ii)^2 + lam * sum_i sum_{j != i} C_ij^2

and differ only in how the m x m matrix ``C`` is built from two ``n x m``
latent batches:

* BT normalises each latent *dimension* (column) over the batch, so ``C`` is
  invariant to positive per-feature scaling.
* MBT normalises each *sample* (row) to unit length before correlating, so
  ``C`` is invariant to positive per-sample scaling. With ``reduction="sum"``
  the batch contributions are summed (``C_ii`` can reach ``n``); with
  ``"mean"`` they are averaged.

Batch reductions are accumulated sequentially in ``np.longdouble``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .exceptions import NumericError, ShapeError

VARIANTS = ("bt", "mbt")
REDUCTIONS = ("sum", "mean")
DEFAULT_LAMBDA = 0.005
DEFAULT_EPS = 1e-9


@dataclass(frozen=True)
class CorrelationMatrix:
    values: np.ndarray
    variant: str
    reduction: str | None = None
    centered: bool = False
    diagonal_ext: np.ndarray | None = field(default=None, repr=False, compare=False)

    def trace(self) -> float:
        """Trace summed from the extended-precision diagonal when available."""
        if self.diagonal_ext is None:
            return float(np.trace(self.values))
        return float(np.sum(self.diagonal_ext, dtype=np.longdouble))

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class LossBreakdown:
    invariance: float
    redundancy: float
    lam: float
    total: float

    def to_dict(self):
        return {"invariance": self.invariance, "redundancy": self.redundancy,
                "lambda": self.lam, "total": self.total}


class LossGradient(NamedTuple):
    grad_a: np.ndarray
    grad_b: np.ndarray
    loss: LossBreakdown


def _check_pair(za, zb):
    za = np.asarray(za, dtype=np.float64)
    zb = np.asarray(zb, dtype=np.float64)
    if za.ndim != 2 or za.shape != zb.shape:
        raise ShapeError(f"latent batches must share one n x m shape, got {za.shape} and {zb.shape}")
    if za.shape[0] < 1 or za.shape[1] < 2:
        raise ShapeError(f"need n >= 1 and m >= 2, got {za.shape}")
    if not (np.all(np.isfinite(za)) and np.all(np.isfinite(zb))):
        raise NumericError("latent batch contains non-finite values")
    return za, zb


def _center(z):
    return z - z.mean(axis=0, dtype=np.longdouble).astype(np.float64)


def _norm_product(s, t, eps):
    # (sqrt(s) + eps)(sqrt(t) + eps), arranged so that s == t, eps == 0 gives s exactly
    return np.sqrt(s * t) + eps * (np.sqrt(s) + np.sqrt(t)) + eps * eps


def bt_correlation(za, zb, eps: float = DEFAULT_EPS, center: bool = False) -> CorrelationMatrix:
    """Per-feature normalised cross-correlation ``C_ij = <a_i, b_j> / (|a_i| |b_j|)``.

    ``a_i`` is column ``i`` of ``za`` taken over the batch. No mean-centring
    unless ``center=True``.
    """
    za, zb = _check_pair(za, zb)
    if center:
        za, zb = _center(za), _center(zb)
    a = za.astype(np.longdouble)
    b = zb.astype(np.longdouble)
    n, m = a.shape
    cross = np.zeros((m, m), dtype=np.longdouble)
    sa = np.zeros(m, dtype=np.longdouble)
    sb = np.zeros(m, dtype=np.longdouble)
    for k in range(n):
        cross += np.multiply.outer(a[k], b[k])
        sa += a[k] * a[k]
        sb += b[k] * b[k]
    with np.errstate(invalid="ignore", divide="ignore"):
        c = cross / _norm_product(sa[:, None], sb[None, :], np.longdouble(eps))
    c = c.astype(np.float64)
    if not np.all(np.isfinite(c)):
        raise NumericError("zero-norm latent feature; use eps > 0")
    return CorrelationMatrix(c, "bt", None, bool(center))


def mbt_correlation(za, zb, eps: float = DEFAULT_EPS, reduction: str = "sum",
                    center: bool = False) -> CorrelationMatrix:
    """Correlation of per-sample unit-normalised latents, summed or averaged over the batch."""
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
    za, zb = _check_pair(za, zb)
    if center:
        za, zb = _center(za), _center(zb)
    a = za.astype(np.longdouble)
    b = zb.astype(np.longdouble)
    n, m = a.shape
    acc = np.zeros((m, m), dtype=np.longdouble)
    eps = np.longdouble(eps)
    with np.errstate(invalid="ignore", divide="ignore"):
        for k in range(n):
            denom = _norm_product(np.sum(a[k] * a[k]), np.sum(b[k] * b[k]), eps)
            acc += np.multiply.outer(a[k], b[k]) / denom
    if reduction == "mean":
        acc /= n
    c = acc.astype(np.float64)
    if not np.all(np.isfinite(c)):
        raise NumericError("zero-norm latent sample; use eps > 0")
    return CorrelationMatrix(c, "mbt", reduction, bool(center), np.diagonal(acc).copy())


def correlation(za, zb, variant: str = "bt", eps: float = DEFAULT_EPS, reduction: str = "sum",
                center: bool = False) -> CorrelationMatrix:
    if variant == "bt":
        return bt_correlation(za, zb, eps=eps, center=center)
    if variant == "mbt":
        return mbt_correlation(za, zb, eps=eps, reduction=reduction, center=center)
    raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")


def bt_loss(c, lam: float = DEFAULT_LAMBDA) -> LossBreakdown:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ShapeError(f"correlation matrix must be square, got {c.shape}")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    diag = np.diagonal(c)
    invariance = float(np.sum((1.0 - diag) ** 2))
    off = c.copy()
    np.fill_diagonal(off, 0.0)
    redundancy = float(np.sum(off * off))
    return LossBreakdown(invariance, redundancy, float(lam), invariance + lam * redundancy)


def loss_value(za, zb, variant="bt", lam=DEFAULT_LAMBDA, eps=DEFAULT_EPS, reduction="sum",
               center=False) -> LossBreakdown:
    return bt_loss(correlation(za, zb, variant, eps, reduction, center), lam)


def loss_grad_wrt_corr(c: np.ndarray, lam: float) -> np.ndarray:
    g = 2.0 * lam * c
    np.fill_diagonal(g, -2.0 * (1.0 - np.diagonal(c)))
    return g


def _normalize_backward(z, norm, grad_hat, eps, axis):
    """Backprop through ``z / (|z| + eps)`` with norms taken along ``axis``."""
    denom = norm + eps
    proj = np.sum(z * grad_hat, axis=axis, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        radial = np.where(norm > 0, proj / (norm * denom * denom), 0.0)
    return grad_hat / denom - z * radial


def loss_grad(za, zb, variant: str = "bt", lam: float = DEFAULT_LAMBDA, eps: float = DEFAULT_EPS,
              reduction: str = "sum", center: bool = False) -> LossGradient:
    """Loss and its exact gradients with respect to both latent batches."""
    c = correlation(za, zb, variant, eps, reduction, center)
    loss = bt_loss(c, lam)
    za, zb = _check_pair(za, zb)
    if center:
        za, zb = _center(za), _center(zb)
    g = loss_grad_wrt_corr(c.values, lam)

    axis = 0 if variant == "bt" else 1
    na = np.sqrt(np.sum(za * za, axis=axis, keepdims=True))
    nb = np.sqrt(np.sum(zb * zb, axis=axis, keepdims=True))
    a_hat = za / (na + eps)
    b_hat = zb / (nb + eps)
    scale = 1.0 / za.shape[0] if (variant == "mbt" and reduction == "mean") else 1.0
    grad_a_hat = scale * (b_hat @ g.T)
    grad_b_hat = scale * (a_hat @ g)
    grad_a = _normalize_backward(za, na, grad_a_hat, eps, axis)
    grad_b = _normalize_backward(zb, nb, grad_b_hat, eps, axis)
    if center:
        grad_a = grad_a - grad_a.mean(axis=0)
        grad_b = grad_b - grad_b.mean(axis=0)
    return LossGradient(grad_a, grad_b, loss)


def dump_csv(c, path) -> None:
    """Write ``C`` as m rows of m comma-separated decimals."""
    np.savetxt(path, np.asarray(c, dtype=np.float64), delimiter=",", fmt="%.17g")
