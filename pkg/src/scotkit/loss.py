"""Margin-gated contrastive training objective.

Given a batch of composed embeddings Vc (one per example), target-caption
embeddings Tu, and unedited-caption embeddings T, with S(x, y) the cosine
similarity:

    attraction     L_pos  = -log sum_i exp(S(Vc_i, Tu_i))
    batch negatives L_neg' = log sum_{i,j} exp(gate(S(Vc_i, Tu_j)) * [i != j])
    caption negatives      = log sum_{i,j} exp(gate(S(Vc_i, T_j)))
    total          L = alpha_pos * L_pos + alpha_neg * (L_neg' + caption term)

where gate(s) = s if s > margin else 0.  The batch-negative sum keeps its
diagonal as exp(0) terms by default (`exclude_diagonal` drops them instead);
the caption-negative sum always runs over all pairs, including j == i, since
the unedited caption is a true negative for the composed query.

Sums are batch-level (no 1/N) and temperature-free; the separate
clip_i2t_loss utility is the temperature-scaled symmetric-batch softmax used
for alignment probes, not for training.

All sums of exponentials go through max-shifted log-sum-exp.  Inputs are
normalized internally, so gradients follow the full cosine quotient rule and
finite-difference checks on raw entries agree with the analytic forms.
Gate indicators are treated as constants during differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadRangeError, DimMismatchError, EmptyBatchError, EmptyInputError
from .tensor import ZERO_NORM_FLOOR, ZeroVectorError


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.2
    alpha_pos: float = 10.0
    alpha_neg: float = 0.1
    temperature: float = 0.07
    exclude_diagonal: bool = False

    def __post_init__(self) -> None:
        if not -1.0 <= self.margin <= 1.0:
            raise BadRangeError(f"margin must be in [-1, 1], got {self.margin}")
        if self.alpha_pos <= 0:
            raise BadRangeError(f"alpha_pos must be positive, got {self.alpha_pos}")
        if self.alpha_neg < 0:
            raise BadRangeError(f"alpha_neg must be non-negative, got {self.alpha_neg}")
        if self.temperature <= 0:
            raise BadRangeError(f"temperature must be positive, got {self.temperature}")


@dataclass(frozen=True)
class LossBreakdown:
    l_pos: float
    l_neg_prime: float
    l_caption_neg: float
    l_neg_combined: float
    l_total: float
    grad_composed: np.ndarray


def margin_gate(s: np.ndarray, margin: float) -> np.ndarray:
    """Gated similarity: s where s > margin (strictly), else 0."""
    s = np.asarray(s, dtype=np.float64)
    return np.where(s > margin, s, 0.0)


def _as_batch(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimMismatchError(f"{name}: expected 2-D batch, got {arr.ndim}-D")
    if arr.shape[0] == 0:
        raise EmptyBatchError(f"{name}: empty batch")
    return arr


def _checked_pair(a, b, name_a: str, name_b: str) -> tuple[np.ndarray, np.ndarray]:
    a = _as_batch(a, name_a)
    b = _as_batch(b, name_b)
    if a.shape != b.shape:
        raise DimMismatchError(f"{name_a} {a.shape} vs {name_b} {b.shape}")
    return a, b


def _cosine_with_grad_parts(x: np.ndarray, y: np.ndarray):
    """Similarity matrix plus the pieces needed to push dL/dS back to x."""
    nx = np.linalg.norm(x, axis=1, keepdims=True)
    ny = np.linalg.norm(y, axis=1, keepdims=True)
    if np.any(nx < ZERO_NORM_FLOOR) or np.any(ny < ZERO_NORM_FLOOR):
        raise ZeroVectorError("zero-norm row in loss input")
    yn = y / ny
    s = (x / nx) @ yn.T
    return s, nx, yn


def _grad_through_cosine(ds, s, x, nx, yn) -> np.ndarray:
    # d S_ij / d x_i = y_j / (|x_i| |y_j|) - S_ij x_i / |x_i|^2
    return (ds @ yn) / nx - (np.sum(ds * s, axis=1, keepdims=True)) * x / nx**2


def _softmax_flat(values: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """exp(v - max) / sum over entries where mask holds; zeros elsewhere."""
    if mask is None:
        mask = np.ones_like(values, dtype=bool)
    if not mask.any():
        raise EmptyInputError("no terms in exponential sum")
    shift = np.max(values[mask])
    w = np.where(mask, np.exp(values - shift), 0.0)
    return w / np.sum(w)


def _logsumexp_masked(values: np.ndarray, mask: np.ndarray | None = None) -> float:
    if mask is None:
        mask = np.ones_like(values, dtype=bool)
    if not mask.any():
        raise EmptyInputError("no terms in exponential sum")
    vals = values[mask]
    m = float(np.max(vals))
    return m + float(np.log(np.sum(np.exp(vals - m))))


def loss_pos_with_grad(composed, targets) -> tuple[float, np.ndarray]:
    """Attraction term and its gradient with respect to the composed batch."""
    x, y = _checked_pair(composed, targets, "composed", "targets")
    s, nx, yn = _cosine_with_grad_parts(x, y)
    diag = np.diag(s)
    m = float(np.max(diag))
    w = np.exp(diag - m)
    value = -(m + float(np.log(np.sum(w))))
    ds = np.zeros_like(s)
    np.fill_diagonal(ds, -(w / np.sum(w)))  # dL/dS_ii = -softmax_i
    return value, _grad_through_cosine(ds, s, x, nx, yn)


def loss_pos(composed, targets) -> float:
    return loss_pos_with_grad(composed, targets)[0]


def _neg_prime_parts(s: np.ndarray, margin: float, exclude_diagonal: bool):
    n = s.shape[0]
    gate = s > margin
    exponents = np.where(gate, s, 0.0)
    off = ~np.eye(n, dtype=bool)
    if exclude_diagonal:
        terms_mask = off
    else:
        exponents = np.where(off, exponents, 0.0)  # diagonal pinned to exp(0)
        terms_mask = np.ones_like(off)
    value = _logsumexp_masked(exponents, terms_mask)
    p = _softmax_flat(exponents, terms_mask)
    ds = np.where(off & gate, p, 0.0)  # gated-out and diagonal terms are constants
    return value, ds


def loss_neg_prime_with_grad(composed, targets, config: LossConfig) -> tuple[float, np.ndarray]:
    """Batch-negative repulsion term over mismatched (composed, target) pairs."""
    x, y = _checked_pair(composed, targets, "composed", "targets")
    s, nx, yn = _cosine_with_grad_parts(x, y)
    value, ds = _neg_prime_parts(s, config.margin, config.exclude_diagonal)
    return value, _grad_through_cosine(ds, s, x, nx, yn)


def loss_neg_prime(composed, targets, config: LossConfig) -> float:
    return loss_neg_prime_with_grad(composed, targets, config)[0]


def _caption_parts(s: np.ndarray, margin: float):
    gate = s > margin
    exponents = np.where(gate, s, 0.0)
    value = _logsumexp_masked(exponents)
    p = _softmax_flat(exponents)
    ds = np.where(gate, p, 0.0)
    return value, ds


def loss_caption_neg_with_grad(composed, originals, config: LossConfig) -> tuple[float, np.ndarray]:
    """Unedited-caption repulsion over all pairs, the matched caption included."""
    x, y = _checked_pair(composed, originals, "composed", "originals")
    s, nx, yn = _cosine_with_grad_parts(x, y)
    value, ds = _caption_parts(s, config.margin)
    return value, _grad_through_cosine(ds, s, x, nx, yn)


def loss_caption_neg(composed, originals, config: LossConfig) -> float:
    return loss_caption_neg_with_grad(composed, originals, config)[0]


def loss_neg_combined(composed, targets, originals, config: LossConfig) -> float:
    """Batch-negative term extended with the unedited-caption term."""
    return (
        loss_neg_prime(composed, targets, config)
        + loss_caption_neg(composed, originals, config)
    )


def total_loss(composed, targets, originals, config: LossConfig) -> LossBreakdown:
    """Full training objective with gradient for the composed batch.

    Returns every intermediate term so metrics logs can expose them without
    recomputation.
    """
    l_pos, g_pos = loss_pos_with_grad(composed, targets)
    l_np, g_np = loss_neg_prime_with_grad(composed, targets, config)
    l_cap, g_cap = loss_caption_neg_with_grad(composed, originals, config)
    l_combined = l_np + l_cap
    l_total = config.alpha_pos * l_pos + config.alpha_neg * l_combined
    grad = config.alpha_pos * g_pos + config.alpha_neg * (g_np + g_cap)
    return LossBreakdown(
        l_pos=l_pos,
        l_neg_prime=l_np,
        l_caption_neg=l_cap,
        l_neg_combined=l_combined,
        l_total=l_total,
        grad_composed=grad,
    )


def clip_i2t_loss(image_rows, text_rows, temperature: float = 0.07) -> float:
    """Image-to-text batch softmax alignment loss at the given temperature.

    Mean over rows of -log( exp(S_ii/t) / sum_j exp(S_ij/t) ).  Used as a
    sanity probe for paired embedding tables; not part of the training
    objective.
    """
    if temperature <= 0:
        raise BadRangeError(f"temperature must be positive, got {temperature}")
    x, y = _checked_pair(image_rows, text_rows, "images", "texts")
    s, _, _ = _cosine_with_grad_parts(x, y)
    z = s / temperature
    m = np.max(z, axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(z - m), axis=1))
    return float(np.mean(lse - np.diag(z)))
