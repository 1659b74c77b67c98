"""Pruning ratios from attentions, global sparsity, and magnitude masking.

The per-layer pruning ratio is (1 - a)^alpha capped at 0.99, the model
sparsity S is the weight-count-weighted kept fraction, and the structure
regularizer is S squared. The regularizer gradient is computed here in
closed form rather than on the tape: it depends only on the attentions
and constant weight counts.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DomainError
from .layers import AttentionLayer, Model, attention_vector

RATIO_CAP = 0.99


def pruning_ratio(a: float, alpha: float) -> float:
    """Pruning ratio for one layer, min((1 - a)^alpha, 0.99)."""
    if not 0.0 < a <= 1.0:
        raise DomainError(f"attention must lie in (0, 1], have {a}")
    if alpha <= 0.0:
        raise DomainError(f"pruning factor must be positive, have {alpha}")
    return min((1.0 - a) ** alpha, RATIO_CAP)


def layer_ratios(attentions, alpha: float) -> list[float]:
    return [pruning_ratio(a, alpha) for a in attentions]


def prune_layer(layer: AttentionLayer, p: float) -> None:
    """Mask the ceil(p * n_w) smallest-magnitude dense weights to zero.

    The mask is recomputed from scratch from the current dense weights, so
    previously pruned weights whose magnitude has grown can re-enter. Ties
    on equal magnitude prune the lower flat index first (stable sort).
    """
    if not 0.0 <= p <= RATIO_CAP:
        raise DomainError(f"pruning ratio must lie in [0, {RATIO_CAP}], have {p}")
    w = layer.w.data
    k = math.ceil(p * w.size)
    mask = np.ones(w.size, dtype=w.dtype)
    if k:
        order = np.argsort(np.abs(w.ravel()), kind="stable")
        mask[order[:k]] = 0
    layer.mask = mask.reshape(w.shape)
    layer.w_hat.data = w * layer.mask


def prune_model(model: Model, alpha: float) -> list[float]:
    """Recompute every layer's ratio from its attention and apply the mask."""
    ratios = layer_ratios(attention_vector(model), alpha)
    for layer, p in zip(model.layers, ratios):
        prune_layer(layer, p)
    return ratios


def model_sparsity(attentions, counts, alpha: float) -> float:
    """Kept-weight fraction S, a convex combination of per-layer (1 - p)."""
    if len(attentions) != len(counts):
        raise ValueError(
            f"attention/count length mismatch: {len(attentions)} vs {len(counts)}")
    if any(n <= 0 for n in counts):
        raise ValueError("weight counts must be positive")
    total = float(sum(counts))
    kept = sum((1.0 - pruning_ratio(a, alpha)) * n for a, n in zip(attentions, counts))
    return kept / total


def sparsity_regularizer(attentions, counts, alpha: float) -> tuple[float, np.ndarray]:
    """Regularizer value S^2 and its closed-form gradient per attention.

    d(S^2)/da_l = 2 S alpha (1 - a_l)^(alpha - 1) n_l / sum(n); layers whose
    ratio sits on the 0.99 cap contribute a flat region, so their component
    is exactly zero.
    """
    s = model_sparsity(attentions, counts, alpha)
    total = float(sum(counts))
    grad = np.zeros(len(attentions), dtype=np.float64)
    for i, (a, n) in enumerate(zip(attentions, counts)):
        base = 1.0 - a
        if base ** alpha >= RATIO_CAP:
            continue
        if base == 0.0 and alpha < 1.0:
            raise DomainError("sparsity gradient is unbounded at a=1 for alpha < 1")
        grad[i] = 2.0 * s * alpha * base ** (alpha - 1.0) * (n / total)
    return s * s, grad


def global_pruned_ratio(model: Model) -> float:
    """Fraction of all prunable weights currently masked to zero."""
    zeros = sum(layer.mask_zeros() for layer in model.layers)
    total = sum(layer.n_w for layer in model.layers)
    return zeros / total
