"""Weakly supervised triplet ranking loss over (query, potential positives, definite negatives)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .descriptors import ValidationError

DEFAULT_MARGIN = 0.1


@dataclass(frozen=True)
class TrainingTuple:
    query_id: Any
    positive_ids: tuple
    negative_ids: tuple

    def __post_init__(self):
        pos, neg = tuple(self.positive_ids), tuple(self.negative_ids)
        object.__setattr__(self, "positive_ids", pos)
        object.__setattr__(self, "negative_ids", neg)
        if not pos or not neg:
            raise ValidationError(f"tuple for {self.query_id!r} needs >= 1 positive and >= 1 negative")
        if set(pos) & set(neg):
            raise ValidationError(f"tuple for {self.query_id!r} has ids that are both positive and negative")
        if self.query_id in pos or self.query_id in neg:
            raise ValidationError(f"tuple for {self.query_id!r} contains the query itself")


@dataclass(frozen=True)
class LossConfig:
    margin: float = DEFAULT_MARGIN

    def __post_init__(self):
        if not self.margin >= 0:
            raise ValidationError("margin must be nonnegative")


@dataclass
class LossResult:
    loss: float
    grad_query: np.ndarray
    grad_positives: np.ndarray
    grad_negatives: np.ndarray
    best_positive: int
    hinge_args: np.ndarray


def _stack(vectors, name: str) -> np.ndarray:
    a = np.asarray(vectors)
    if a.ndim == 1:
        a = a[None]
    if a.ndim != 2 or a.shape[0] == 0:
        raise ValidationError(f"{name} must be a non-empty list of vectors")
    return a


def squared_distances(query: np.ndarray, others: np.ndarray) -> np.ndarray:
    diff = others - query
    return np.sum(diff * diff, axis=-1)


def best_positive(query_repr: np.ndarray, positive_reprs: Sequence[np.ndarray]) -> int:
    """Index of the potential positive closest to the query (lowest index on ties)."""
    q = np.asarray(query_repr)
    p = _stack(positive_reprs, "positives")
    if p.shape[1] != q.shape[-1]:
        raise ValidationError("positive and query dimensions differ")
    return int(np.argmin(squared_distances(q, p)))


def weak_triplet_loss(query_repr, positive_reprs, negative_reprs, cfg: LossConfig = LossConfig()) -> LossResult:
    """sum_j max(0, min_i |q - p_i|^2 + m - |q - n_j|^2) and its gradients.

    Only the query, the best positive and negatives with a strictly positive
    hinge argument receive gradient.
    """
    q = np.asarray(query_repr)
    p = _stack(positive_reprs, "positives")
    n = _stack(negative_reprs, "negatives")
    if q.ndim != 1 or p.shape[1] != q.shape[0] or n.shape[1] != q.shape[0]:
        raise ValidationError(
            f"dimension mismatch: query {q.shape}, positives {p.shape}, negatives {n.shape}"
        )
    dp = squared_distances(q, p)
    best = int(np.argmin(dp))
    dn = squared_distances(q, n)
    args = dp[best] + cfg.margin - dn
    active = args > 0

    gq = np.zeros_like(q)
    gp = np.zeros_like(p)
    gn = np.zeros_like(n)
    n_active = int(active.sum())
    if n_active:
        gp[best] = -2.0 * n_active * (q - p[best])
        gn[active] = 2.0 * (q - n[active])
        gq = 2.0 * n_active * (q - p[best]) - 2.0 * np.sum(q - n[active], axis=0)
    loss = float(np.sum(args[active]))
    return LossResult(loss, gq, gp, gn, best, args)
