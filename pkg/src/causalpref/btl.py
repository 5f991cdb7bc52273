"""Bradley-Terry-Luce preference probabilities and likelihood.

Label convention for datasets: ``ell = 0`` means the first response won,
``ell = 1`` means the second one did.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


def _check_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"non-finite reward {v!r}")


def pref_prob(r: float, r_prime: float) -> float:
    """Probability that the response with reward ``r`` is preferred."""
    _check_finite(r, r_prime)
    d = float(r) - float(r_prime)
    if d >= 0:
        return 1.0 / (1.0 + math.exp(-d))
    ex = math.exp(d)
    return ex / (1.0 + ex)


def invert_to_reward_diff(p: float) -> float:
    """Logit of ``p``: the reward difference implied by a preference rate."""
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie strictly in (0, 1), got {p}")
    return math.log(p) - math.log1p(-p)


@dataclass(frozen=True)
class LabelledBatch:
    """Score differences ``r - r'`` with labels (0: first wins, 1: second wins)."""

    diffs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        diffs = np.asarray(self.diffs, dtype=np.float64).reshape(-1)
        labels = np.asarray(self.labels).reshape(-1)
        if diffs.shape != labels.shape:
            raise ValueError("diffs and labels differ in length")
        if not np.all(np.isfinite(diffs)):
            raise ValueError("score differences must be finite")
        if not np.all((labels == 0) | (labels == 1)):
            raise ValueError("labels must be 0 or 1")
        object.__setattr__(self, "diffs", diffs)
        object.__setattr__(self, "labels", labels.astype(np.int64))

    def __len__(self) -> int:
        return len(self.diffs)


def winner_margins(diffs, labels) -> np.ndarray:
    """Winner-minus-loser score for each comparison."""
    return np.where(np.asarray(labels) == 0, 1.0, -1.0) * np.asarray(diffs, dtype=np.float64)


def btl_nll(batch: LabelledBatch) -> float:
    if len(batch) == 0:
        raise ValueError("empty batch")
    return float(-np.sum(ad.stable_log_sigmoid(winner_margins(batch.diffs, batch.labels))))


def btl_nll_node(diffs: ad.Node, labels) -> ad.Node:
    """Differentiable NLL; ``diffs`` is a node holding ``r - r'`` per comparison."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty batch")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    sign = np.where(labels == 0, 1.0, -1.0)
    return ad.neg(ad.total(ad.log_sigmoid(ad.mul(diffs, sign))))
