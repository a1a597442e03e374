"""Detection metrics under the fixed orientation: lower score = more OOD,
OOD is the positive class."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diagnostics import average_ranks
from .errors import ValidationError

ORIENTATION = "lower s => more OOD; OOD is the positive class"


@dataclass(frozen=True)
class ScoredPair:
    id_scores: np.ndarray
    ood_scores: np.ndarray

    def __post_init__(self):
        for name in ("id_scores", "ood_scores"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 1 or arr.size == 0:
                raise ValidationError(f"{name} must be a non-empty vector")
            if not np.isfinite(arr).all():
                raise ValidationError(f"{name} contains non-finite values")
            object.__setattr__(self, name, arr)


def auroc(pair: ScoredPair) -> float:
    """P(ood < id) + P(ood == id)/2, computed exactly via rank sums."""
    ood, idd = pair.ood_scores, pair.id_scores
    n_o, n_i = ood.size, idd.size
    ranks = average_ranks(np.concatenate([ood, idd]))
    r_ood = ranks[:n_o].sum()
    u_greater = r_ood - n_o * (n_o + 1) / 2.0  # pairs with ood > id (+ half ties)
    return float(1.0 - u_greater / (n_o * n_i))


def fpr_at_tpr(pair: ScoredPair, tpr_target: float = 0.95) -> float:
    """False-positive rate on ID at the smallest threshold reaching the
    target true-positive rate on OOD."""
    if not 0.0 < tpr_target < 1.0:
        raise ValidationError("tpr_target must lie in (0, 1)")
    ood = np.sort(pair.ood_scores)
    k = int(np.ceil(tpr_target * ood.size))
    t_star = ood[k - 1]
    return float(np.mean(pair.id_scores < t_star))


def ks_uniform(samples) -> float:
    """Sup-norm distance between the empirical CDF and the uniform CDF."""
    x = np.sort(np.asarray(samples, dtype=np.float64))
    if x.size == 0:
        raise ValidationError("empty sample")
    if x[0] < 0.0 or x[-1] > 1.0:
        raise ValidationError("samples must lie in [0, 1]")
    n = x.size
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - x), np.max(x - (i - 1) / n)))


def format_pair(a: float, f: float) -> str:
    """Table formatting: 'AUROC (FPR@95)'."""
    return f"{a:.3f} ({f:.3f})"
