"""ID-only encoder diagnostics: class-conditional ANOVA effect size,
corruption log-likelihood shift, and cross-model rank-correlation screening.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


def eta_squared(lls, labels) -> float:
    """ANOVA effect size SS_between / SS_total of log-likelihoods grouped by
    class label; 0 when the total sum of squares vanishes."""
    lls = np.asarray(lls, dtype=np.float64)
    labels = np.asarray(labels)
    if lls.shape != labels.shape or lls.ndim != 1:
        raise ValidationError("lls and labels must be equal-length vectors")
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValidationError("need >=2 classes")
    grand = lls.mean()
    ss_total = float(np.sum((lls - grand) ** 2))
    if ss_total == 0.0:
        return 0.0
    ss_between = 0.0
    for c in classes:
        grp = lls[labels == c]
        ss_between += grp.size * (grp.mean() - grand) ** 2
    return float(ss_between / ss_total)


def delta_mu(clean_lls, corrupt_lls, clean_provenance=None,
             corrupt_provenance=None) -> float:
    """Mean log-likelihood drop under corruption: mean(clean) - mean(corrupt).

    When both provenance tags are given they must match, guarding against
    mixing scores from different models.
    """
    clean = np.asarray(clean_lls, dtype=np.float64)
    corrupt = np.asarray(corrupt_lls, dtype=np.float64)
    if clean.size == 0 or corrupt.size == 0:
        raise ValidationError("empty log-likelihood array")
    if clean_provenance is not None and corrupt_provenance is not None:
        if clean_provenance != corrupt_provenance:
            raise ValidationError(
                f"provenance mismatch: {clean_provenance!r} vs "
                f"{corrupt_provenance!r}")
    return float(clean.mean() - corrupt.mean())


def average_ranks(a) -> np.ndarray:
    """1-based ranks; ties share the mean of their positions."""
    a = np.asarray(a, dtype=np.float64)
    n = a.size
    idx = np.argsort(a, kind="mergesort")
    s = a[idx]
    start = np.r_[0, np.flatnonzero(s[1:] != s[:-1]) + 1]
    end = np.r_[start[1:], n]
    avg = (start + end + 1) / 2.0  # mean of 1-based positions [start+1, end]
    ranks = np.empty(n)
    ranks[idx] = np.repeat(avg, end - start)
    return ranks


def spearman_rho(a, b) -> float:
    """Pearson correlation of average ranks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 3:
        raise ValidationError("need two equal-length vectors with n >= 3")
    ra, rb = average_ranks(a), average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt(np.sum(ra * ra) * np.sum(rb * rb))
    if denom == 0.0:
        raise ValidationError("rank correlation undefined for a constant array")
    return float(np.dot(ra, rb) / denom)


@dataclass
class ModelDiagnostics:
    encoder: str
    fork: str
    eta2_clean: float | None = None
    eta2_corr: float | None = None
    delta_mu: float | None = None

    @property
    def name(self) -> str:
        return f"{self.encoder}:{self.fork}"


@dataclass
class DiagnosticProfile:
    """Per-model diagnostics plus the cross-model Spearman matrix."""

    models: list[ModelDiagnostics]
    rho: np.ndarray | None = None

    def __post_init__(self):
        for m in self.models:
            for v in (m.eta2_clean, m.eta2_corr):
                if v is not None and not 0.0 <= v <= 1.0 + 1e-12:
                    raise ValidationError(f"eta^2 out of [0,1] for {m.name}")
        if self.rho is not None:
            r = np.asarray(self.rho, dtype=np.float64)
            k = len(self.models)
            if r.shape != (k, k):
                raise ValidationError("rho matrix shape does not match models")
            if not np.allclose(r, r.T, atol=1e-12):
                raise ValidationError("rho matrix must be symmetric")
            if not np.allclose(np.diag(r), 1.0, atol=1e-12):
                raise ValidationError("rho matrix must have unit diagonal")
            if np.any(np.abs(r) > 1.0 + 1e-12):
                raise ValidationError("rho entries must lie in [-1, 1]")
            self.rho = r

    def to_json(self) -> str:
        return json.dumps(
            {
                "models": [
                    {
                        "encoder": m.encoder,
                        "fork": m.fork,
                        "eta2_clean": m.eta2_clean,
                        "eta2_corr": m.eta2_corr,
                        "delta_mu": m.delta_mu,
                    }
                    for m in self.models
                ],
                "rho": None if self.rho is None else self.rho.tolist(),
            },
            indent=2,
        )


def rho_matrix(ll_vectors: list) -> np.ndarray:
    """Pairwise Spearman correlations between per-model log-likelihoods."""
    k = len(ll_vectors)
    r = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            r[i, j] = r[j, i] = spearman_rho(ll_vectors[i], ll_vectors[j])
    return r


def screen_encoders(profile: DiagnosticProfile, threshold: float = 0.5) -> dict:
    """Greedy redundancy screening in input order: accept a model iff its
    rank correlation with every already-accepted model is below threshold."""
    if profile.rho is None:
        raise ValidationError("profile has no rho matrix")
    accepted, rejected = [], []
    for i, m in enumerate(profile.models):
        if all(abs(profile.rho[i, j]) < threshold for j in accepted):
            accepted.append(i)
        else:
            rejected.append(i)
    return {
        "threshold": threshold,
        "accepted": [profile.models[i].name for i in accepted],
        "rejected": [profile.models[i].name for i in rejected],
        "rho": profile.rho.tolist(),
    }
