"""Shared test oracles: Gaussian density fits, KS critical values, and the
tri-encoder scenario scoring used by the calibration-level tests."""

from __future__ import annotations

import numpy as np
from scipy import special
from scipy.linalg import solve_triangular

from encmin2l import FeatureSet, apply_fork, fit_fork_stats, gen_synthetic


def ks_critical(n: int, alpha: float) -> float:
    """Asymptotic one-sample Kolmogorov-Smirnov critical value."""
    return float(special.kolmogi(alpha)) / np.sqrt(n)


def simulated_ks_quantile(n: int, q: float, n_sims: int = 1000,
                          seed: int = 1234) -> float:
    """Monte-Carlo quantile of the KS statistic of n uniform samples."""
    rng = np.random.default_rng(seed)
    i = np.arange(1, n + 1)
    stats = np.empty(n_sims)
    for s in range(n_sims):
        x = np.sort(rng.uniform(size=n))
        stats[s] = max(np.max(i / n - x), np.max(x - (i - 1) / n))
    return float(np.quantile(stats, q))


class GaussianScorer:
    """Full-covariance Gaussian log-density fitted by maximum likelihood;
    the closed-form stand-in for a per-fork density model."""

    def __init__(self, X: np.ndarray, ridge: float = 1e-6):
        X = np.asarray(X, dtype=np.float64)
        self.mu = X.mean(axis=0)
        cov = np.cov(X, rowvar=False, bias=True) + ridge * np.eye(X.shape[1])
        self.chol = np.linalg.cholesky(cov)
        self.logdet = 2.0 * float(np.sum(np.log(np.diag(self.chol))))
        self.d = X.shape[1]

    def loglik(self, X: np.ndarray) -> np.ndarray:
        diff = np.asarray(X, dtype=np.float64) - self.mu
        y = solve_triangular(self.chol, diff.T, lower=True)
        quad = np.sum(y * y, axis=0)
        return -0.5 * (quad + self.logdet + self.d * np.log(2.0 * np.pi))


def tri_encoder_lls(scenario, n_per_split: int, seed: int):
    """Generate the tri-encoder scenario and score every split and shift with
    per-(encoder, fork) Gaussian oracles fitted on the train split.

    Returns (scenario_data, lls) where lls[split_or_shift][(enc, fork)] is an
    array of nats; ID splits are keyed 'val' and 'test'.
    """
    data = gen_synthetic(scenario, n_per_split, seed)
    encoders = [e.name for e in scenario.encoders]

    stats = {}
    scorers = {}
    for enc in encoders:
        train_fs = data.id_splits["train"][enc]
        stats[enc] = fit_fork_stats(train_fs)
        for fork in ("normed", "unnormed"):
            X = _forked(train_fs, stats[enc], fork)
            scorers[(enc, fork)] = GaussianScorer(X)

    def score_set(by_enc):
        out = {}
        for enc in encoders:
            for fork in ("normed", "unnormed"):
                X = _forked(by_enc[enc], stats[enc], fork)
                out[(enc, fork)] = scorers[(enc, fork)].loglik(X)
        return out

    lls = {"val": score_set(data.id_splits["val"]),
           "test": score_set(data.id_splits["test"])}
    for shift, by_enc in data.ood.items():
        lls[shift] = score_set(by_enc)
    return data, lls


def _forked(fs: FeatureSet, stats, fork: str) -> np.ndarray:
    if fork == "normed":
        return apply_fork(fs, stats).data.astype(np.float64)
    return fs.data.astype(np.float64)
