"""Variance-preserving SDE schedule: linear beta(t) and its closed forms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class VpSchedule:
    beta_min: float = 0.1
    beta_max: float = 20.0
    T: float = 1.0
    t_eps: float = 1e-5

    def __post_init__(self):
        if not 0 < self.beta_min < self.beta_max:
            raise ValidationError("need 0 < beta_min < beta_max")
        if not 0 < self.t_eps < self.T:
            raise ValidationError("need 0 < t_eps < T")


def beta(sched: VpSchedule, t):
    """Linear noise schedule beta(t) = beta_min + t * (beta_max - beta_min)."""
    return sched.beta_min + t * (sched.beta_max - sched.beta_min)


def _check_range(sched: VpSchedule, t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > sched.T):
        raise ValidationError(f"t out of range [0, {sched.T}]")
    return t


def int_beta(sched: VpSchedule, t):
    """Integral of beta over [0, t]: beta_min*t + (beta_max-beta_min)*t^2/2."""
    t = _check_range(sched, t)
    return sched.beta_min * t + 0.5 * (sched.beta_max - sched.beta_min) * t * t


def marginal(sched: VpSchedule, t):
    """(alpha_t, sigma_t) of the VP marginal z_t = alpha_t z_0 + sigma_t eps.

    alpha_t = exp(-int_beta(t)/2), sigma_t = sqrt(1 - alpha_t^2); the pair
    satisfies alpha_t^2 + sigma_t^2 = 1 for every t.
    """
    ib = int_beta(sched, t)
    alpha = np.exp(-0.5 * ib)
    sigma = np.sqrt(-np.expm1(-ib))  # sqrt(1 - alpha^2), accurate near t=0
    return alpha, sigma
