"""Embedded Dormand-Prince 5(4) integrator with PI step-size control.

Fixed-policy implementation: FSAL evaluation reuse, Hairer-style scaled RMS
error norm, PI controller with safety 0.9, step-growth clamp [0.2, 10].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StiffIntegrationError

# Butcher tableau (Dormand & Prince 1980), 7 stages, order 5(4).
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# b5 - b4: coefficients of the embedded local error estimate.
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920,
               -17253 / 339200, 22 / 525, -1 / 40])

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
_ORDER = 5.0
# PI controller exponents (Hairer & Wanner II.4).
_PI_ALPHA = 0.7 / _ORDER
_PI_BETA = 0.4 / _ORDER


@dataclass
class OdeResult:
    y: np.ndarray
    n_steps: int
    n_accepted: int
    n_evals: int


def integrate_dopri5(f, t0: float, t1: float, y0, rtol: float, atol: float,
                     first_step: float = 1e-3, max_steps: int = 100_000) -> OdeResult:
    """Integrate dy/dt = f(t, y) from t0 to t1 (t1 > t0).

    Raises StiffIntegrationError if the step size underflows or max_steps is
    exhausted; raises on non-finite state.
    """
    if t1 <= t0:
        raise ValueError("need t1 > t0")
    y = np.asarray(y0, dtype=np.float64).copy()
    t = float(t0)
    span = t1 - t0
    h = min(float(first_step), span)
    h_floor = max(span, 1.0) * 1e-14

    k = [None] * 7
    k[0] = np.asarray(f(t, y), dtype=np.float64)
    n_evals = 1
    n_steps = n_accepted = 0
    err_prev = 1.0

    while t < t1:
        if n_steps >= max_steps:
            raise StiffIntegrationError(
                f"stiff integration: exceeded {max_steps} steps at t={t:.6g}")
        if h < h_floor:
            raise StiffIntegrationError(
                f"stiff integration: step size underflow at t={t:.6g}")
        last = h >= t1 - t
        h = min(h, t1 - t)
        n_steps += 1

        for i in range(1, 7):
            yi = y + h * sum(a * k[j] for j, a in enumerate(_A[i]) if a != 0.0)
            k[i] = np.asarray(f(t + _C[i] * h, yi), dtype=np.float64)
        n_evals += 6

        y_new = y + h * (
            _B5[0] * k[0] + _B5[2] * k[2] + _B5[3] * k[3]
            + _B5[4] * k[4] + _B5[5] * k[5]
        )
        err_vec = h * (
            _E[0] * k[0] + _E[2] * k[2] + _E[3] * k[3]
            + _E[4] * k[4] + _E[5] * k[5] + _E[6] * k[6]
        )
        if not np.isfinite(y_new).all():
            raise StiffIntegrationError(
                f"stiff integration: non-finite state at t={t:.6g}")
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = float(np.sqrt(np.mean((err_vec / scale) ** 2)))

        if err <= 1.0:
            t = t1 if last else t + h
            y = y_new
            k[0] = k[6]  # FSAL: stage 7 is f at the accepted point
            n_accepted += 1
            err = max(err, 1e-10)
            factor = _SAFETY * err ** (-_PI_ALPHA) * err_prev ** _PI_BETA
            err_prev = err
            h *= min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
        else:
            h *= min(1.0, max(_MIN_FACTOR, _SAFETY * err ** (-1.0 / _ORDER)))

    return OdeResult(y=y, n_steps=n_steps, n_accepted=n_accepted, n_evals=n_evals)
