import numpy as np
import pytest
from scipy.integrate import solve_ivp

from encmin2l.errors import StiffIntegrationError
from encmin2l.odesolver import integrate_dopri5


class TestAgainstClosedForms:
    def test_exponential_decay(self):
        res = integrate_dopri5(lambda t, y: -2.0 * y, 0.0, 1.0,
                               np.array([3.0]), rtol=1e-8, atol=1e-10)
        assert res.y[0] == pytest.approx(3.0 * np.exp(-2.0), rel=1e-7)

    def test_linear_oscillator(self):
        def f(t, y):
            return np.array([y[1], -y[0]])

        res = integrate_dopri5(f, 0.0, 2.0, np.array([1.0, 0.0]),
                               rtol=1e-9, atol=1e-11)
        assert res.y[0] == pytest.approx(np.cos(2.0), abs=1e-7)
        assert res.y[1] == pytest.approx(-np.sin(2.0), abs=1e-7)

    def test_polynomial_is_nearly_exact(self):
        # y' = 5 t^4 integrates a quartic exactly at order 5
        res = integrate_dopri5(lambda t, y: np.array([5 * t**4]), 0.0, 1.0,
                               np.array([0.0]), rtol=1e-6, atol=1e-9)
        assert res.y[0] == pytest.approx(1.0, rel=1e-9)


class TestAgainstScipy:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_rk45_reference(self, seed):
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((4, 4)) * 0.8
        y0 = rng.standard_normal(4)

        def f(t, y):
            return A @ y + np.sin(3 * t)

        mine = integrate_dopri5(f, 0.0, 1.5, y0, rtol=1e-8, atol=1e-10)
        ref = solve_ivp(f, (0.0, 1.5), y0, method="RK45", rtol=1e-10, atol=1e-12)
        assert mine.y == pytest.approx(ref.y[:, -1], rel=1e-6, abs=1e-8)


class TestErrorControl:
    def test_tighter_tolerance_reduces_error(self):
        def f(t, y):
            return np.array([y[0] * np.cos(4 * t)])

        exact = np.exp(np.sin(4 * 2.0) / 4)
        errs = []
        for tol in (1e-3, 1e-5, 1e-7):
            res = integrate_dopri5(f, 0.0, 2.0, np.array([1.0]), rtol=tol,
                                   atol=tol)
            errs.append(abs(res.y[0] - exact))
        assert errs[0] >= errs[1] >= errs[2]

    def test_max_steps_exhaustion(self):
        with pytest.raises(StiffIntegrationError, match="stiff"):
            integrate_dopri5(lambda t, y: -1e6 * (y - np.cos(t)), 0.0, 1.0,
                             np.array([0.0]), rtol=1e-10, atol=1e-12,
                             max_steps=10)

    def test_nonfinite_state(self):
        # blow-up: y' = y^2 from y0=1 diverges at t=1
        with pytest.raises(StiffIntegrationError):
            integrate_dopri5(lambda t, y: y * y, 0.0, 2.0, np.array([1.0]),
                             rtol=1e-6, atol=1e-9)

    def test_reaches_endpoint_exactly(self):
        res = integrate_dopri5(lambda t, y: np.array([1.0]), 0.0, 0.3,
                               np.array([0.0]), rtol=1e-6, atol=1e-9)
        assert res.y[0] == pytest.approx(0.3, rel=1e-12)

    def test_rejects_backward_span(self):
        with pytest.raises(ValueError):
            integrate_dopri5(lambda t, y: y, 1.0, 0.5, np.array([1.0]),
                             rtol=1e-6, atol=1e-9)
