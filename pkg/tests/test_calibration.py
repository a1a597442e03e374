import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import helpers
from encmin2l import (
    EcdfTable,
    ValidationError,
    adjust_threshold,
    calibrate,
    detect,
    ecdf_eval,
    ks_uniform,
    level1_min,
    min_gate_power_check,
)
from encmin2l.calibration import (
    bundle_to_json,
    load_bundle,
    quantile_lower,
    save_bundle,
    write_detect_csv,
)


def two_encoder_lls(rng, n, shift=0.0):
    """Correlated fork pairs per encoder, standard-normal-ish nats."""
    out = {}
    for enc in ("a", "b"):
        base = rng.standard_normal(n) - shift
        out[(enc, "normed")] = base + 0.1 * rng.standard_normal(n)
        out[(enc, "unnormed")] = base + 0.1 * rng.standard_normal(n)
    return out


class TestEcdf:
    def test_midpoint(self):
        tab = EcdfTable(np.array([1.0, 2.0, 3.0, 4.0]))
        assert ecdf_eval(tab, 2.5) == pytest.approx(0.5)

    def test_below_support_floor(self):
        tab = EcdfTable(np.array([1.0, 2.0, 3.0, 4.0]))
        assert ecdf_eval(tab, -10.0) == pytest.approx(1.0 / 6.0)

    def test_tie_counts_as_leq(self):
        tab = EcdfTable(np.array([1.0, 2.0, 3.0, 4.0]))
        assert ecdf_eval(tab, 2.0) == pytest.approx(3.0 / 6.0)

    def test_never_touches_0_or_1(self):
        tab = EcdfTable(np.sort(np.random.default_rng(0).standard_normal(50)))
        lo = ecdf_eval(tab, -1e9)
        hi = ecdf_eval(tab, 1e9)
        assert 0.0 < lo < hi < 1.0

    def test_requires_sorted(self):
        with pytest.raises(ValidationError):
            EcdfTable(np.array([2.0, 1.0]))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_monotone(self, seed):
        rng = np.random.default_rng(seed)
        tab = EcdfTable(np.sort(rng.standard_normal(20)))
        xs = np.sort(rng.standard_normal(30))
        vals = ecdf_eval(tab, xs)
        assert (np.diff(vals) >= 0).all()


class TestLevel1Min:
    def test_basic(self):
        assert level1_min(0.3, 0.7) == 0.3

    def test_tie(self):
        assert level1_min(0.5, 0.5) == 0.5

    def test_expectation_one_third(self):
        # Min of two independent uniforms has mean 1/3 (Beta(1,2)).
        rng = np.random.default_rng(123)
        n = 100_000
        m = level1_min(rng.uniform(size=n), rng.uniform(size=n))
        se = np.sqrt(1.0 / 18.0 / n)
        assert abs(m.mean() - 1.0 / 3.0) < 3 * se


class TestBetaNull:
    """Min of K iid uniforms follows Beta(1, K): CDF 1 - (1-m)^K."""

    @pytest.mark.parametrize("k", [2, 3, 5])
    def test_ks_against_beta_cdf(self, k):
        rng = np.random.default_rng(1000 + k)
        n = 100_000
        m = rng.uniform(size=(n, k)).min(axis=1)
        x = np.sort(m)
        cdf = 1.0 - (1.0 - x) ** k
        i = np.arange(1, n + 1)
        stat = max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n))
        assert stat < helpers.ks_critical(n, 0.01)


class TestCalibrate:
    def test_flagged_fraction_matches_alpha(self):
        rng = np.random.default_rng(2)
        lls = two_encoder_lls(rng, 1000)
        bundle = calibrate(lls, alpha=0.05)
        rep = detect(bundle, lls)
        assert 0.04 <= rep.is_ood.mean() <= 0.06

    def test_single_model_score_is_uniform(self):
        # One encoder, one fork: s is the re-CDF'd p-value, hence uniform.
        rng = np.random.default_rng(3)
        lls = {("a", "normed"): rng.standard_normal(2000)}
        bundle = calibrate(lls, alpha=0.05)
        rep = detect(bundle, lls)
        assert ks_uniform(rep.s) < helpers.ks_critical(2000, 0.01)

    def test_comonotone_encoders_keep_uniformity(self):
        # Two encoders with identical arrays: the level-2 min of two
        # perfectly correlated uniforms is the identity.
        rng = np.random.default_rng(4)
        base = rng.standard_normal(2000)
        lls = {("a", "normed"): base.copy(), ("b", "normed"): base.copy()}
        bundle = calibrate(lls, alpha=0.05)
        rep = detect(bundle, lls)
        assert ks_uniform(rep.s) < helpers.ks_critical(2000, 0.01)

    def test_requires_min_samples(self):
        rng = np.random.default_rng(5)
        with pytest.raises(ValidationError, match="20"):
            calibrate({("a", "normed"): rng.standard_normal(10)}, 0.05)

    def test_alpha_range(self):
        rng = np.random.default_rng(6)
        lls = {("a", "normed"): rng.standard_normal(100)}
        for bad in (0.0, 0.7, 1.0):
            with pytest.raises(ValidationError):
                calibrate(lls, bad)

    def test_mismatched_lengths(self):
        rng = np.random.default_rng(7)
        lls = {("a", "normed"): rng.standard_normal(100),
               ("a", "unnormed"): rng.standard_normal(99)}
        with pytest.raises(ValidationError, match="mismatch"):
            calibrate(lls, 0.05)


class TestDetect:
    def test_extreme_ood_hits_smoothing_floor(self):
        rng = np.random.default_rng(8)
        lls = two_encoder_lls(rng, 200)
        bundle = calibrate(lls, alpha=0.05)
        far = {k: np.full(3, -1e9) for k in lls}
        rep = detect(bundle, far)
        floor = 1.0 / (202.0)  # (0+1)/(N+2) at level 1 then re-CDF'd
        assert rep.is_ood.all()
        assert (rep.s <= bundle.tau).all()
        assert (rep.s >= 0).all() and (rep.s <= floor + 1e-12).all()

    def test_missing_fork_key(self):
        rng = np.random.default_rng(9)
        lls = two_encoder_lls(rng, 100)
        bundle = calibrate(lls, alpha=0.05)
        partial = {k: v for k, v in lls.items() if k != ("b", "unnormed")}
        with pytest.raises(ValidationError, match="missing fork key"):
            detect(bundle, partial)

    def test_argmin_ties_take_lowest_index(self):
        rng = np.random.default_rng(10)
        base = rng.standard_normal(100)
        lls = {("a", "normed"): base.copy(), ("b", "normed"): base.copy()}
        bundle = calibrate(lls, alpha=0.05)
        rep = detect(bundle, lls)
        # identical arrays -> identical e_hat -> ties resolve to encoder a
        assert set(rep.argmin_encoder) == {"a"}

    def test_monotone_in_inputs(self):
        # Raising any log-likelihood never lowers the combined score.
        rng = np.random.default_rng(11)
        lls = two_encoder_lls(rng, 300)
        bundle = calibrate(lls, alpha=0.05)
        test = {k: v[:50].copy() for k, v in lls.items()}
        s0 = detect(bundle, test).s
        for key in test:
            bumped = {k: v.copy() for k, v in test.items()}
            bumped[key] = bumped[key] + 1.0
            s1 = detect(bundle, bumped).s
            assert (s1 >= s0 - 1e-15).all()


class TestAdjustThreshold:
    def test_idempotent_at_same_alpha(self):
        rng = np.random.default_rng(12)
        bundle = calibrate(two_encoder_lls(rng, 500), alpha=0.05)
        assert adjust_threshold(bundle, 0.05).tau == bundle.tau

    def test_smaller_alpha_smaller_tau(self):
        rng = np.random.default_rng(13)
        bundle = calibrate(two_encoder_lls(rng, 500), alpha=0.05)
        assert adjust_threshold(bundle, 0.01).tau <= bundle.tau

    def test_flagged_fraction_tracks_new_alpha(self):
        rng = np.random.default_rng(14)
        lls = two_encoder_lls(rng, 2000)
        bundle = calibrate(lls, alpha=0.05)
        for a in (0.02, 0.1):
            rep = detect(adjust_threshold(bundle, a), lls)
            assert abs(rep.is_ood.mean() - a) < 0.012


class TestMinGatePower:
    def test_worked_example(self):
        rep = min_gate_power_check(
            {"u1": np.array([0.1, 0.6]), "u2": np.array([0.5, 0.05])}, 0.2)
        assert rep["p_gate"] == 1.0
        assert max(rep["p_each"].values()) == 0.5
        assert rep["ok"]

    def test_single_encoder_equality(self):
        u = np.random.default_rng(15).uniform(size=50)
        rep = min_gate_power_check({"only": u}, 0.3)
        assert rep["p_gate"] == rep["p_each"]["only"]

    def test_randomized_never_violated(self):
        rng = np.random.default_rng(16)
        for _ in range(10_000):
            k = int(rng.integers(1, 5))
            n = int(rng.integers(1, 20))
            u = {f"e{i}": rng.uniform(size=n) for i in range(k)}
            tau = float(rng.uniform())
            assert min_gate_power_check(u, tau)["ok"]

    @settings(max_examples=200, deadline=None)
    @given(
        n=st.integers(1, 30),
        k=st.integers(1, 4),
        tau=st.floats(0.0, 1.0),
        seed=st.integers(0, 2**31),
    )
    def test_inequality_property(self, n, k, tau, seed):
        rng = np.random.default_rng(seed)
        u = {f"e{i}": rng.uniform(size=n) for i in range(k)}
        assert min_gate_power_check(u, tau)["ok"]


class TestQuantile:
    def test_lower_interpolation(self):
        s = np.arange(100, dtype=float)
        assert quantile_lower(s, 0.05) == float(np.quantile(s, 0.05,
                                                            method="lower"))


class TestBundleIO:
    def test_cal1_roundtrip(self, tmp_path):
        rng = np.random.default_rng(17)
        bundle = calibrate(two_encoder_lls(rng, 100), alpha=0.05)
        path = tmp_path / "c.cal1"
        save_bundle(bundle, path)
        back = load_bundle(path)
        assert back.encoders == bundle.encoders
        assert back.alpha == bundle.alpha
        assert back.tau == pytest.approx(bundle.tau, rel=1e-6)
        # re-save is byte identical
        path2 = tmp_path / "c2.cal1"
        save_bundle(back, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_loaded_bundle_detects_identically(self, tmp_path):
        # The pipeline quantizes references and p-values at f32 (the CAL1
        # interchange precision), so reload changes nothing.
        rng = np.random.default_rng(18)
        lls = two_encoder_lls(rng, 500)
        bundle = calibrate(lls, alpha=0.05)
        path = tmp_path / "c.cal1"
        save_bundle(bundle, path)
        back = load_bundle(path)
        r1 = detect(bundle, lls)
        r2 = detect(back, lls)
        assert np.array_equal(r1.is_ood, r2.is_ood)
        assert np.array_equal(r1.s, r2.s)

    def test_json_export(self):
        rng = np.random.default_rng(19)
        bundle = calibrate(two_encoder_lls(rng, 50), alpha=0.1)
        doc = bundle_to_json(bundle)
        assert '"alpha": 0.1' in doc
        assert '"a:normed"' in doc

    def test_detect_csv(self, tmp_path):
        rng = np.random.default_rng(20)
        lls = two_encoder_lls(rng, 60)
        bundle = calibrate(lls, alpha=0.05)
        rep = detect(bundle, lls)
        path = tmp_path / "d.csv"
        write_detect_csv(rep, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "sample_index,s,is_ood,argmin_encoder,ehat_a,ehat_b"
        assert len(lines) == 61
