import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from encmin2l import ScoredPair, ValidationError, auroc, fpr_at_tpr, ks_uniform
from encmin2l.metrics import format_pair


def brute_force_auroc(id_scores, ood_scores):
    wins = ties = 0
    for o in ood_scores:
        for i in id_scores:
            if o < i:
                wins += 1
            elif o == i:
                ties += 1
    return (wins + 0.5 * ties) / (len(id_scores) * len(ood_scores))


def brute_force_fpr(id_scores, ood_scores, target):
    ood = np.sort(np.asarray(ood_scores, float))
    # walk thresholds until the fraction of ood at-or-below reaches target
    for t in ood:
        if np.mean(ood <= t) >= target:
            return float(np.mean(np.asarray(id_scores) < t))
    return float(np.mean(np.asarray(id_scores) < ood[-1]))


class TestAuroc:
    def test_perfect_separation(self):
        p = ScoredPair(id_scores=np.array([0.8, 0.9]),
                       ood_scores=np.array([0.1, 0.2]))
        assert auroc(p) == 1.0

    def test_identical_multisets(self):
        x = np.array([0.1, 0.5, 0.9])
        assert auroc(ScoredPair(id_scores=x, ood_scores=x.copy())) == 0.5

    def test_worked_example(self):
        p = ScoredPair(id_scores=np.array([0.5]),
                       ood_scores=np.array([0.3, 0.7]))
        assert auroc(p) == 0.5

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31), n=st.integers(1, 25), m=st.integers(1, 25))
    def test_rank_sum_equals_brute_force(self, seed, n, m):
        rng = np.random.default_rng(seed)
        # quantized values force ties
        idd = np.round(rng.standard_normal(n), 1)
        ood = np.round(rng.standard_normal(m), 1)
        p = ScoredPair(id_scores=idd, ood_scores=ood)
        assert auroc(p) == pytest.approx(brute_force_auroc(idd, ood), abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_monotone_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        idd, ood = rng.standard_normal(12), rng.standard_normal(15)
        a = auroc(ScoredPair(id_scores=idd, ood_scores=ood))
        b = auroc(ScoredPair(id_scores=np.exp(idd), ood_scores=np.exp(ood)))
        assert a == pytest.approx(b, abs=1e-12)

    def test_complement_on_swap(self):
        rng = np.random.default_rng(5)
        idd, ood = rng.standard_normal(20), rng.standard_normal(30) - 0.5
        a = auroc(ScoredPair(id_scores=idd, ood_scores=ood))
        b = auroc(ScoredPair(id_scores=ood, ood_scores=idd))
        assert a + b == pytest.approx(1.0, abs=1e-12)

    def test_validation(self):
        with pytest.raises(ValidationError):
            ScoredPair(id_scores=np.array([]), ood_scores=np.array([1.0]))
        with pytest.raises(ValidationError):
            ScoredPair(id_scores=np.array([np.nan]), ood_scores=np.array([1.0]))


class TestFprAtTpr:
    def test_perfect_separation(self):
        p = ScoredPair(id_scores=np.array([0.8, 0.9]),
                       ood_scores=np.array([0.1, 0.2]))
        assert fpr_at_tpr(p) == 0.0

    def test_exchangeable_approaches_target(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal(10_000)
        y = rng.standard_normal(10_000)
        p = ScoredPair(id_scores=x, ood_scores=y)
        assert abs(fpr_at_tpr(p, 0.95) - 0.95) < 0.02

    def test_threshold_walk_example(self):
        ood = np.arange(0.1, 1.05, 0.1)  # 10 points
        idd = np.array([0.05, 0.5, 0.95, 2.0])
        p = ScoredPair(id_scores=idd, ood_scores=ood)
        # target 0.95 over 10 points -> k = 10 -> t* = max(ood) = 1.0
        assert fpr_at_tpr(p, 0.95) == pytest.approx(np.mean(idd < 1.0))

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31), target=st.sampled_from([0.5, 0.8, 0.95]))
    def test_matches_threshold_walk_oracle(self, seed, target):
        rng = np.random.default_rng(seed)
        idd = np.round(rng.standard_normal(20), 1)
        ood = np.round(rng.standard_normal(15), 1)
        p = ScoredPair(id_scores=idd, ood_scores=ood)
        assert fpr_at_tpr(p, target) == pytest.approx(
            brute_force_fpr(idd, ood, target), abs=1e-12)

    def test_nondecreasing_in_target(self):
        rng = np.random.default_rng(7)
        p = ScoredPair(id_scores=rng.standard_normal(50),
                       ood_scores=rng.standard_normal(50))
        vals = [fpr_at_tpr(p, t) for t in (0.5, 0.7, 0.9, 0.95, 0.99)]
        assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))

    def test_target_range(self):
        p = ScoredPair(id_scores=np.ones(2), ood_scores=np.zeros(2))
        with pytest.raises(ValidationError):
            fpr_at_tpr(p, 1.0)


class TestKsUniform:
    def test_single_point(self):
        assert ks_uniform(np.array([0.5])) == 0.5

    def test_perfect_grid(self):
        n = 20
        grid = (np.arange(1, n + 1) - 0.5) / n
        assert ks_uniform(grid) == pytest.approx(1.0 / (2 * n))

    def test_all_zeros(self):
        assert ks_uniform(np.zeros(5)) == 1.0

    def test_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            ks_uniform(np.array([0.5, 1.2]))

    def test_uniform_samples_small_stat(self):
        rng = np.random.default_rng(8)
        x = rng.uniform(size=10_000)
        import helpers

        assert ks_uniform(x) < helpers.ks_critical(10_000, 0.01)


class TestFormat:
    def test_table_style(self):
        assert format_pair(0.9514, 0.3086) == "0.951 (0.309)"
