"""Evaluation statistics against brute-force and library oracles."""

import itertools
import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from vqnorm import stats
from vqnorm.errors import ContractError, NumericError


def pairwise_auroc(scores, labels):
    """O(n^2) enumeration of (patient, control) pairs."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


# ------------------------------------------------------------------ AUROC

class TestAuroc:
    def test_hand_case(self):
        assert stats.auroc([3, 5, 2, 4], [1, 1, 0, 0]) == 0.75

    def test_perfect_and_reversed(self):
        assert stats.auroc([0.1, 0.2, 0.9, 0.8], [0, 0, 1, 1]) == 1.0
        assert stats.auroc([0.9, 0.8, 0.1, 0.2], [0, 0, 1, 1]) == 0.0

    def test_all_tied_is_half(self):
        assert stats.auroc([1, 1, 1, 1, 1], [0, 1, 0, 1, 1]) == 0.5

    def test_matches_pairs_with_ties(self, rng):
        s = rng.integers(0, 6, size=60).astype(float)
        y = rng.integers(0, 2, size=60)
        assert stats.auroc(s, y) == pytest.approx(pairwise_auroc(s, y), abs=1e-12)

    def test_errors(self):
        with pytest.raises(ContractError):
            stats.auroc([1, 2], [1, 1])
        with pytest.raises(ContractError):
            stats.auroc([1, 2, 3], [0, 1])
        with pytest.raises(ContractError):
            stats.auroc([1, 2], [0, 2])

    def test_average_ranks_match_scipy(self, rng):
        v = rng.integers(0, 5, size=40)
        np.testing.assert_array_equal(stats.average_ranks(v), scipy.stats.rankdata(v))


labelled = st.integers(4, 40).flatmap(lambda n: st.tuples(
    st.lists(st.integers(-5, 5).map(float), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n)))


@settings(max_examples=80, deadline=None)
@given(labelled)
def test_auroc_pair_oracle_and_symmetry(data):
    s, y = data
    assume(0 < sum(y) < len(y))
    a = stats.auroc(s, y)
    assert a == pytest.approx(pairwise_auroc(s, y), abs=1e-12)
    assert 0.0 <= a <= 1.0
    assert stats.auroc([-v for v in s], y) == pytest.approx(1.0 - a, abs=1e-12)
    # any strictly increasing transform leaves AUROC unchanged
    assert stats.auroc([math.exp(v / 3) for v in s], y) == pytest.approx(a, abs=1e-12)


# ------------------------------------------------------------------ t distribution

class TestStudentT:
    @pytest.mark.parametrize("df", [1, 2.5, 5, 30, 200])
    @pytest.mark.parametrize("t", [0.0, 0.3, 1.0, 2.2, 5.0, 12.0])
    def test_sf_matches_scipy(self, t, df):
        assert stats.student_t_sf(t, df) == pytest.approx(scipy.stats.t.sf(t, df), rel=1e-10, abs=1e-300)
        assert stats.student_t_cdf(-t, df) == pytest.approx(scipy.stats.t.cdf(-t, df), rel=1e-10, abs=1e-300)

    @pytest.mark.parametrize("df,t", [(3, 1.7), (9, 0.4), (22, 2.9)])
    def test_sf_matches_density_quadrature(self, df, t):
        c = math.gamma((df + 1) / 2) / (math.sqrt(df * math.pi) * math.gamma(df / 2))
        tail, _ = quad(lambda u: c * (1 + u * u / df) ** (-(df + 1) / 2), t, np.inf, epsabs=1e-14)
        assert stats.student_t_sf(t, df) == pytest.approx(tail, rel=1e-9)

    def test_symmetry_and_bounds(self):
        assert stats.student_t_sf(0.0, 7) == 0.5
        assert stats.student_t_sf(-2.0, 7) == pytest.approx(1 - stats.student_t_sf(2.0, 7), abs=1e-15)
        with pytest.raises(ValueError):
            stats.student_t_sf(1.0, 0)

    @pytest.mark.parametrize("a,b,x", [(0.5, 0.5, 0.3), (2, 7, 0.9), (40, 3, 0.95), (1, 1, 0.42)])
    def test_incomplete_beta(self, a, b, x):
        assert stats.betainc_reg(a, b, x) == pytest.approx(scipy.special.betainc(a, b, x), rel=1e-11)


# ------------------------------------------------------------------ tests

class TestTwoGroup:
    def test_point_biserial_hand_case(self):
        r, p = stats.point_biserial([1, 2, 3, 4], [0, 0, 1, 1])
        assert r == pytest.approx(0.8944271909999159, abs=1e-12)
        # t = r sqrt(2 / (1 - r^2)) = 2 sqrt(2) on 2 df
        assert p == pytest.approx(2 * scipy.stats.t.sf(2 * math.sqrt(2), 2), rel=1e-10)

    def test_point_biserial_matches_pearson(self, rng):
        s = rng.normal(size=50)
        y = rng.integers(0, 2, size=50)
        r, p = stats.point_biserial(s, y)
        ref = scipy.stats.pearsonr(s, y)
        assert r == pytest.approx(ref[0], abs=1e-12)
        assert p == pytest.approx(ref[1], rel=1e-8)

    def test_point_biserial_errors(self):
        with pytest.raises(ContractError):
            stats.point_biserial([1, 2], [0, 1])
        with pytest.raises(ContractError):
            stats.point_biserial([1, 2, 3], [1, 1, 1])
        with pytest.raises(NumericError):
            stats.point_biserial([2, 2, 2], [0, 1, 1])
        assert stats.point_biserial([0, 0, 1, 1], [0, 0, 1, 1]) == (1.0, 0.0)

    def test_cohens_d_hand_case(self):
        # both groups have sd sqrt(2); means differ by 1
        assert stats.cohens_d([1, 3], [2, 4]) == pytest.approx(-1 / math.sqrt(2), abs=1e-12)
        assert abs(stats.cohens_d([2, 4], [1, 3])) == pytest.approx(0.7071067811865476, abs=1e-12)

    def test_cohens_d_unequal_sizes(self, rng):
        a, b = rng.normal(1, 2, size=13), rng.normal(0, 1, size=29)
        pooled = math.sqrt(((12 * a.var(ddof=1)) + 28 * b.var(ddof=1)) / 40)
        assert stats.cohens_d(a, b) == pytest.approx((a.mean() - b.mean()) / pooled, rel=1e-12)

    def test_cohens_d_degenerate(self):
        with pytest.raises(NumericError):
            stats.cohens_d([1, 1], [1, 1])
        with pytest.raises(ContractError):
            stats.cohens_d([], [1, 2, 3])

    def test_welch_matches_scipy(self, rng):
        a, b = rng.normal(0.5, 1, size=17), rng.normal(0, 3, size=40)
        t, p = stats.two_sample_t(a, b)
        ref = scipy.stats.ttest_ind(a, b, equal_var=False)
        assert t == pytest.approx(ref.statistic, rel=1e-12)
        assert p == pytest.approx(ref.pvalue, rel=1e-9)

    def test_welch_degenerate(self):
        with pytest.raises(NumericError):
            stats.two_sample_t([1, 1], [2, 2])
        with pytest.raises(ContractError):
            stats.two_sample_t([1], [2, 3])

    def test_bonferroni_is_strict(self):
        flags = stats.bonferroni([0.01, 0.0125, 0.02, 0.5], alpha=0.05)
        np.testing.assert_array_equal(flags, [True, False, False, False])
        assert stats.bonferroni([]).size == 0
        with pytest.raises(ContractError):
            stats.bonferroni([1.2])


# ------------------------------------------------------------------ regions

class TestRegionRanking:
    def test_rank_by_absolute_effect(self, rng):
        labels = np.r_[np.zeros(30, int), np.ones(30, int)]
        table = rng.normal(size=(60, 5))
        table[labels == 1, 3] -= 2.0   # strong, patients lower
        table[labels == 1, 1] += 1.0   # moderate, patients higher
        top = stats.rank_regions(table, labels, k=2)
        assert [e.region_id for e in top] == [4, 2]
        assert top[0].cohens_d > 0 > top[1].cohens_d
        assert top[0].significant

    def test_ties_prefer_lower_id(self):
        labels = [0, 0, 1, 1]
        table = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0], [4.0, 4.0]])
        assert [e.region_id for e in stats.rank_regions(table, labels, k=2, region_ids=[7, 3])] == [3, 7]

    def test_k_too_large(self):
        with pytest.raises(ContractError):
            stats.rank_regions(np.zeros((4, 2)), [0, 0, 1, 1], k=3)

    def test_constant_region_gets_zero_effect(self):
        effects = stats.region_effects(np.ones((4, 1)), [0, 0, 1, 1])
        assert effects[0].cohens_d == 0.0 and effects[0].p_value == 1.0


# ------------------------------------------------------------------ report

def test_report_tables():
    y = [0, 0, 0, 1, 1, 1]
    report = stats.build_report(
        {"ours": ([0.1, 0.2, 0.3, 0.7, 0.8, 0.25], y), "flat": ([1, 1, 1, 1, 1, 1], y),
         "single": ([1, 2], [0, 0])},
        region_table=np.arange(12, dtype=float).reshape(6, 2), region_labels=y, top_k=1)
    assert report.method("ours").auroc == pytest.approx(pairwise_auroc([0.1, 0.2, 0.3, 0.7, 0.8, 0.25], y))
    assert report.method("flat").correlation == 0.0 and report.method("flat").auroc == 0.5
    assert any("single" in n for n in report.notes)
    lines = report.to_tsv().splitlines()
    assert lines[0].split("\t")[:3] == ["method", "auroc", "correlation"]
    assert len(lines) == 3
    assert len(report.top_regions()) == 1
    text = report.to_text()
    assert "Top 1 regions" in text and "ours" in text
    rows = stats.violin_rows({"ours": (["a", "b"], [0.5, 1.5], [0, 1])}).splitlines()
    assert rows[1:] == ["ours\ta\tcontrol\t0.5", "ours\tb\tpatient\t1.5"]
