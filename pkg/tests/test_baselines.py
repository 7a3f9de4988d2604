"""Region-wise GPR/BLR normative models and the brain-age regressor."""

import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from vqnorm.baselines import (JITTER, BlrPrior, BrainAgeConfig, CovariateScaler, _gp_fit, blr_design,
                              brain_age_proxy, fit_blr_region, fit_gpr_region, fit_region_models,
                              rbf_kernel, sex_codes, train_brain_age, zscore_subject)
from vqnorm.errors import ContractError, NumericError


@pytest.fixture
def demo(rng):
    n = 40
    ages = rng.uniform(5, 37, size=n)
    sexes = np.where(rng.random(n) < 0.5, "M", "F")
    x = CovariateScaler.fit(ages).transform(ages, sex_codes(sexes))
    y = 0.5 + 0.02 * np.sin(x[:, 0]) + 0.01 * x[:, 1] + 0.005 * rng.normal(size=n)
    return ages, sexes, x, y


# ------------------------------------------------------------------ GPR

class TestGpr:
    def test_posterior_matches_dense_solve(self, demo, rng):
        _, _, x, y = demo
        fit = _gp_fit(x, y, length_scale=1.3, signal_var=2e-4, noise_var=3e-5)
        xq = rng.normal(size=(7, 2))
        k = rbf_kernel(x, x, 1.3, 2e-4) + (3e-5 + JITTER * 2e-4) * np.eye(len(y))
        ks = rbf_kernel(xq, x, 1.3, 2e-4)
        mean = y.mean() + ks @ np.linalg.solve(k, y - y.mean())
        var = 2e-4 - np.einsum("ij,ji->i", ks, np.linalg.solve(k, ks.T)) + 3e-5
        mu, v = fit.predict(xq)
        np.testing.assert_allclose(mu, mean, atol=1e-10)
        np.testing.assert_allclose(v, var, atol=1e-12)
        lml = scipy.stats.multivariate_normal(np.full(len(y), y.mean()), k).logpdf(y)
        assert fit.log_marginal == pytest.approx(lml, rel=1e-9)

    def test_noiseless_interpolation(self):
        x = np.array([[0.0, 0.0], [1.0, 0.0], [2.5, 1.0]])
        y = np.array([1.0, 3.0, -2.0])
        fit = _gp_fit(x, y, length_scale=1.0, signal_var=4.0, noise_var=0.0)
        mu, var = fit.predict(x[1:2], include_noise=False)
        assert mu[0] == pytest.approx(3.0, abs=1e-6)
        assert var[0] < 1e-6

    def test_grid_search_picks_max_marginal(self, demo):
        _, _, x, y = demo
        best = fit_gpr_region(x, y)
        var = y.var()
        for ls in (0.5, 1.0, 2.0, 4.0):
            for frac in (0.01, 0.1, 1.0):
                assert _gp_fit(x, y, ls, var, frac * var).log_marginal <= best.log_marginal + 1e-12

    def test_needs_three_rows(self):
        with pytest.raises(ContractError):
            fit_gpr_region(np.zeros((2, 2)), np.zeros(2))


# ------------------------------------------------------------------ BLR

class TestBlr:
    def test_posterior_matches_conjugate_formulas(self, demo):
        _, _, x, y = demo
        d = blr_design(x)
        prior = BlrPrior(v0=10.0, a0=2.0, b0_fraction=0.5, m0=0.1)
        fit = fit_blr_region(d, y, prior)
        p = d.shape[1]
        lam0 = np.eye(p) / 10.0
        m0 = np.full(p, 0.1)
        lam_n = lam0 + d.T @ d
        m_n = np.linalg.solve(lam_n, lam0 @ m0 + d.T @ y)
        a_n = 2.0 + len(y) / 2
        b_n = 0.5 * 2.0 * y.var() + 0.5 * (y @ y + m0 @ lam0 @ m0 - m_n @ lam_n @ m_n)
        np.testing.assert_allclose(fit.mean, m_n, rtol=1e-10)
        assert fit.a == a_n and fit.b == pytest.approx(b_n, rel=1e-9)
        xq = d[:3]
        mu, var = fit.predict(xq)
        q = np.array([r @ np.linalg.solve(lam_n, r) for r in xq])
        np.testing.assert_allclose(mu, xq @ m_n, rtol=1e-10)
        np.testing.assert_allclose(var, b_n / (a_n - 1) * (1 + q), rtol=1e-9)

    def test_predictive_variance_matches_student_t(self, demo):
        _, _, x, y = demo
        fit = fit_blr_region(blr_design(x), y)
        mu, var = fit.predict(blr_design(x[:1]))
        q = blr_design(x[:1]) @ fit.cov @ blr_design(x[:1]).T
        t = scipy.stats.t(df=fit.dof, loc=mu[0], scale=math.sqrt(fit.b / fit.a * (1 + q[0, 0])))
        assert var[0] == pytest.approx(t.var(), rel=1e-10)

    def test_rank_deficient(self):
        d = np.column_stack([np.ones(6), np.arange(6), 2 * np.arange(6)])
        with pytest.raises(NumericError):
            fit_blr_region(d, np.arange(6.0))


# ------------------------------------------------------------------ region models

class TestRegionModels:
    @pytest.mark.parametrize("kind", ["gpr", "blr"])
    def test_z_scores_are_unit_free(self, kind, demo):
        ages, sexes, _, y = demo
        targets = np.column_stack([y, 1 - y])
        m1 = fit_region_models(kind, ages, sexes, targets)
        m2 = fit_region_models(kind, ages, sexes, targets * 37.5)
        z1 = zscore_subject(m1, targets[:5], ages[:5], sexes[:5]).z
        z2 = zscore_subject(m2, targets[:5] * 37.5, ages[:5], sexes[:5]).z
        np.testing.assert_allclose(z1, z2, atol=1e-8)

    @pytest.mark.parametrize("kind", ["gpr", "blr"])
    def test_healthy_z_roughly_standard(self, kind, demo):
        ages, sexes, _, y = demo
        model = fit_region_models(kind, ages, sexes, y[:, None])
        z = zscore_subject(model, y[:, None], ages, sexes)
        assert abs(z.mean_signed.mean()) < 0.3
        assert 0.3 < z.mean_abs.mean() < 1.5

    def test_validation(self, demo):
        ages, sexes, _, y = demo
        with pytest.raises(ValueError):
            fit_region_models("svm", ages, sexes, y[:, None])
        with pytest.raises(ContractError):
            fit_region_models("blr", ages, sexes, y)
        model = fit_region_models("blr", ages, sexes, y[:, None])
        with pytest.raises(ContractError):
            zscore_subject(model, np.zeros((1, 2)), ages[:1], sexes[:1])

    def test_sex_codes(self):
        np.testing.assert_array_equal(sex_codes(["M", "F", 1]), [1.0, 0.0, 1.0])


@settings(max_examples=25, deadline=None)
@given(scale=st.floats(1e-3, 1e3), shift=st.floats(-10, 10), seed=st.integers(0, 1000))
def test_blr_z_affine_invariance(scale, shift, seed):
    r = np.random.default_rng(seed)
    ages = r.uniform(5, 37, size=20)
    sexes = np.where(r.random(20) < 0.5, "M", "F")
    y = r.normal(size=(20, 2))
    z1 = zscore_subject(fit_region_models("blr", ages, sexes, y), y[:3], ages[:3], sexes[:3]).z
    y2 = y * scale + shift
    z2 = zscore_subject(fit_region_models("blr", ages, sexes, y2), y2[:3], ages[:3], sexes[:3]).z
    # the intercept prior is centred at 0, so only pure rescaling is exact
    if shift == 0:
        np.testing.assert_allclose(z1, z2, atol=1e-8)
    assert np.isfinite(z2).all()


# ------------------------------------------------------------------ brain age

def _age_volumes(n, seed):
    r = np.random.default_rng(seed)
    ages = r.uniform(5, 37, size=n)
    vols = np.zeros((n, 8, 8, 8), dtype=np.float32)
    vols[:, 2:6, 2:6, 2:6] = ((ages - 5) / 32)[:, None, None, None]
    return vols + 0.01 * r.normal(size=vols.shape).astype(np.float32), ages


class TestBrainAge:
    def test_learns_age_signal_deterministically(self):
        vols, ages = _age_volumes(48, 0)
        cfg = BrainAgeConfig(widths=(4, 8), epochs=15, batch_size=8, lr=3e-3, holdout=8)
        m1 = train_brain_age(vols, ages, cfg, seed=1)
        m2 = train_brain_age(vols, ages, cfg, seed=1)
        mae = [h["val_mae"] for h in m1.history]
        assert mae[-1] < mae[0]
        np.testing.assert_array_equal(m1.predict(vols[:3]), m2.predict(vols[:3]))
        assert brain_age_proxy(m1, vols[0], ages[0]) == pytest.approx(abs(m1.predict(vols[:1])[0] - ages[0]))

    def test_empty(self):
        with pytest.raises(ContractError):
            train_brain_age(np.zeros((0, 8, 8, 8)), np.zeros(0), BrainAgeConfig(widths=(2,), epochs=1))
