"""Random-intercept comparator: component recovery, GLS arithmetic against
a direct blockwise solve, and the fallback behavior."""

import numpy as np
import pytest

from pwrd import DegenerateDataError, NumericalError, fit_random_intercept
from pwrd.mixed import VarianceComponents
from pwrd.panel import PanelDataset


def intercept_panel(C=40, m=8, tau=0.0, sigma2_eps=4.0, sigma2_mu=1.0, seed=0, grades=False):
    rng = np.random.default_rng(seed)
    n = C * m
    cluster = np.repeat(np.arange(C), m)
    z = (rng.permutation(C) < C // 2).astype(int)
    treatment = z[cluster]
    mu = rng.normal(scale=np.sqrt(sigma2_mu), size=C)
    y = mu[cluster] + rng.normal(scale=np.sqrt(sigma2_eps), size=n) + tau * treatment
    grade = np.tile(np.arange(m) % 3 + 3, C) if grades else np.full(n, 3)
    year = np.tile(np.arange(m) % 3 + 1, C) if grades else np.ones(n, dtype=int)
    return PanelDataset(
        unit=np.arange(n),
        cluster=cluster,
        treatment=treatment,
        cohort=np.ones(n, dtype=int),
        grade=grade,
        year=year,
        outcome=y,
        validate=False,
    )


def test_moment_components_recover_truth_at_scale():
    p = intercept_panel(C=400, m=20, sigma2_eps=4.0, sigma2_mu=1.0, seed=3)
    fit = fit_random_intercept(p, covariates=())
    assert fit.components.sigma2_eps == pytest.approx(4.0, rel=0.1)
    assert fit.components.sigma2_mu == pytest.approx(1.0, rel=0.25)
    assert fit.components.icc == pytest.approx(0.2, abs=0.04)
    assert fit.warnings == ()


def test_treatment_effect_recovered():
    p = intercept_panel(C=200, m=10, tau=2.0, seed=7)
    fit = fit_random_intercept(p, covariates=())
    assert fit.tau_hat == pytest.approx(2.0, abs=4 * fit.se_cluster_robust)
    assert fit.p_value("greater") < 1e-6
    assert fit.df == 198.0
    assert fit.n_clusters == 200


def test_gls_coefficients_match_direct_blockwise_solve():
    # independent route: build the implied covariance cluster by cluster
    # and solve the generalized normal equations explicitly
    p = intercept_panel(C=12, m=5, tau=1.0, seed=11, grades=True)
    fit = fit_random_intercept(p, covariates=("grade",))
    s2e, s2u = fit.components.sigma2_eps, fit.components.sigma2_mu
    X = np.column_stack([np.ones(p.n_obs), p.treatment.astype(float), p.grade.astype(float)])
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for c in range(12):
        rows = p.cluster == c
        Xc = X[rows]
        Vc = s2e * np.eye(rows.sum()) + s2u * np.ones((rows.sum(), rows.sum()))
        Vinv = np.linalg.inv(Vc)
        A += Xc.T @ Vinv @ Xc
        b += Xc.T @ Vinv @ p.outcome[rows]
    beta = np.linalg.solve(A, b)
    assert fit.tau_hat == pytest.approx(beta[1], rel=1e-10)
    assert fit.coefficients["grade"] == pytest.approx(beta[2], rel=1e-10)


def test_singleton_clusters_collapse_to_ols_with_warning():
    p = intercept_panel(C=30, m=1, seed=2)
    fit = fit_random_intercept(p, covariates=())
    assert fit.components.sigma2_mu == 0.0
    assert any("fell back" in w for w in fit.warnings)
    beta, *_ = np.linalg.lstsq(
        np.column_stack([np.ones(p.n_obs), p.treatment.astype(float)]), p.outcome, rcond=None
    )
    assert fit.tau_hat == pytest.approx(beta[1], rel=1e-10)


def test_two_clusters_fit_but_refuse_to_test():
    p = intercept_panel(C=2, m=6, seed=5)
    fit = fit_random_intercept(p, covariates=())
    assert fit.df == 0.0
    with pytest.raises(DegenerateDataError, match="df"):
        fit.p_value()


def test_pvalue_alternatives():
    p = intercept_panel(C=60, m=4, tau=1.0, seed=9)
    fit = fit_random_intercept(p, covariates=())
    g = fit.p_value("greater")
    two = fit.p_value("two-sided")
    assert two == pytest.approx(2 * min(g, 1 - g), rel=1e-12)
    with pytest.raises(ValueError, match="alternative"):
        fit.p_value("less-ish")


def test_implied_treated_weights_sum_to_one():
    p = intercept_panel(C=50, m=6, seed=13, grades=True)
    fit = fit_random_intercept(p, covariates=("grade",))
    assert fit.implied_group_weights.sum() == pytest.approx(1.0, abs=1e-10)


def test_input_validation():
    p = intercept_panel(C=20, m=3, seed=1)
    with pytest.raises(ValueError, match="variant"):
        fit_random_intercept(p, covariates=(), variant="cr9")
    # constant grade column is collinear with the intercept
    with pytest.raises(NumericalError, match="rank-deficient"):
        fit_random_intercept(p, covariates=("grade",))
    with pytest.raises(DegenerateDataError, match="at least 2"):
        fit_random_intercept(intercept_panel(C=1, m=8), covariates=())


def test_components_dataclass_validates():
    with pytest.raises(ValueError, match="nonnegative"):
        VarianceComponents(sigma2_eps=-1.0, sigma2_mu=0.0, icc=0.0)
    with pytest.raises(ValueError, match="inconsistent"):
        VarianceComponents(sigma2_eps=3.0, sigma2_mu=1.0, icc=0.5)
    ok = VarianceComponents(sigma2_eps=3.0, sigma2_mu=1.0, icc=0.25)
    assert ok.icc == 0.25
