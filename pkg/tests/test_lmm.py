"""Linear mixed model fitter against closed-form one-way ANOVA results.

For a balanced random-intercept model the REML estimates have exact
moment-form solutions (psi = (MSB - MSW) / n_k, sigma2 = MSW, beta = grand
mean), which gives an independent oracle for the numerical optimizer.
"""
import numpy as np
import pytest

from mlmi.data import CONTINUOUS, Dataset
from mlmi.lmm import (DesignSpec, FitError, build_design, fit_lmm,
                      fit_lmm_arrays)


def balanced_one_way(seed=0, K=12, n_k=8, psi=2.0, sigma2=0.5, beta=3.0):
    rng = np.random.default_rng(seed)
    b = rng.normal(0.0, np.sqrt(psi), K)
    cluster = np.repeat(np.arange(K), n_k)
    y = beta + b[cluster] + rng.normal(0.0, np.sqrt(sigma2), K * n_k)
    return y, cluster, K, n_k


def anova_oracle(y, cluster, K, n_k):
    means = np.array([y[cluster == k].mean() for k in range(K)])
    grand = y.mean()
    msb = n_k * ((means - grand) ** 2).sum() / (K - 1)
    msw = sum(((y[cluster == k] - means[k]) ** 2).sum() for k in range(K)) / (K * (n_k - 1))
    return grand, (msb - msw) / n_k, msw, msb


def test_balanced_anova_oracle():
    y, cluster, K, n_k = balanced_one_way()
    grand, psi_hat, sigma2_hat, msb = anova_oracle(y, cluster, K, n_k)
    n = y.size
    Z = np.ones((n, 1))
    fit = fit_lmm_arrays(y, Z, Z, cluster, criterion="REML")
    assert fit.converged
    assert abs(fit.beta[0] - grand) < 1e-6
    assert abs(fit.sigma2 - sigma2_hat) < 1e-6
    assert abs(fit.psi[0, 0] - psi_hat) < 1e-6
    # balanced case: Var(beta) = MSB / (K n_k)
    assert abs(fit.var_beta[0, 0] - msb / n) < 1e-6


def test_blup_shrinkage_oracle():
    y, cluster, K, n_k = balanced_one_way(seed=3)
    grand, psi_hat, sigma2_hat, _ = anova_oracle(y, cluster, K, n_k)
    Z = np.ones((y.size, 1))
    fit = fit_lmm_arrays(y, Z, Z, cluster, criterion="REML")
    gain = n_k * psi_hat / (sigma2_hat + n_k * psi_hat)
    means = np.array([y[cluster == k].mean() for k in range(K)])
    expected = gain * (means - fit.beta[0])
    assert np.allclose(fit.blups[:, 0], expected, atol=1e-5)


def test_single_cluster_intercept_only():
    rng = np.random.default_rng(1)
    y = rng.normal(2.0, 1.0, 40)
    Z = np.ones((40, 1))
    fit = fit_lmm_arrays(y, Z, Z, np.zeros(40, dtype=int), criterion="ML")
    # the cluster mean is absorbed by the intercept, so psi collapses and
    # sigma2 is the plain ML variance
    assert abs(fit.beta[0] - y.mean()) < 1e-6
    assert abs(fit.sigma2 + fit.psi[0, 0] - np.var(y)) < 1e-4
    assert fit.psi[0, 0] < 1e-4


def test_fixed_slope_recovery():
    rng = np.random.default_rng(7)
    K, n_k = 20, 15
    cluster = np.repeat(np.arange(K), n_k)
    x = rng.standard_normal(K * n_k)
    b = rng.normal(0.0, 0.7, K)
    y = 1.0 + 2.0 * x + b[cluster] + rng.normal(0.0, 0.3, K * n_k)
    Z = np.column_stack([np.ones_like(x), x])
    W = np.ones((x.size, 1))
    fit = fit_lmm_arrays(y, Z, W, cluster)
    assert abs(fit.beta[1] - 2.0) < 3 * np.sqrt(fit.var_beta[1, 1])
    assert abs(fit.beta[0] - 1.0) < 3 * np.sqrt(fit.var_beta[0, 0])
    assert 0.05 < fit.sigma2 < 0.2
    assert 0.2 < fit.psi[0, 0] < 1.2


def test_ml_vs_reml_variance_ordering():
    y, cluster, K, n_k = balanced_one_way(seed=9, K=6, n_k=4)
    Z = np.ones((y.size, 1))
    reml = fit_lmm_arrays(y, Z, Z, cluster, criterion="REML")
    ml = fit_lmm_arrays(y, Z, Z, cluster, criterion="ML")
    # ML shrinks the between-cluster variance relative to REML
    assert ml.psi[0, 0] < reml.psi[0, 0] + 1e-10


def test_build_design_layout():
    values = np.arange(12.0).reshape(4, 3)
    spec = DesignSpec(fixed_cols=(2, 0), random_cols=(1,), include_intercept=True)
    Z, W = build_design(values, spec)
    assert Z.shape == (4, 3) and W.shape == (4, 2)
    assert np.array_equal(Z[:, 0], np.ones(4))
    assert np.array_equal(Z[:, 1], values[:, 2])
    assert np.array_equal(Z[:, 2], values[:, 0])
    assert np.array_equal(W[:, 1], values[:, 1])


def test_fit_lmm_uses_target_mask_and_override_values():
    rng = np.random.default_rng(11)
    n = 60
    cluster = np.repeat(np.arange(6), 10)
    x = rng.standard_normal(n)
    y = 0.5 + 1.5 * x + rng.normal(0, 0.1, n)
    values = np.column_stack([y, x])
    mask = np.ones_like(values, dtype=bool)
    mask[:10, 0] = False
    values_nan = values.copy()
    values_nan[:10, 0] = np.nan
    d = Dataset(values_nan, mask, cluster, (CONTINUOUS, CONTINUOUS), ("y", "x"))
    spec = DesignSpec(fixed_cols=(1,), random_cols=(), include_intercept=True)
    fit = fit_lmm(d, 0, spec)
    assert fit.n_obs == 50
    # corrupting the masked-out target rows in the override must not matter
    completed = values.copy()
    completed[:10, 0] = 999.0
    fit2 = fit_lmm(d, 0, spec, values=completed)
    assert np.allclose(fit.beta, fit2.beta)


def test_error_conditions():
    y = np.arange(4.0)
    Z = np.column_stack([np.ones(4), np.ones(4)])  # rank deficient
    with pytest.raises(FitError):
        fit_lmm_arrays(y, Z, np.ones((4, 1)), np.zeros(4, dtype=int))
    with pytest.raises(FitError):
        fit_lmm_arrays(y[:1], np.ones((1, 1)), np.ones((1, 1)), np.zeros(1, dtype=int))
    with pytest.raises(FitError):
        fit_lmm_arrays(y, np.ones((4, 1)), np.ones((4, 1)), np.zeros(4, dtype=int),
                       criterion="FIML")
