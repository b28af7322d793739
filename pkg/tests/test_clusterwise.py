"""Per-cluster least-squares and logistic fits against direct solutions."""
import numpy as np
from scipy import optimize
from scipy.special import expit

from mlmi.clusterwise import (STATUS_DEGENERATE, STATUS_OK,
                              STATUS_RANK_DEFICIENT, STATUS_SEPARATED,
                              cluster_logit, cluster_ols)


def test_ols_matches_normal_equations():
    rng = np.random.default_rng(0)
    Z = np.column_stack([np.ones(30), rng.standard_normal((30, 2))])
    y = Z @ np.array([1.0, -2.0, 0.5]) + rng.normal(0, 0.3, 30)
    fit = cluster_ols(y, Z, cluster=4)
    beta_ref = np.linalg.solve(Z.T @ Z, Z.T @ y)
    assert np.allclose(fit.beta_k, beta_ref, atol=1e-10)
    resid = y - Z @ beta_ref
    sigma2 = resid @ resid / (30 - 3)
    assert abs(fit.sigma_k - np.sqrt(sigma2)) < 1e-10
    assert np.allclose(fit.var_beta_k, sigma2 * np.linalg.inv(Z.T @ Z), atol=1e-10)
    assert fit.status == STATUS_OK and fit.df_k == 27 and fit.cluster == 4


def test_ols_degenerate_and_rank_deficient():
    Z = np.column_stack([np.ones(5), np.arange(5.0)])
    y = 2.0 + 3.0 * np.arange(5.0)  # exact fit
    assert cluster_ols(y, Z).status == STATUS_DEGENERATE
    Zdup = np.column_stack([Z, Z[:, 1]])
    assert cluster_ols(y, Zdup).status == STATUS_RANK_DEFICIENT
    # no residual degrees of freedom
    assert cluster_ols(y[:2], Z[:2]).status == STATUS_RANK_DEFICIENT


def test_logit_matches_direct_ml():
    rng = np.random.default_rng(1)
    Z = np.column_stack([np.ones(200), rng.standard_normal(200)])
    beta_true = np.array([0.3, -1.2])
    y = (rng.random(200) < expit(Z @ beta_true)).astype(float)
    fit = cluster_logit(y, Z)
    assert fit.status == STATUS_OK

    def nll(beta):
        eta = Z @ beta
        return -(y @ eta - np.logaddexp(0.0, eta).sum())

    ref = optimize.minimize(nll, np.zeros(2), method="BFGS")
    assert np.allclose(fit.beta_k, ref.x, atol=1e-5)
    # variance from the inverse observed information
    mu = expit(Z @ fit.beta_k)
    info = (Z * (mu * (1 - mu))[:, None]).T @ Z
    assert np.allclose(fit.var_beta_k, np.linalg.inv(info), atol=1e-8)


def test_logit_separation_detected():
    Z = np.column_stack([np.ones(10), np.arange(10.0) - 4.5])
    y = (np.arange(10) >= 5).astype(float)  # perfectly separated
    fit = cluster_logit(y, Z)
    assert fit.status == STATUS_SEPARATED


def test_logit_single_level_flagged():
    Z = np.ones((8, 1))
    assert cluster_logit(np.zeros(8), Z).status == STATUS_SEPARATED


def test_firth_handles_separation_with_finite_estimate():
    Z = np.column_stack([np.ones(10), np.arange(10.0) - 4.5])
    y = (np.arange(10) >= 5).astype(float)
    fit = cluster_logit(y, Z, firth=True)
    assert np.isfinite(fit.beta_k).all()
    assert np.linalg.norm(fit.beta_k) < 1e3


def test_firth_intercept_only_oracle():
    # Firth = Jeffreys prior: intercept-only mode is logit((s+0.5)/(n+1) ...)
    # derived from the adjusted score sum(y - mu + h(0.5 - mu)) = 0 with
    # h = 1/n per observation: mu = (s + 0.5) / (n + 1)
    y = np.array([1.0, 0.0, 0.0, 0.0])
    fit = cluster_logit(y, np.ones((4, 1)), firth=True)
    expected = np.log((1 + 0.5) / (4 + 1 - 1 - 0.5))
    assert abs(fit.beta_k[0] - expected) < 1e-6


def test_logit_rank_deficient():
    Z = np.column_stack([np.ones(6), np.ones(6)])
    y = np.array([0, 1, 0, 1, 0, 1.0])
    assert cluster_logit(y, Z).status == STATUS_RANK_DEFICIENT
