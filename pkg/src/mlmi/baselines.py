"""Ad-hoc single-level and fixed-effect conditional imputation methods.

These plug into the chained-equations driver alongside the dedicated
conditionals: Bayesian regression ignoring clusters, regression with fixed
cluster effects (with and without predictive mean matching), and a
heteroscedastic random-effects conditional that imputes sporadic and
systematic clusters in two phases.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import BINARY, Dataset
from .fcs import ConditionalDraw, _empty_draw, _observed_clusters, \
    _draw_psi_from_blups
from .lmm import DesignSpec, FitError, build_design, fit_lmm_arrays
from .rng import RngStream, invgamma_sample, mvn_sample

__all__ = ["DonorPool", "cond_norm_noclust", "cond_norm_fixclust",
           "cond_pmm_fixclust", "cond_2lnorm"]

_PSI_RIDGE = 1e-8


@dataclass
class DonorPool:
    """Candidate donors for one missing cell under predictive mean matching."""

    candidates: np.ndarray       # indices into the observed rows
    predicted_means: np.ndarray  # their predicted values
    pool_size: int


def _fixed_design(d: Dataset, target: int, values: np.ndarray) -> np.ndarray:
    others = tuple(j for j in range(d.p) if j != target)
    Z, _ = build_design(values, DesignSpec(fixed_cols=others, random_cols=(),
                                           include_intercept=True))
    return Z


def _ols_posterior_draw(y, Z, gen):
    """Conjugate draws (sigma2, beta) from a flat-prior normal regression."""
    n, p = Z.shape
    if n < p + 2:
        raise FitError(f"need at least {p + 2} observed rows, got {n}")
    if np.linalg.matrix_rank(Z) < p:
        raise FitError("rank-deficient imputation design")
    ZtZ_inv = np.linalg.inv(Z.T @ Z)
    beta_hat = ZtZ_inv @ (Z.T @ y)
    resid = y - Z @ beta_hat
    df = n - p
    rss = float(resid @ resid)
    sigma2 = float(invgamma_sample(df / 2.0, max(rss, 1e-12) / 2.0, gen))
    beta = mvn_sample(beta_hat, sigma2 * ZtZ_inv, gen)
    return sigma2, beta, beta_hat


def _logit_posterior_draw(y, Z, gen):
    from .glmm import _plain_logistic

    n, p = Z.shape
    if np.linalg.matrix_rank(Z) < p:
        raise FitError("rank-deficient imputation design")
    if np.unique(y).size < 2:
        raise FitError("single outcome level on the target")
    beta_hat = _plain_logistic(y, Z)
    if np.linalg.norm(beta_hat) > 1e3:
        raise FitError("separation in logistic imputation model")
    mu = expit(Z @ beta_hat)
    w = np.clip(mu * (1 - mu), 1e-10, None)
    info = (Z * w[:, None]).T @ Z
    beta = mvn_sample(beta_hat, np.linalg.inv(info), gen)
    return beta


def cond_norm_noclust(d: Dataset, target: int, values: np.ndarray,
                      rng: RngStream) -> ConditionalDraw:
    """Single-level Bayesian regression: clusters ignored entirely."""
    miss = ~d.mask[:, target]
    if not miss.any():
        return _empty_draw(d)
    obs = d.mask[:, target]
    Z = _fixed_design(d, target, values)
    gen = rng.generator
    if d.var_types[target] == BINARY:
        beta = _logit_posterior_draw(values[obs, target], Z[obs], gen)
        prob = expit(Z[miss] @ beta)
        imputations = (gen.uniform(size=prob.shape) < prob).astype(float)
        theta = {"beta": beta}
    else:
        sigma2, beta, _ = _ols_posterior_draw(values[obs, target], Z[obs], gen)
        imputations = Z[miss] @ beta + np.sqrt(sigma2) * gen.standard_normal(int(miss.sum()))
        theta = {"beta": beta, "sigma2": sigma2}
    return ConditionalDraw(theta=theta, b_draw=np.zeros((d.n_clusters, 0)),
                           imputations=imputations)


def _dummy_design(d: Dataset, target: int, values: np.ndarray):
    """Covariates plus one indicator per cluster observed on the target.

    Rows in clusters with no observed target value get the average dummy
    (1/C each), so their prediction uses the mean of the cluster effects:
    the observed average across the remaining clusters.
    """
    others = tuple(j for j in range(d.p) if j != target)
    X = values[:, list(others)]
    obs_clusters = np.flatnonzero(_observed_clusters(d, target))
    C = obs_clusters.size
    if C < 2:
        raise FitError("need at least 2 clusters observed on the target")
    D = np.zeros((d.n, C))
    col_of = {int(k): i for i, k in enumerate(obs_clusters)}
    for i in range(d.n):
        c = col_of.get(int(d.cluster[i]))
        if c is None:
            D[i] = 1.0 / C
        else:
            D[i, c] = 1.0
    return np.hstack([X, D])


def cond_norm_fixclust(d: Dataset, target: int, values: np.ndarray,
                       rng: RngStream) -> ConditionalDraw:
    """Bayesian regression with fixed cluster intercepts (dummy coding)."""
    miss = ~d.mask[:, target]
    if not miss.any():
        return _empty_draw(d)
    obs = d.mask[:, target]
    Z = _dummy_design(d, target, values)
    gen = rng.generator
    if d.var_types[target] == BINARY:
        beta = _logit_posterior_draw(values[obs, target], Z[obs], gen)
        prob = expit(Z[miss] @ beta)
        imputations = (gen.uniform(size=prob.shape) < prob).astype(float)
        theta = {"beta": beta}
    else:
        sigma2, beta, _ = _ols_posterior_draw(values[obs, target], Z[obs], gen)
        imputations = Z[miss] @ beta + np.sqrt(sigma2) * gen.standard_normal(int(miss.sum()))
        theta = {"beta": beta, "sigma2": sigma2}
    return ConditionalDraw(theta=theta, b_draw=np.zeros((d.n_clusters, 0)),
                           imputations=imputations)


def cond_pmm_fixclust(d: Dataset, target: int, values: np.ndarray,
                      rng: RngStream, pool_size: int = 5) -> ConditionalDraw:
    """Predictive mean matching on the fixed-cluster-effect predictor.

    Type-1 matching: observed rows are scored with the least-squares
    estimate, missing rows with a fresh parameter draw; each missing cell
    copies the target value of a donor drawn uniformly from the pool_size
    observed rows with the closest scores.
    """
    miss = ~d.mask[:, target]
    if not miss.any():
        return _empty_draw(d)
    obs = d.mask[:, target]
    if int(obs.sum()) < pool_size:
        raise FitError(f"need at least pool_size={pool_size} observed rows")
    Z = _dummy_design(d, target, values)
    gen = rng.generator
    _, beta_draw, beta_hat = _ols_posterior_draw(values[obs, target], Z[obs], gen)
    donors_y = values[obs, target]
    score_obs = Z[obs] @ beta_hat
    score_mis = Z[miss] @ beta_draw
    order = np.argsort(np.abs(score_obs[None, :] - score_mis[:, None]), axis=1)
    pools = order[:, :pool_size]
    pick = gen.integers(0, pool_size, size=pools.shape[0])
    imputations = donors_y[pools[np.arange(pools.shape[0]), pick]]
    theta = {"beta": beta_draw, "pool_size": pool_size}
    return ConditionalDraw(theta=theta, b_draw=np.zeros((d.n_clusters, 0)),
                           imputations=imputations)


def cond_2lnorm(d: Dataset, target: int, values: np.ndarray,
                rng: RngStream) -> ConditionalDraw:
    """Heteroscedastic random-effects conditional in two phases.

    A mixed model with cluster-specific residual variances is fitted on
    clusters that observe the target; sporadic clusters are imputed with
    their conditional random effects and own residual SD draws, systematic
    clusters with marginal effects and an SD borrowed uniformly from the
    fitted clusters. Binary targets are treated as continuous, without any
    rounding.
    """
    miss = ~d.mask[:, target]
    if not miss.any():
        return _empty_draw(d)
    obs = d.mask[:, target]
    obs_clusters = _observed_clusters(d, target)
    if obs_clusters.sum() < 2:
        raise FitError("need at least 2 clusters observed on the target")
    others = tuple(j for j in range(d.p) if j != target)
    design = DesignSpec(fixed_cols=others, random_cols=others,
                        include_intercept=True)
    Z, W = build_design(values, design)
    gen = rng.generator
    fit = fit_lmm_arrays(values[obs, target], Z[obs], W[obs], d.cluster[obs],
                         criterion="REML")
    if not fit.converged:
        raise FitError("mixed-model fit did not converge")
    beta = mvn_sample(fit.beta, fit.var_beta, gen)
    psi = _draw_psi_from_blups(fit.blups, int(obs_clusters.sum()), gen)
    q = psi.shape[0]
    psi_inv = np.linalg.inv(psi + _PSI_RIDGE * np.eye(q))

    # per-cluster residual variance draws around the BLUP-based residuals
    fitted_ids = list(fit.clusters_used)
    blup_of = {k: fit.blups[i] for i, k in enumerate(fitted_ids)}
    sigma2_draws = {}
    p_fix = fit.beta.size
    for k in fitted_ids:
        rows = obs & (d.cluster == k)
        resid = values[rows, target] - Z[rows] @ fit.beta - W[rows] @ blup_of[k]
        df_k = max(int(rows.sum()) - 1, 1)
        rss = max(float(resid @ resid), 1e-12)
        sigma2_draws[k] = float(invgamma_sample(df_k / 2.0, rss / 2.0, gen))

    b_draw = np.zeros((d.n_clusters, q))
    sigma2_k = np.zeros(d.n_clusters)
    pool = np.array([sigma2_draws[k] for k in fitted_ids])
    for k in range(d.n_clusters):
        if k in sigma2_draws:
            sigma2_k[k] = sigma2_draws[k]
            rows = obs & (d.cluster == k)
            Wk = W[rows]
            prec = psi_inv + (Wk.T @ Wk) / sigma2_k[k]
            cov = np.linalg.inv(prec)
            resid = values[rows, target] - Z[rows] @ beta
            b_draw[k] = mvn_sample(cov @ (Wk.T @ resid) / sigma2_k[k], cov, gen)
        else:
            sigma2_k[k] = pool[gen.integers(0, pool.size)]
            b_draw[k] = mvn_sample(np.zeros(q), psi, gen)
    mean = Z[miss] @ beta + np.einsum("ij,ij->i", W[miss], b_draw[d.cluster[miss]])
    imputations = mean + np.sqrt(sigma2_k[d.cluster[miss]]) \
        * gen.standard_normal(int(miss.sum()))
    theta = {"beta": beta, "psi": psi, "sigma2_k": sigma2_k,
             "p_fixed": p_fix}
    return ConditionalDraw(theta=theta, b_draw=b_draw, imputations=imputations)
