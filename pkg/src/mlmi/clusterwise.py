"""Stage-one estimators: per-cluster least squares and logistic fits."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .glmm import logistic_loglik

__all__ = ["ClusterFit", "cluster_ols", "cluster_logit"]

STATUS_OK = "ok"
STATUS_SEPARATED = "separated"
STATUS_RANK_DEFICIENT = "rank_deficient"
STATUS_DEGENERATE = "degenerate"  # exact fit, sigma_k = 0

_SEPARATION_NORM = 1e3


@dataclass
class ClusterFit:
    beta_k: np.ndarray
    var_beta_k: np.ndarray
    sigma_k: float
    df_k: int
    status: str
    cluster: int = -1


def cluster_ols(y, Z, cluster: int = -1) -> ClusterFit:
    """Per-cluster OLS: beta = (Z'Z)^-1 Z'y, sigma from residuals.

    Returns rank_deficient when Z'Z is singular or no residual degrees of
    freedom remain; degenerate when the fit is exact (sigma = 0).
    """
    y = np.asarray(y, dtype=float)
    Z = np.asarray(Z, dtype=float)
    n, q = Z.shape
    df = n - q
    ZtZ = Z.T @ Z
    if df < 1 or np.linalg.matrix_rank(Z) < q:
        return ClusterFit(np.full(q, np.nan), np.full((q, q), np.nan),
                          np.nan, max(df, 0), STATUS_RANK_DEFICIENT, cluster)
    ZtZ_inv = np.linalg.inv(ZtZ)
    beta = ZtZ_inv @ (Z.T @ y)
    resid = y - Z @ beta
    rss = float(resid @ resid)
    sigma2 = rss / df
    sigma = np.sqrt(sigma2)
    status = STATUS_DEGENERATE if sigma2 <= 1e-12 * max(float(y @ y), 1.0) else STATUS_OK
    return ClusterFit(beta, sigma2 * ZtZ_inv, sigma, df, status, cluster)


def cluster_logit(y, Z, cluster: int = -1, firth: bool = False,
                  max_iter: int = 100) -> ClusterFit:
    """Per-cluster logistic ML (Newton); optional Firth penalty.

    Separation is flagged when the coefficient norm diverges while the
    likelihood keeps improving.
    """
    y = np.asarray(y, dtype=float)
    Z = np.asarray(Z, dtype=float)
    n, q = Z.shape
    if np.linalg.matrix_rank(Z) < q:
        return ClusterFit(np.full(q, np.nan), np.full((q, q), np.nan),
                          np.nan, n - q, STATUS_RANK_DEFICIENT, cluster)
    levels = np.unique(y)
    if levels.size < 2 and not firth:
        return ClusterFit(np.full(q, np.nan), np.full((q, q), np.nan),
                          np.nan, n - q, STATUS_SEPARATED, cluster)
    beta = np.zeros(q)
    status = STATUS_OK
    for _ in range(max_iter):
        eta = Z @ beta
        mu = expit(eta)
        w = np.clip(mu * (1 - mu), 1e-12, None)
        H = (Z * w[:, None]).T @ Z
        score = Z.T @ (y - mu)
        if firth:
            # Firth adjusted score: add hat-value correction h_i (1/2 - mu_i)
            try:
                H_inv = np.linalg.inv(H)
            except np.linalg.LinAlgError:
                return ClusterFit(beta, np.full((q, q), np.nan), np.nan,
                                  n - q, STATUS_RANK_DEFICIENT, cluster)
            h = np.einsum("ij,jk,ik->i", Z * w[:, None], H_inv, Z)
            score = Z.T @ (y - mu + h * (0.5 - mu))
        try:
            step = np.linalg.solve(H, score)
        except np.linalg.LinAlgError:
            return ClusterFit(beta, np.full((q, q), np.nan), np.nan,
                              n - q, STATUS_RANK_DEFICIENT, cluster)
        beta = beta + step
        if np.linalg.norm(beta) > _SEPARATION_NORM:
            status = STATUS_SEPARATED
            break
        if np.abs(step).max() < 1e-10:
            break
    eta = Z @ beta
    mu = expit(eta)
    # Newton can stall on separated data with a finite beta once the
    # weights underflow; perfect classification is the reliable signature
    if status == STATUS_OK and not firth:
        if np.all(np.abs(y - mu) < 1e-4):
            status = STATUS_SEPARATED
    w = np.clip(mu * (1 - mu), 1e-12, None)
    info = (Z * w[:, None]).T @ Z
    try:
        var_beta = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        var_beta = np.full((q, q), np.nan)
        status = STATUS_SEPARATED if status == STATUS_OK else status
    fit = ClusterFit(beta, var_beta, np.nan, n - q, status, cluster)
    fit.loglik = logistic_loglik(y, eta)  # type: ignore[attr-defined]
    return fit
