"""Univariate linear mixed model estimation (ML / REML) with BLUPs.

The model is y_k = Z_k beta + W_k b_k + eps_k per cluster, with
b_k ~ N(0, Psi) and homoscedastic eps_k ~ N(0, sigma2 I). The deviance is
profiled over beta and sigma2 and minimized over the Cholesky factor of
Psi / sigma2, so each objective evaluation costs O(K q'^3) on per-cluster
sufficient statistics.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

__all__ = ["DesignSpec", "LmmFit", "build_design", "fit_lmm", "fit_lmm_arrays"]


class FitError(ValueError):
    """Unusable design or data for a model fit."""


@dataclass(frozen=True)
class DesignSpec:
    """Columns entering the fixed (Z) and random (W) design matrices.

    Indices refer to Dataset columns; an intercept column of ones is
    prepended to both parts when include_intercept is set.
    """

    fixed_cols: tuple[int, ...]
    random_cols: tuple[int, ...] = ()
    include_intercept: bool = True


@dataclass
class LmmFit:
    beta: np.ndarray
    var_beta: np.ndarray
    psi: np.ndarray
    sigma2: float
    blups: np.ndarray  # (K, q')
    converged: bool
    loglik: float
    n_obs: int = 0
    clusters_used: tuple[int, ...] = field(default_factory=tuple)


def build_design(values: np.ndarray, design: DesignSpec) -> tuple[np.ndarray, np.ndarray]:
    """Materialize (Z, W) from a complete value matrix."""
    n = values.shape[0]
    cols = [values[:, list(design.fixed_cols)]] if design.fixed_cols else []
    if design.include_intercept:
        cols.insert(0, np.ones((n, 1)))
    Z = np.hstack(cols) if cols else np.ones((n, 1))
    rcols = [values[:, list(design.random_cols)]] if design.random_cols else []
    if design.include_intercept:
        rcols.insert(0, np.ones((n, 1)))
    W = np.hstack(rcols) if rcols else np.ones((n, 1))
    return Z, W


def _tril_assemble(theta: np.ndarray, q: int) -> np.ndarray:
    L = np.zeros((q, q))
    L[np.tril_indices(q)] = theta
    return L


class _Profile:
    """Profiled (restricted) deviance on per-cluster sufficient statistics."""

    def __init__(self, y, Z, W, cluster, criterion):
        self.q = Z.shape[1]
        self.qr = W.shape[1]
        self.n = y.shape[0]
        self.criterion = criterion
        ids = np.unique(cluster)
        self.cluster_ids = ids
        K = ids.size
        self.ZtZ = Z.T @ Z
        self.Zty = Z.T @ y
        self.yty = float(y @ y)
        # per-cluster sufficient statistics, stacked for batched algebra
        self.A = np.empty((K, self.qr, self.qr))
        self.B = np.empty((K, self.qr, self.q))
        self.c = np.empty((K, self.qr))
        for i, k in enumerate(ids):
            sel = cluster == k
            Wk, Zk, yk = W[sel], Z[sel], y[sel]
            self.A[i] = Wk.T @ Wk
            self.B[i] = Wk.T @ Zk
            self.c[i] = Wk.T @ yk

    def components(self, theta):
        """Returns (logdet_sum, S_zz, S_zy, S_yy, (D, batched Q inverses))."""
        D = _tril_assemble(theta, self.qr)
        Q = np.eye(self.qr) + np.einsum("ji,kjl,lm->kim", D, self.A, D)
        signs, logdets = np.linalg.slogdet(Q)
        if (signs <= 0).any():
            return None
        try:
            Qi = np.linalg.inv(Q)
        except np.linalg.LinAlgError:
            return None
        DB = np.einsum("ji,kjl->kil", D, self.B)
        Dc = np.einsum("ji,kj->ki", D, self.c)
        M = np.einsum("kij,kjl->kil", Qi, DB)
        QiDc = np.einsum("kij,kj->ki", Qi, Dc)
        S_zz = self.ZtZ - np.einsum("kij,kil->jl", DB, M)
        S_zy = self.Zty - np.einsum("kij,ki->j", DB, QiDc)
        S_yy = self.yty - float(np.einsum("ki,ki->", Dc, QiDc))
        return float(logdets.sum()), S_zz, S_zy, S_yy, (D, Qi)

    def deviance(self, theta) -> float:
        comp = self.components(theta)
        if comp is None:
            return np.inf
        logdet, S_zz, S_zy, S_yy, _ = comp
        try:
            beta = np.linalg.solve(S_zz, S_zy)
        except np.linalg.LinAlgError:
            return np.inf
        r = S_yy - float(S_zy @ beta)
        if r <= 0:
            r = 1e-12
        if self.criterion == "REML":
            dfree = self.n - self.q
            sign, ld_zz = np.linalg.slogdet(S_zz)
            if sign <= 0:
                return np.inf
            return logdet + ld_zz + dfree * (1.0 + np.log(2 * np.pi * r / dfree))
        return logdet + self.n * (1.0 + np.log(2 * np.pi * r / self.n))

    def extract(self, theta) -> dict:
        logdet, S_zz, S_zy, S_yy, pieces = self.components(theta)
        beta = np.linalg.solve(S_zz, S_zy)
        r = max(S_yy - float(S_zy @ beta), 0.0)
        dfree = self.n - self.q if self.criterion == "REML" else self.n
        sigma2 = r / dfree if dfree > 0 else 0.0
        D, Qi = pieces
        psi = sigma2 * (D @ D.T)
        var_beta = sigma2 * np.linalg.inv(S_zz)
        resid = self.c - np.einsum("kij,j->ki", self.B, beta)
        inner = np.einsum("kij,kj->ki", Qi, np.einsum("ji,kj->ki", D, resid))
        blups = np.einsum("ij,kj->ki", D, inner)
        return {
            "beta": beta,
            "var_beta": var_beta,
            "psi": psi,
            "sigma2": sigma2,
            "blups": blups,
            "loglik": -0.5 * self.deviance(theta),
        }


def fit_lmm_arrays(y, Z, W, cluster, criterion: str = "REML",
                   max_iter: int = 200) -> LmmFit:
    """Fit the mixed model from raw arrays.

    cluster holds integer ids; only rows passed in participate (callers
    subset to rows observed on the target beforehand).
    """
    if criterion not in ("ML", "REML"):
        raise FitError(f"unknown criterion {criterion!r}")
    y = np.asarray(y, dtype=float)
    Z = np.asarray(Z, dtype=float)
    W = np.asarray(W, dtype=float)
    n, q = Z.shape
    if n < q + 1:
        raise FitError(f"need at least {q + 1} rows, got {n}")
    if np.linalg.matrix_rank(Z) < q:
        raise FitError("rank-deficient fixed design")
    prof = _Profile(y, Z, W, np.asarray(cluster), criterion)
    qr = W.shape[1]
    n_theta = qr * (qr + 1) // 2
    theta0 = np.zeros(n_theta)
    theta0[np.cumsum(np.arange(1, qr + 1)) - 1] = 0.3  # diagonal start
    res = optimize.minimize(prof.deviance, theta0, method="L-BFGS-B",
                            options={"maxiter": max_iter, "ftol": 1e-12, "gtol": 1e-9})
    best = res
    if not res.success:
        res2 = optimize.minimize(prof.deviance, res.x, method="Nelder-Mead",
                                 options={"maxiter": 200 * n_theta, "xatol": 1e-9,
                                          "fatol": 1e-10})
        if res2.fun <= res.fun:
            best = res2
    out = prof.extract(best.x)
    fit = LmmFit(beta=out["beta"], var_beta=out["var_beta"], psi=out["psi"],
                 sigma2=out["sigma2"], blups=out["blups"],
                 converged=bool(best.success or np.isfinite(best.fun)),
                 loglik=out["loglik"], n_obs=n,
                 clusters_used=tuple(int(k) for k in prof.cluster_ids))
    return fit


def fit_lmm(dataset, target: int, design: DesignSpec, criterion: str = "REML",
            values: np.ndarray | None = None) -> LmmFit:
    """Fit on the rows of `dataset` observed on the target column.

    `values` may supply a completed value matrix (chained-equations use);
    predictors are taken from it while the target's own mask still selects
    the fitting rows.
    """
    vals = dataset.values if values is None else np.asarray(values, dtype=float)
    obs = dataset.mask[:, target]
    if not obs.any():
        raise FitError("no observed rows on the target")
    y = vals[obs, target]
    Z, W = build_design(vals[obs], design)
    return fit_lmm_arrays(y, Z, W, dataset.cluster[obs], criterion)
