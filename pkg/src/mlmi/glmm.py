"""Logistic mixed model via the Laplace approximation.

logit P(y=1) = Z beta + W b_k with b_k ~ N(0, Psi). The random-effect
modes are found by a blocked penalized Newton solve (Schur complement on
the cluster blocks); the covariance Psi is optimized on its Cholesky
factor against the Laplace-approximate marginal likelihood.
"""
from __future__ import annotations

import numpy as np
from scipy import optimize
from scipy.special import expit

from .lmm import DesignSpec, FitError, LmmFit, build_design

__all__ = ["fit_glmm_logit", "fit_glmm_logit_arrays", "logistic_loglik"]

_RIDGE = 1e-8
_SEPARATION_NORM = 1e3


def logistic_loglik(y, eta) -> float:
    # log(1+e^eta) computed stably for large |eta|
    return float(y @ eta - np.logaddexp(0.0, eta).sum())


class _Blocks:
    """Per-cluster accumulators for the blocked Newton system."""

    def __init__(self, y, Z, W, cluster):
        ids, dense = np.unique(cluster, return_inverse=True)
        self.ids = ids
        self.K = ids.size
        self.n, self.q = Z.shape
        self.qr = W.shape[1]
        # rows sorted by cluster: per-cluster sums become contiguous
        # segment reductions (np.add.reduceat), much faster than scatter-add
        order = np.argsort(dense, kind="stable")
        self.y, self.Z, self.W = y[order], Z[order], W[order]
        self.dense = dense[order]
        self.starts = np.searchsorted(self.dense, np.arange(self.K))

    def _segsum(self, rows: np.ndarray) -> np.ndarray:
        flat = rows.reshape(self.n, -1)
        out = np.add.reduceat(flat, self.starts, axis=0)
        return out.reshape((self.K,) + rows.shape[1:])

    def eta(self, beta, b):
        return self.Z @ beta + np.einsum("ij,ij->i", self.W, b[self.dense])

    def newton_system(self, beta, b, psi_inv):
        eta = self.eta(beta, b)
        mu = expit(eta)
        w = np.clip(mu * (1.0 - mu), 1e-10, None)
        resid = self.y - mu
        g_beta = self.Z.T @ resid
        g_b = self._segsum(self.W * resid[:, None]) - b @ psi_inv
        Ww = self.W * w[:, None]
        H_bb = self._segsum(Ww[:, :, None] * self.W[:, None, :]) + psi_inv
        H_zb = self._segsum(self.Z[:, :, None] * Ww[:, None, :])
        H_zz = (self.Z * w[:, None]).T @ self.Z
        return eta, g_beta, g_b, H_zz, H_zb, H_bb

    def penalized(self, beta, b, psi_inv):
        eta = self.eta(beta, b)
        return logistic_loglik(self.y, eta) - 0.5 * float(np.einsum("ki,ij,kj->", b, psi_inv, b))


def _inner_mode(blocks: _Blocks, psi_inv, beta0, b0, max_iter=50, tol=1e-9):
    """Joint penalized Newton on (beta, b) with step halving."""
    beta, b = beta0.copy(), b0.copy()
    obj = blocks.penalized(beta, b, psi_inv)
    for _ in range(max_iter):
        _, g_beta, g_b, H_zz, H_zb, H_bb = blocks.newton_system(beta, b, psi_inv)
        Hbb_inv = np.linalg.inv(H_bb)
        tmp = np.einsum("kij,kjl->kil", H_zb, Hbb_inv)       # (K, q, qr)
        schur = H_zz - np.einsum("kij,klj->il", tmp, H_zb)
        rhs = g_beta - np.einsum("kij,kj->i", tmp, g_b)
        try:
            d_beta = np.linalg.solve(schur, rhs)
        except np.linalg.LinAlgError:
            raise FitError("singular system in GLMM inner solve")
        d_b = np.einsum("kij,kj->ki", Hbb_inv, g_b - np.einsum("kji,j->ki", H_zb, d_beta))
        step = 1.0
        while step > 1e-6:
            new_beta = beta + step * d_beta
            new_b = b + step * d_b
            new_obj = blocks.penalized(new_beta, new_b, psi_inv)
            if new_obj >= obj - 1e-12:
                break
            step /= 2.0
        gain = new_obj - obj
        beta, b, obj = new_beta, new_b, new_obj
        if abs(gain) < tol * (1.0 + abs(obj)):
            break
    return beta, b, obj


def _laplace_loglik(blocks: _Blocks, psi, beta, b, psi_inv):
    _, _, _, _, _, H_bb = blocks.newton_system(beta, b, psi_inv)
    pen = blocks.penalized(beta, b, psi_inv)
    sign_p, logdet_psi = np.linalg.slogdet(psi)
    if sign_p <= 0:
        return -np.inf, None
    _, logdet_h = np.linalg.slogdet(H_bb)
    return pen - 0.5 * blocks.K * logdet_psi - 0.5 * logdet_h.sum(), H_bb


def fit_glmm_logit_arrays(y, Z, W, cluster, psi_fixed: np.ndarray | None = None,
                          max_outer: int = 150) -> LmmFit:
    y = np.asarray(y, dtype=float)
    Z = np.asarray(Z, dtype=float)
    W = np.asarray(W, dtype=float)
    levels = np.unique(y)
    if not np.isin(levels, (0.0, 1.0)).all():
        raise FitError("GLMM target must be binary 0/1")
    if levels.size < 2:
        raise FitError("both outcome levels must be present")
    blocks = _Blocks(y, Z, W, np.asarray(cluster))
    q, qr = blocks.q, blocks.qr

    if psi_fixed is not None and not np.any(psi_fixed):
        # degenerate Psi = 0: plain logistic regression, b identically zero
        beta = _plain_logistic(y, Z)
        eta = Z @ beta
        mu = expit(eta)
        w = np.clip(mu * (1 - mu), 1e-10, None)
        info = (Z * w[:, None]).T @ Z
        return LmmFit(beta=beta, var_beta=np.linalg.inv(info),
                      psi=np.zeros((qr, qr)), sigma2=0.0,
                      blups=np.zeros((blocks.K, qr)),
                      converged=bool(np.linalg.norm(beta) < _SEPARATION_NORM),
                      loglik=logistic_loglik(y, eta), n_obs=blocks.n,
                      clusters_used=tuple(int(k) for k in blocks.ids))

    state = {"beta": np.zeros(q), "b": np.zeros((blocks.K, qr))}

    def objective(theta):
        L = np.zeros((qr, qr))
        L[np.tril_indices(qr)] = theta
        psi = L @ L.T + _RIDGE * np.eye(qr)
        psi_inv = np.linalg.inv(psi)
        try:
            beta, b, _ = _inner_mode(blocks, psi_inv, state["beta"], state["b"])
        except FitError:
            return np.inf
        state["beta"], state["b"] = beta, b
        ll, _ = _laplace_loglik(blocks, psi, beta, b, psi_inv)
        return -ll

    n_theta = qr * (qr + 1) // 2
    theta0 = np.zeros(n_theta)
    theta0[np.cumsum(np.arange(1, qr + 1)) - 1] = 0.3
    if psi_fixed is not None:
        theta = np.linalg.cholesky(psi_fixed + _RIDGE * np.eye(qr))[np.tril_indices(qr)]
        objective(theta)
        res_x, success = theta, True
    else:
        # eps well above the inner-solve noise floor keeps the numerical
        # gradient usable; the likelihood is nearly flat at this scale
        res = optimize.minimize(objective, theta0, method="L-BFGS-B",
                                options={"maxiter": max_outer, "maxfun": 300,
                                         "ftol": 1e-9, "gtol": 1e-4,
                                         "eps": 1e-5})
        res_x, success = res.x, bool(res.success or np.isfinite(res.fun))

    L = np.zeros((qr, qr))
    L[np.tril_indices(qr)] = res_x
    psi = L @ L.T + _RIDGE * np.eye(qr)
    psi_inv = np.linalg.inv(psi)
    beta, b, _ = _inner_mode(blocks, psi_inv, state["beta"], state["b"])
    ll, H_bb = _laplace_loglik(blocks, psi, beta, b, psi_inv)
    _, _, _, H_zz, H_zb, _ = blocks.newton_system(beta, b, psi_inv)
    Hbb_inv = np.linalg.inv(H_bb)
    schur = H_zz - np.einsum("kij,kjl,kml->im", H_zb, Hbb_inv, H_zb)
    var_beta = np.linalg.inv(schur)
    separated = np.linalg.norm(beta) > _SEPARATION_NORM
    return LmmFit(beta=beta, var_beta=var_beta, psi=psi, sigma2=0.0, blups=b,
                  converged=bool(success and not separated), loglik=float(ll),
                  n_obs=blocks.n, clusters_used=tuple(int(k) for k in blocks.ids))


def _plain_logistic(y, Z, max_iter=100):
    beta = np.zeros(Z.shape[1])
    for _ in range(max_iter):
        eta = Z @ beta
        mu = expit(eta)
        w = np.clip(mu * (1 - mu), 1e-10, None)
        g = Z.T @ (y - mu)
        H = (Z * w[:, None]).T @ Z
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        beta = beta + step
        if np.abs(step).max() < 1e-10 or np.linalg.norm(beta) > _SEPARATION_NORM * 10:
            break
    return beta


def fit_glmm_logit(dataset, target: int, design: DesignSpec,
                   psi_fixed: np.ndarray | None = None,
                   values: np.ndarray | None = None) -> LmmFit:
    """Fit on the rows of `dataset` observed on the binary target column."""
    vals = dataset.values if values is None else np.asarray(values, dtype=float)
    obs = dataset.mask[:, target]
    if not obs.any():
        raise FitError("no observed rows on the target")
    y = vals[obs, target]
    Z, W = build_design(vals[obs], design)
    return fit_glmm_logit_arrays(y, Z, W, dataset.cluster[obs], psi_fixed=psi_fixed)
