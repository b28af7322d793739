"""Stage-two random-effects combination of per-cluster estimates.

Per-cluster coefficient estimates beta_k with sampling covariances S_k are
combined under beta_k ~ N(beta, Psi + S_k). Psi is estimated either by
REML or by a moment (DerSimonian-Laird style) estimator generalized to
vectors through pairwise linear combinations. Optionally a companion
random-effects model on the log residual SDs,
log sigma_k ~ N(log sigma, Phi + 1/(2 df_k)), is fitted the same way.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .clusterwise import STATUS_OK, ClusterFit
from .lmm import FitError

__all__ = ["MetaFit", "meta_random_effects", "dl_tau2"]


@dataclass
class MetaFit:
    beta: np.ndarray
    var_beta: np.ndarray
    psi: np.ndarray
    var_psi_chol: np.ndarray  # element variances of tril(chol(Psi))
    log_sigma: float
    var_log_sigma: float
    phi: float
    var_phi: float
    method: str
    n_used: int = 0
    n_excluded: int = 0
    used_clusters: tuple[int, ...] = field(default_factory=tuple)


def dl_tau2(estimates: np.ndarray, variances: np.ndarray) -> tuple[float, float]:
    """Scalar DerSimonian-Laird: returns (tau2, pooled mean)."""
    w = 1.0 / variances
    mu_fe = float(w @ estimates / w.sum())
    q_stat = float(w @ (estimates - mu_fe) ** 2)
    c = w.sum() - (w ** 2).sum() / w.sum()
    k = estimates.size
    tau2 = max(0.0, (q_stat - (k - 1)) / c) if c > 0 else 0.0
    w_re = 1.0 / (variances + tau2)
    mu = float(w_re @ estimates / w_re.sum())
    return tau2, mu


def _psi_mm(B: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Matrix moment estimator built from pairwise DL components.

    Diagonals from DL on each coordinate; off-diagonals from DL applied to
    coordinate sums via Var(a+b) = Var(a) + Var(b) + 2 Cov(a,b). Negative
    eigenvalues of the assembled matrix are truncated to zero.
    """
    K, q = B.shape
    psi = np.zeros((q, q))
    for i in range(q):
        psi[i, i], _ = dl_tau2(B[:, i], S[:, i, i])
    for i in range(q):
        for j in range(i + 1, q):
            var_sum = S[:, i, i] + S[:, j, j] + 2.0 * S[:, i, j]
            var_sum = np.clip(var_sum, 1e-12, None)
            tau_sum, _ = dl_tau2(B[:, i] + B[:, j], var_sum)
            psi[i, j] = psi[j, i] = 0.5 * (tau_sum - psi[i, i] - psi[j, j])
    w, v = np.linalg.eigh((psi + psi.T) / 2.0)
    return (v * np.clip(w, 0.0, None)) @ v.T


def _gls_pool(B: np.ndarray, S: np.ndarray, psi: np.ndarray):
    W = np.linalg.inv(psi[None, :, :] + S)
    prec = W.sum(axis=0)
    rhs = np.einsum("kij,kj->i", W, B)
    var_beta = np.linalg.inv(prec)
    return var_beta @ rhs, var_beta


def _reml_nll(theta, B, S):
    q = B.shape[1]
    L = np.zeros((q, q))
    L[np.tril_indices(q)] = theta
    psi = L @ L.T
    V = psi[None, :, :] + S
    signs, logdets = np.linalg.slogdet(V)
    if (signs <= 0).any():
        return np.inf
    try:
        W = np.linalg.inv(V)
    except np.linalg.LinAlgError:
        return np.inf
    prec = W.sum(axis=0)
    rhs = np.einsum("kij,kj->i", W, B)
    sign_p, logdet_p = np.linalg.slogdet(prec)
    if sign_p <= 0:
        return np.inf
    beta = np.linalg.solve(prec, rhs)
    resid = B - beta
    quad = float(np.einsum("ki,kij,kj->", resid, W, resid))
    return 0.5 * (logdets.sum() + quad + logdet_p)


def _psi_reml(B: np.ndarray, S: np.ndarray):
    q = B.shape[1]
    n_theta = q * (q + 1) // 2
    start = _psi_mm(B, S)
    try:
        L0 = np.linalg.cholesky(start + 1e-8 * np.eye(q))
    except np.linalg.LinAlgError:
        L0 = 0.1 * np.eye(q)
    theta0 = L0[np.tril_indices(q)]
    res = optimize.minimize(_reml_nll, theta0, args=(B, S), method="L-BFGS-B",
                            options={"maxiter": 200, "ftol": 1e-12})
    best = res
    if not res.success:
        res2 = optimize.minimize(_reml_nll, res.x, args=(B, S),
                                 method="Nelder-Mead",
                                 options={"maxiter": 200 * n_theta,
                                          "xatol": 1e-8, "fatol": 1e-10})
        if res2.fun <= res.fun:
            best = res2
    L = np.zeros((q, q))
    L[np.tril_indices(q)] = best.x
    return L @ L.T, best.x


def _chol_elems(psi: np.ndarray) -> np.ndarray:
    q = psi.shape[0]
    try:
        L = np.linalg.cholesky(psi + 1e-12 * np.eye(q))
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(psi)
        L = v * np.sqrt(np.clip(w, 0.0, None))
    return L[np.tril_indices(q)]


def _jackknife_var(stats: np.ndarray) -> np.ndarray:
    """Leave-one-out jackknife variance along axis 0."""
    k = stats.shape[0]
    mean = stats.mean(axis=0)
    return (k - 1) / k * ((stats - mean) ** 2).sum(axis=0)


def _hessian_diag_var(fun, x0, h=1e-4):
    """Inverse of the numerical Hessian diagonal, floored at zero."""
    n = x0.size
    H = np.zeros((n, n))
    f0 = fun(x0)
    for i in range(n):
        for j in range(i, n):
            ei = np.zeros(n); ei[i] = h
            ej = np.zeros(n); ej[j] = h
            fpp = fun(x0 + ei + ej)
            fpm = fun(x0 + ei - ej)
            fmp = fun(x0 - ei + ej)
            fmm = fun(x0 - ei - ej)
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4 * h * h)
    try:
        cov = np.linalg.inv(H)
        var = np.diag(cov).copy()
    except np.linalg.LinAlgError:
        var = np.full(n, np.nan)
    var[~np.isfinite(var)] = 0.0
    return np.clip(var, 0.0, None), f0


def meta_random_effects(fits: list[ClusterFit], method: str = "REML",
                        with_sigma_model: bool = False) -> MetaFit:
    """Combine stage-one fits; see module docstring for the model."""
    if method not in ("REML", "MM"):
        raise FitError(f"unknown stage-two method {method!r}")
    usable = [f for f in fits if f.status == STATUS_OK
              and np.isfinite(f.beta_k).all() and np.isfinite(f.var_beta_k).all()]
    n_excluded = len(fits) - len(usable)
    if len(usable) < 2:
        raise FitError("need at least 2 usable cluster fits for stage two")
    B = np.array([f.beta_k for f in usable])
    S = np.array([f.var_beta_k for f in usable])
    K, q = B.shape

    if method == "MM":
        psi = _psi_mm(B, S)
        beta, var_beta = _gls_pool(B, S, psi)
        jack = np.array([_chol_elems(_psi_mm(np.delete(B, i, 0), np.delete(S, i, 0)))
                         for i in range(K)])
        var_psi_chol = _jackknife_var(jack)
    else:
        psi, theta_hat = _psi_reml(B, S)
        beta, var_beta = _gls_pool(B, S, psi)
        var_psi_chol, _ = _hessian_diag_var(lambda t: _reml_nll(t, B, S), theta_hat)

    log_sigma = np.nan
    var_log_sigma = np.nan
    phi = np.nan
    var_phi = np.nan
    if with_sigma_model:
        with_sigma = [f for f in usable if np.isfinite(f.sigma_k) and f.sigma_k > 0
                      and f.df_k >= 1]
        if len(with_sigma) < 2:
            raise FitError("need at least 2 clusters with positive residual SD")
        ls = np.log(np.array([f.sigma_k for f in with_sigma]))
        # delta method from Var(sigma_hat^2) ~ 2 sigma^4 / df
        v = 1.0 / (2.0 * np.array([float(f.df_k) for f in with_sigma]))
        if method == "MM":
            phi, log_sigma = dl_tau2(ls, v)
            jack = np.array([dl_tau2(np.delete(ls, i), np.delete(v, i))[0]
                             for i in range(ls.size)])
            var_phi = float(_jackknife_var(jack[:, None])[0])
        else:
            def nll(t):
                return _reml_nll(t.reshape(1), ls[:, None], v[:, None, None])
            res = optimize.minimize_scalar(lambda t: nll(np.array([t])),
                                           bounds=(0.0, 10.0 * ls.std() + 1.0),
                                           method="bounded")
            phi = float(res.x ** 2)
            var_arr, _ = _hessian_diag_var(lambda t: nll(t), np.array([res.x]))
            # delta method: Var(phi) = (2 t)^2 Var(t)
            var_phi = float((2 * res.x) ** 2 * var_arr[0])
            w = 1.0 / (v + phi)
            log_sigma = float(w @ ls / w.sum())
        w = 1.0 / (v + phi)
        var_log_sigma = float(1.0 / w.sum())

    return MetaFit(beta=beta, var_beta=var_beta, psi=psi,
                   var_psi_chol=var_psi_chol, log_sigma=float(log_sigma),
                   var_log_sigma=float(var_log_sigma), phi=float(phi),
                   var_phi=float(var_phi), method=method, n_used=K,
                   n_excluded=n_excluded,
                   used_clusters=tuple(f.cluster for f in usable))
