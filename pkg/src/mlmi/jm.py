"""Joint-model imputation by data augmentation.

All variables enter the response side of a multivariate random-intercept
model L_ki = beta + b_k + eps_ki with b_k ~ N(0, Psi) and cluster-specific
residual covariance eps_ki ~ N(0, Sigma_k). Binary variables are carried
as probit latents whose sign must match the observed category; their
residual variances are pinned at one by a post-draw rescaling.

A homoscedastic variant (single shared Sigma, binary handled as plain
continuous values) reproduces the classic multivariate-normal sampler.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import multigammaln
from scipy.stats import chi2 as chi2_dist

from .data import BINARY, CONTINUOUS, Dataset, ImputedSet
from .rng import RngStream, mvn_sample, trunc_normal_many, wishart_sample

__all__ = ["JmHyper", "JmParams", "JmState", "jm_init", "jm_step", "jm_impute",
           "geweke_z"]

DEFAULT_BURNIN = 2000
DEFAULT_THIN = 1000

# random-walk step for the Metropolis update of the cluster-covariance
# Wishart degrees of freedom (on the log(nu2 - r + 1) scale)
NU2_RW_STEP = 0.2


class SamplerError(RuntimeError):
    """Unrecoverable numerical failure inside the DA chain."""


@dataclass(frozen=True)
class JmHyper:
    nu1: float
    lambda1: np.ndarray
    nu3: float
    lambda3: np.ndarray
    eta: float
    homoscedastic: bool = False
    binary_as_continuous: bool = False

    @staticmethod
    def default(r: int, n_clusters: int, homoscedastic: bool = False,
                binary_as_continuous: bool = False) -> "JmHyper":
        """Vague conjugate settings scaled to the problem dimensions."""
        # the lambda3 scale controls where the cluster-covariance df
        # nu2 equilibrates, and through it how widely the per-cluster
        # covariance matrices disperse around their common centre; the
        # I/(2r) scale reproduces the reference sampler's behaviour
        # (moderate df, wide cluster-covariance dispersion)
        return JmHyper(nu1=float(r), lambda1=np.eye(r),
                       nu3=float(r * n_clusters),
                       lambda3=np.eye(r) / float(2 * r),
                       eta=float(r * n_clusters),
                       homoscedastic=homoscedastic,
                       binary_as_continuous=binary_as_continuous)


@dataclass
class JmParams:
    beta: np.ndarray          # (r,)
    psi: np.ndarray           # (r, r)
    sigma: np.ndarray         # (K, r, r); all slices identical when homoscedastic
    nu2: float
    lambda2: np.ndarray       # (r, r)


@dataclass
class JmState:
    params: JmParams
    latents: np.ndarray       # (n, r)
    b: np.ndarray             # (K, r)
    iteration: int = 0


@dataclass
class _Layout:
    """Precomputed index structure shared by all DA iterations."""

    cluster_rows: list[np.ndarray]
    sizes: np.ndarray
    free: np.ndarray          # missing cells: redrawn unconstrained
    constrained: np.ndarray   # observed probit-latent cells: sign-locked
    fixed: np.ndarray         # observed cells copied verbatim
    positive: np.ndarray      # sign of constrained cells (True = category 1)
    latent_cols: np.ndarray   # columns carried as probit latents
    unseen_cols: list[np.ndarray]  # per cluster: columns with no observed cell


def _layout(d: Dataset, hyper: JmHyper) -> _Layout:
    K = d.n_clusters
    rows = [np.flatnonzero(d.cluster == k) for k in range(K)]
    sizes = np.array([r.size for r in rows])
    is_binary = np.array([t == BINARY for t in d.var_types])
    latent_cols = np.zeros(d.p, dtype=bool) if hyper.binary_as_continuous else is_binary
    constrained = d.mask & latent_cols[None, :]
    fixed = d.mask & ~latent_cols[None, :]
    free = ~d.mask
    positive = np.zeros_like(constrained)
    positive[constrained] = d.values[constrained] > 0.5
    unseen = [np.flatnonzero(~d.mask[r].any(axis=0)) for r in rows]
    return _Layout(rows, sizes, free, constrained, fixed, positive,
                   np.flatnonzero(latent_cols), unseen)


def jm_init(d: Dataset, hyper: JmHyper, rng: RngStream) -> JmState:
    """Deterministic starting state: cluster-mean fills, sign-consistent
    latents at +-0.5, weak-identity parameter block."""
    if (d.cluster_sizes() == 0).any():
        raise SamplerError("empty clusters are not allowed")
    lay = _layout(d, hyper)
    n, r = d.values.shape
    K = d.n_clusters
    latents = np.where(d.mask, d.values, np.nan)
    for j in lay.latent_cols:
        obs = d.mask[:, j]
        latents[obs, j] = np.where(d.values[obs, j] > 0.5, 0.5, -0.5)
    obs_count = d.mask.sum(axis=0)
    obs_sum = np.where(d.mask, latents, 0.0).sum(axis=0)
    grand = np.where(obs_count > 0, obs_sum / np.maximum(obs_count, 1), 0.0)
    for k, rows in enumerate(lay.cluster_rows):
        block = latents[rows]
        msk = d.mask[rows]
        cnt = msk.sum(axis=0)
        cmeans = np.where(msk, block, 0.0).sum(axis=0) / np.maximum(cnt, 1)
        fill = np.where(cnt > 0, cmeans, grand)
        miss = ~d.mask[rows]
        block[miss] = np.broadcast_to(fill, block.shape)[miss]
        latents[rows] = block
    latents[:, lay.latent_cols] = np.where(
        d.mask[:, lay.latent_cols], latents[:, lay.latent_cols],
        0.0)
    beta = latents.mean(axis=0)
    col_var = latents.var(axis=0)
    col_var = np.where(col_var > 1e-8, col_var, 1.0)
    col_var[lay.latent_cols] = 1.0
    sigma0 = np.diag(col_var)
    sigma = np.repeat(sigma0[None, :, :], K, axis=0)
    psi = 0.1 * sigma0
    # start the cluster-covariance df at its minimum, as the reference
    # samplers do; the Metropolis walk then finds its equilibrium
    nu2 = float(r)
    lambda2 = np.linalg.inv(sigma0) / nu2
    params = JmParams(beta=beta, psi=psi, sigma=sigma, nu2=nu2, lambda2=lambda2)
    return JmState(params=params, latents=latents, b=np.zeros((K, r)), iteration=0)


def _wishart_logdet_terms(nu2, logdet_prec_sum, logdet_lambda2, k_eff, r, eta):
    """nu2-dependent part of sum_k log W(prec_k; nu2, Lambda2) plus prior."""
    ll = 0.5 * (nu2 - r - 1) * logdet_prec_sum
    ll -= k_eff * (0.5 * nu2 * r * np.log(2.0) + 0.5 * nu2 * logdet_lambda2
                   + multigammaln(0.5 * nu2, r))
    ll += chi2_dist.logpdf(nu2, eta)
    return ll


def _draw_latents(state: JmState, lay: _Layout, gen) -> None:
    """Coordinate-Gibbs redraw of missing and sign-constrained latents."""
    L = state.latents
    beta = state.params.beta
    r = beta.size
    for k, rows in enumerate(lay.cluster_rows):
        mu = beta + state.b[k]
        sig = state.params.sigma[k]
        block = L[rows]
        free_k = lay.free[rows]
        cons_k = lay.constrained[rows]
        pos_k = lay.positive[rows]
        if not (free_k.any() or cons_k.any()):
            continue
        for j in range(r):
            f = free_k[:, j]
            c = cons_k[:, j]
            if not (f.any() or c.any()):
                continue
            others = np.delete(np.arange(r), j)
            coef = np.linalg.solve(sig[np.ix_(others, others)], sig[others, j])
            cvar = float(sig[j, j] - sig[j, others] @ coef)
            cvar = max(cvar, 1e-12)
            csd = np.sqrt(cvar)
            cmean = mu[j] + (block[:, others] - mu[others]) @ coef
            if f.any():
                block[f, j] = cmean[f] + csd * gen.standard_normal(int(f.sum()))
            if c.any():
                block[c, j] = trunc_normal_many(cmean[c], csd, pos_k[c, j], gen)
        L[rows] = block


def _rescale_unit_diagonal(state: JmState, lay: _Layout, hyper: JmHyper) -> None:
    """Project Sigma_k onto unit diagonal for latent-binary coordinates,
    compensating the latents, random effects, beta and Psi."""
    cols = lay.latent_cols
    if cols.size == 0:
        return
    p = state.params
    r = p.beta.size
    K = p.sigma.shape[0]
    if hyper.homoscedastic:
        d = np.ones(r)
        d[cols] = np.sqrt(np.diag(p.sigma[0])[cols])
        p.sigma[:] = p.sigma / np.outer(d, d)
        p.beta /= d
        p.psi[:] = p.psi / np.outer(d, d)
        state.b /= d
        state.latents /= d
        return
    scales = np.ones((K, r))
    for k in range(K):
        d = np.ones(r)
        d[cols] = np.sqrt(np.diag(p.sigma[k])[cols])
        scales[k] = d
        p.sigma[k] = p.sigma[k] / np.outer(d, d)
        rows = lay.cluster_rows[k]
        state.latents[np.ix_(rows, cols)] /= d[cols]
        # per-cluster exact mean compensation: (beta + b_k)/d - beta
        state.b[k] = (p.beta + state.b[k]) / d - p.beta
    dbar = np.exp(np.log(scales).mean(axis=0))
    p.psi[:] = p.psi / np.outer(dbar, dbar)


def jm_step(state: JmState, d: Dataset, hyper: JmHyper, rng: RngStream,
            _lay: _Layout | None = None) -> JmState:
    """One full DA cycle; returns a new state (inputs untouched)."""
    lay = _lay if _lay is not None else _layout(d, hyper)
    gen = rng.generator
    K = d.n_clusters
    r = d.p
    n = d.n
    state = JmState(params=JmParams(state.params.beta.copy(),
                                    state.params.psi.copy(),
                                    state.params.sigma.copy(),
                                    state.params.nu2,
                                    state.params.lambda2.copy()),
                    latents=state.latents.copy(), b=state.b.copy(),
                    iteration=state.iteration)
    p = state.params
    try:
        # (a) beta | {beta + b_k}, Psi: drawing beta against the cluster
        # means (centered parameterization) instead of against b directly
        # removes the slow random walk between the grand mean and the
        # random-effect average; the posterior is unchanged
        prec_k = np.array([np.linalg.inv(p.sigma[k]) for k in range(K)])
        mu = p.beta + state.b
        p.beta = mvn_sample(mu.mean(axis=0), p.psi / K, gen)
        state.b = mu - p.beta

        # (b) Psi^-1 ~ W(nu1 + K, (Lambda1^-1 + sum b b')^-1)
        s1 = state.b.T @ state.b
        psi_inv = wishart_sample(hyper.nu1 + K,
                                 np.linalg.inv(np.linalg.inv(hyper.lambda1) + s1),
                                 gen)
        p.psi = np.linalg.inv(psi_inv)

        # (c) residual covariances
        lam2_inv = np.linalg.inv(p.lambda2)
        if hyper.homoscedastic:
            s2 = np.zeros((r, r))
            for k, rows in enumerate(lay.cluster_rows):
                e = state.latents[rows] - p.beta - state.b[k]
                s2 += e.T @ e
            prec_shared = wishart_sample(p.nu2 + n, np.linalg.inv(lam2_inv + s2), gen)
            sigma_shared = np.linalg.inv(prec_shared)
            p.sigma = np.repeat(sigma_shared[None], K, axis=0)
            prec_k = np.repeat(prec_shared[None], K, axis=0)
        else:
            for k, rows in enumerate(lay.cluster_rows):
                e = state.latents[rows] - p.beta - state.b[k]
                s2k = e.T @ e
                prec_k[k] = wishart_sample(p.nu2 + lay.sizes[k],
                                           np.linalg.inv(lam2_inv + s2k), gen)
                p.sigma[k] = np.linalg.inv(prec_k[k])

        # (d) conjugate Lambda2, Metropolis nu2 on log(nu2 - r + 1)
        k_eff = 1 if hyper.homoscedastic else K
        prec_used = prec_k[:1] if hyper.homoscedastic else prec_k
        prec_sum = prec_used.sum(axis=0)
        lam2_prec = wishart_sample(hyper.nu3 + k_eff * p.nu2,
                                   np.linalg.inv(np.linalg.inv(hyper.lambda3)
                                                 + prec_sum), gen)
        p.lambda2 = np.linalg.inv(lam2_prec)
        logdet_prec_sum = sum(np.linalg.slogdet(pk)[1] for pk in prec_used)
        logdet_lambda2 = np.linalg.slogdet(p.lambda2)[1]
        x = np.log(p.nu2 - r + 1.0)
        x_prop = x + NU2_RW_STEP * gen.standard_normal()
        nu2_prop = np.exp(x_prop) + r - 1.0
        cur = _wishart_logdet_terms(p.nu2, logdet_prec_sum, logdet_lambda2,
                                    k_eff, r, hyper.eta) + x
        prop = _wishart_logdet_terms(nu2_prop, logdet_prec_sum, logdet_lambda2,
                                     k_eff, r, hyper.eta) + x_prop
        if np.log(gen.uniform()) < prop - cur:
            p.nu2 = float(nu2_prop)

        # (e) random effects given completed latents; when a cluster has
        # columns with no observed cell, (b_k, those latents) are drawn as
        # one block: b_k with the unseen-column latents integrated out,
        # then the latents from their joint conditional given b_k. This
        # avoids the slow pairwise walk between a systematically missing
        # column's latents and its random effect
        psi_inv = np.linalg.inv(p.psi)
        for k, rows in enumerate(lay.cluster_rows):
            unseen = lay.unseen_cols[k]
            if unseen.size == 0:
                post_prec = psi_inv + lay.sizes[k] * prec_k[k]
                post_cov = np.linalg.inv(post_prec)
                resid_sum = state.latents[rows].sum(axis=0) - lay.sizes[k] * p.beta
                state.b[k] = mvn_sample(post_cov @ (prec_k[k] @ resid_sum),
                                        post_cov, gen)
                continue
            seen = np.setdiff1d(np.arange(r), unseen)
            if seen.size == 0:
                state.b[k] = mvn_sample(np.zeros(r), p.psi, gen)
            else:
                sig_oo = p.sigma[k][np.ix_(seen, seen)]
                prec_oo = np.linalg.inv(sig_oo)
                psi_oo = p.psi[np.ix_(seen, seen)]
                post_prec = np.linalg.inv(psi_oo) + lay.sizes[k] * prec_oo
                post_cov = np.linalg.inv(post_prec)
                resid_sum = (state.latents[rows][:, seen].sum(axis=0)
                             - lay.sizes[k] * p.beta[seen])
                b_seen = mvn_sample(post_cov @ (prec_oo @ resid_sum),
                                    post_cov, gen)
                gain = p.psi[np.ix_(unseen, seen)] @ np.linalg.inv(psi_oo)
                cond_cov = (p.psi[np.ix_(unseen, unseen)]
                            - gain @ p.psi[np.ix_(seen, unseen)])
                b_unseen = gain @ b_seen + mvn_sample(
                    np.zeros(unseen.size), cond_cov, gen)
                state.b[k, seen] = b_seen
                state.b[k, unseen] = b_unseen
            mu_k = p.beta + state.b[k]
            if seen.size == 0:
                noise = mvn_sample(np.zeros(r), p.sigma[k], gen,
                                   size=lay.sizes[k])
                state.latents[rows] = mu_k + noise
            else:
                reg = p.sigma[k][np.ix_(unseen, seen)] @ np.linalg.inv(sig_oo)
                res_cov = (p.sigma[k][np.ix_(unseen, unseen)]
                           - reg @ p.sigma[k][np.ix_(seen, unseen)])
                mean = mu_k[unseen] + (state.latents[rows][:, seen]
                                       - mu_k[seen]) @ reg.T
                noise = mvn_sample(np.zeros(unseen.size), res_cov, gen,
                                   size=lay.sizes[k])
                state.latents[np.ix_(rows, unseen)] = mean + noise

        # (f)+(g) latent redraw honoring observed values and signs
        _draw_latents(state, lay, gen)

        # (h) unit-diagonal projection for probit-latent coordinates
        _rescale_unit_diagonal(state, lay, hyper)
    except np.linalg.LinAlgError as exc:
        raise SamplerError(f"linear algebra failure at iteration {state.iteration}: {exc}") from exc
    state.iteration += 1
    return state


def _decode(state: JmState, d: Dataset, lay: _Layout,
            hyper: JmHyper) -> Dataset:
    out = np.where(d.mask, d.values, state.latents)
    for j in lay.latent_cols:
        miss = ~d.mask[:, j]
        out[miss, j] = (state.latents[miss, j] > 0.0).astype(float)
    if not hyper.binary_as_continuous:
        return d.completed(out)
    # continuous treatment of binary columns: imputed values are reals,
    # so the completed copies carry those columns as continuous
    types = tuple(CONTINUOUS if t == BINARY else t for t in d.var_types)
    return Dataset(out, np.ones_like(d.mask), d.cluster.copy(), types,
                   d.names, d.cluster_labels)


def jm_impute(d: Dataset, hyper: JmHyper | None = None, m: int = 5,
              burnin: int = DEFAULT_BURNIN, thin: int = DEFAULT_THIN,
              rng: RngStream | None = None,
              diagnostics_path: str | None = None) -> ImputedSet:
    """Run one DA chain; emit a completed dataset every `thin` iterations
    after `burnin`, m times."""
    if m < 2:
        raise ValueError("m must be at least 2")
    if rng is None:
        rng = RngStream(0)
    if hyper is None:
        hyper = JmHyper.default(d.p, d.n_clusters)
    lay = _layout(d, hyper)
    state = jm_init(d, hyper, rng)
    trace = []

    def record(s: JmState):
        if diagnostics_path is not None:
            trace.append([s.iteration, *s.params.beta, *np.diag(s.params.psi),
                          s.params.nu2])

    completed = []
    total = burnin + (m - 1) * thin + 1
    for it in range(total):
        state = jm_step(state, d, hyper, rng.substream(it), _lay=lay)
        record(state)
        if it >= burnin and (it - burnin) % thin == 0:
            completed.append(_decode(state, d, lay, hyper))
    if diagnostics_path is not None:
        with open(diagnostics_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", *(f"beta_{n}" for n in d.names),
                             *(f"psi_{n}" for n in d.names), "nu2"])
            writer.writerows(trace)
    return ImputedSet(source=d, datasets=tuple(completed[:m]))


def geweke_z(trace: np.ndarray, first: float = 0.1, last: float = 0.5) -> float:
    """Geweke convergence z-score comparing early and late chain segments.

    Segment variances use batch means to absorb autocorrelation.
    """
    trace = np.asarray(trace, dtype=float)
    n = trace.size
    a = trace[: int(first * n)]
    b = trace[int((1 - last) * n):]

    def batch_var_of_mean(x):
        nb = max(int(np.sqrt(x.size)), 2)
        size = x.size // nb
        if size < 1:
            return x.var(ddof=1) / x.size
        means = x[: nb * size].reshape(nb, size).mean(axis=1)
        return means.var(ddof=1) / nb

    denom = batch_var_of_mean(a) + batch_var_of_mean(b)
    if denom <= 0:
        return 0.0
    return float((a.mean() - b.mean()) / np.sqrt(denom))
