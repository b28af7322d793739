"""Chained-equations imputation driver and its dedicated conditionals.

Two families of conditional methods live here. The GLM family fits one
mixed model on all rows observed for the target and draws parameters from
approximate conjugate posteriors. The two-stage family fits a separate
regression per cluster and combines them by a random-effects model across
clusters, then draws parameters from the stage-two asymptotics. Either way
a draw produces random coefficients per cluster (conditional on the
cluster's own data where tractable, marginal otherwise) and values for the
target's missing cells.

Conditional models use every other column in both the fixed and random
design parts, plus intercepts.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .clusterwise import STATUS_OK, cluster_logit, cluster_ols
from .data import BINARY, CONTINUOUS, Dataset, ImputedSet
from .glmm import fit_glmm_logit_arrays
from .lmm import DesignSpec, FitError, build_design, fit_lmm_arrays
from .meta import meta_random_effects
from .rng import RngStream, invgamma_sample, mvn_sample, trunc_normal_sample, \
    wishart_sample

__all__ = ["FcsPlan", "ConditionalDraw", "FcsError", "fcs_impute",
           "cond_glm_continuous", "cond_glm_binary",
           "cond_2stage_continuous", "cond_2stage_binary"]

METHOD_TAGS = ("glm", "twostage_reml", "twostage_mm", "noclust", "fixclust",
               "pmm_fixclust", "twolnorm")

_PSI_RIDGE = 1e-8


class FcsError(RuntimeError):
    """Irrecoverable conditional-method failure inside a chained run."""


@dataclass(frozen=True)
class FcsPlan:
    """Chained-equations schedule: one method tag per incomplete variable."""

    methods: dict[str, str]
    cycles: int = 5
    visit_order: tuple[str, ...] = ()

    def __post_init__(self):
        for name, tag in self.methods.items():
            if tag not in METHOD_TAGS:
                raise ValueError(f"unknown method tag {tag!r} for {name!r}; "
                                 f"valid: {', '.join(METHOD_TAGS)}")


@dataclass
class ConditionalDraw:
    """One parameter-plus-imputation draw for a single target variable."""

    theta: dict
    b_draw: np.ndarray        # (K, q') random coefficients, all clusters
    imputations: np.ndarray   # values for the target's missing cells, row order


def design_for(d: Dataset, target: int) -> DesignSpec:
    others = tuple(j for j in range(d.p) if j != target)
    return DesignSpec(fixed_cols=others, random_cols=others,
                      include_intercept=True)


def _empty_draw(d: Dataset) -> ConditionalDraw:
    return ConditionalDraw(theta={}, b_draw=np.zeros((d.n_clusters, 0)),
                           imputations=np.empty(0))


def _observed_clusters(d: Dataset, target: int) -> np.ndarray:
    """Clusters holding at least one observed value of the target."""
    obs = np.zeros(d.n_clusters, dtype=bool)
    np.logical_or.at(obs, d.cluster, d.mask[:, target])
    return obs


def _draw_psi_from_blups(blups: np.ndarray, k_obs: int, rng) -> np.ndarray:
    """Psi^-1 ~ Wishart(q + K_obs, (sum b b' + ridge I)^-1).

    The minimally proper Wishart(q, (ridge I)^-1) prior keeps the draw
    defined when fewer than q clusters observe the target, which happens
    with few clusters and systematic missingness.
    """
    q = blups.shape[1]
    s1 = blups.T @ blups + _PSI_RIDGE * np.eye(q)
    psi_inv = wishart_sample(q + k_obs, np.linalg.inv(s1), rng)
    return np.linalg.inv(psi_inv)


def cond_glm_continuous(d: Dataset, target: int, values: np.ndarray,
                        rng: RngStream) -> ConditionalDraw:
    """Mixed-model conditional for a continuous target.

    Draws sigma2 (inverse-gamma), beta (Gaussian), Psi (inverse-Wishart
    from the BLUP cross-product), then cluster effects conditional on the
    cluster's observed target values, marginal N(0, Psi) where the cluster
    has none.
    """
    miss = ~d.mask[:, target]
    if not miss.any():
        return _empty_draw(d)
    obs = d.mask[:, target]
    obs_clusters = _observed_clusters(d, target)
    if obs_clusters.sum() < 2:
        raise FitError("need at least 2 clusters observed on the target")
    design = design_for(d, target)
    Z, W = build_design(values, design)
    gen = rng.generator
    fit = fit_lmm_arrays(values[obs, target], Z[obs], W[obs], d.cluster[obs],
                         criterion="REML")
    if not fit.converged:
        raise FitError("mixed-model fit did not converge")
    p = fit.beta.size
    df = fit.n_obs - p
    if df < 1:
        raise FitError("no residual degrees of freedom")
    sigma2 = float(invgamma_sample(df / 2.0, df * fit.sigma2 / 2.0, gen))
    beta = mvn_sample(fit.beta, fit.var_beta, gen)
    psi = _draw_psi_from_blups(fit.blups, int(obs_clusters.sum()), gen)
    q = psi.shape[0]
    b_draw = np.zeros((d.n_clusters, q))
    psi_inv = np.linalg.inv(psi + _PSI_RIDGE * np.eye(q))
    for k in range(d.n_clusters):
        rows = obs & (d.cluster == k)
        if obs_clusters[k] and rows.any():
            Wk = W[rows]
            prec = psi_inv + (Wk.T @ Wk) / sigma2
            cov = np.linalg.inv(prec)
            resid = values[rows, target] - Z[rows] @ beta
            b_draw[k] = mvn_sample(cov @ (Wk.T @ resid) / sigma2, cov, gen)
        else:
            b_draw[k] = mvn_sample(np.zeros(q), psi, gen)
    mean = Z[miss] @ beta + np.einsum("ij,ij->i", W[miss], b_draw[d.cluster[miss]])
    imputations = mean + np.sqrt(sigma2) * gen.standard_normal(int(miss.sum()))
    theta = {"beta": beta, "psi": psi, "sigma2": sigma2}
    return ConditionalDraw(theta=theta, b_draw=b_draw, imputations=imputations)


def cond_glm_binary(d: Dataset, target: int, values: np.ndarray,
                    rng: RngStream) -> ConditionalDraw:
    """Logistic mixed-model conditional for a binary target.

    The random-effect conditional given observed outcomes has no closed
    form under the logit link, so every cluster's effect is drawn from the
    marginal N(0, Psi).
    """
    miss = ~d.mask[:, target]
    if not miss.any():
        return _empty_draw(d)
    obs = d.mask[:, target]
    obs_clusters = _observed_clusters(d, target)
    if obs_clusters.sum() < 2:
        raise FitError("need at least 2 clusters observed on the target")
    design = design_for(d, target)
    Z, W = build_design(values, design)
    gen = rng.generator
    fit = fit_glmm_logit_arrays(values[obs, target], Z[obs], W[obs],
                                d.cluster[obs])
    if not fit.converged:
        raise FitError("logistic mixed-model fit separated or failed")
    beta = mvn_sample(fit.beta, fit.var_beta, gen)
    psi = _draw_psi_from_blups(fit.blups, int(obs_clusters.sum()), gen)
    q = psi.shape[0]
    b_draw = mvn_sample(np.zeros(q), psi, gen, size=d.n_clusters)
    prob = expit(Z[miss] @ beta
                 + np.einsum("ij,ij->i", W[miss], b_draw[d.cluster[miss]]))
    imputations = (gen.uniform(size=prob.shape) < prob).astype(float)
    theta = {"beta": beta, "psi": psi}
    return ConditionalDraw(theta=theta, b_draw=b_draw, imputations=imputations)


def _stage_one(d: Dataset, target: int, values: np.ndarray, binary: bool):
    """Per-cluster fits on rows observed for the target."""
    design = design_for(d, target)
    Z, _ = build_design(values, design)
    fits = []
    for k in range(d.n_clusters):
        rows = d.mask[:, target] & (d.cluster == k)
        if not rows.any():
            continue
        y = values[rows, target]
        if binary:
            fits.append(cluster_logit(y, Z[rows], cluster=k))
        else:
            fits.append(cluster_ols(y, Z[rows], cluster=k))
    return fits, Z


def _draw_psi_chol(meta, gen) -> np.ndarray:
    """Psi draw by perturbing its Cholesky elements with Gaussian noise."""
    q = meta.psi.shape[0]
    try:
        L_hat = np.linalg.cholesky(meta.psi + 1e-12 * np.eye(q))
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(meta.psi)
        L_hat = v * np.sqrt(np.clip(w, 0.0, None))
    elems = L_hat[np.tril_indices(q)]
    sd = np.sqrt(np.clip(meta.var_psi_chol, 0.0, None))
    drawn = elems + sd * gen.standard_normal(elems.shape)
    L = np.zeros((q, q))
    L[np.tril_indices(q)] = drawn
    return L @ L.T


def _draw_b_conditional(meta, fits_by_cluster, psi, beta, n_clusters, gen,
                        var_scale=None):
    """Cluster effects: where a stage-one fit exists the stage-two equation
    beta_k_hat = beta + b_k + e_k is solved for b_k with a fresh draw of the
    stage-one noise e_k; clusters without a fit get marginal N(0, Psi).

    Keeping the full cluster-specific estimate (rather than shrinking it
    toward beta) preserves the between-cluster dispersion that the analysis
    model's random-effect variances are estimated from.
    """
    q = psi.shape[0]
    b_draw = np.zeros((n_clusters, q))
    for k in range(n_clusters):
        fit = fits_by_cluster.get(k)
        if fit is None:
            b_draw[k] = mvn_sample(np.zeros(q), psi, gen)
            continue
        s_k = fit.var_beta_k
        if var_scale is not None:
            s_k = var_scale[k] * s_k
        b_draw[k] = mvn_sample(fit.beta_k - beta, (s_k + s_k.T) / 2.0, gen)
    return b_draw


def cond_2stage_continuous(d: Dataset, target: int, values: np.ndarray,
                           rng: RngStream, estimator: str = "REML") -> ConditionalDraw:
    """Two-stage conditional: per-cluster least squares combined by a
    cross-cluster random-effects model, with a companion model on the log
    residual SDs giving cluster-specific imputation noise."""
    miss = ~d.mask[:, target]
    if not miss.any():
        return _empty_draw(d)
    gen = rng.generator
    fits, Z = _stage_one(d, target, values, binary=False)
    meta = meta_random_effects(fits, method=estimator, with_sigma_model=True)
    used = set(meta.used_clusters)
    fits_by_cluster = {f.cluster: f for f in fits if f.cluster in used}

    log_sigma = meta.log_sigma + np.sqrt(max(meta.var_log_sigma, 0.0)) \
        * gen.standard_normal()
    if meta.var_phi > 0:
        phi = trunc_normal_sample(meta.phi, np.sqrt(meta.var_phi), "positive", gen)
    else:
        phi = max(meta.phi, 0.0)
    beta = mvn_sample(meta.beta, meta.var_beta, gen)
    psi = _draw_psi_chol(meta, gen)

    # per-cluster residual SDs: conditional on the cluster's own estimate
    # where one exists, marginal under the heterogeneity model otherwise
    sigma_k = np.zeros(d.n_clusters)
    for k in range(d.n_clusters):
        fit = fits_by_cluster.get(k)
        if fit is not None and np.isfinite(fit.sigma_k) and fit.sigma_k > 0:
            v = 1.0 / (2.0 * fit.df_k)
            denom = phi + v
            if denom <= 0:
                ls_k = np.log(fit.sigma_k)
            else:
                mean = (phi * np.log(fit.sigma_k) + v * log_sigma) / denom
                var = phi * v / denom
                ls_k = mean + np.sqrt(max(var, 0.0)) * gen.standard_normal()
        else:
            ls_k = log_sigma + np.sqrt(max(phi, 0.0)) * gen.standard_normal()
        sigma_k[k] = np.exp(ls_k)

    # stage-one covariances are rescaled from the estimated to the drawn
    # residual variance before the stage-two noise draw
    var_scale = np.ones(d.n_clusters)
    for k, fit in fits_by_cluster.items():
        if np.isfinite(fit.sigma_k) and fit.sigma_k > 0:
            var_scale[k] = (sigma_k[k] / fit.sigma_k) ** 2
    b_draw = _draw_b_conditional(meta, fits_by_cluster, psi, beta,
                                 d.n_clusters, gen, var_scale=var_scale)

    mean = np.einsum("ij,ij->i", Z[miss], beta + b_draw[d.cluster[miss]])
    imputations = mean + sigma_k[d.cluster[miss]] * gen.standard_normal(int(miss.sum()))
    theta = {"beta": beta, "psi": psi, "log_sigma": log_sigma, "phi": phi,
             "sigma_k": sigma_k, "n_excluded": meta.n_excluded}
    return ConditionalDraw(theta=theta, b_draw=b_draw, imputations=imputations)


def cond_2stage_binary(d: Dataset, target: int, values: np.ndarray,
                       rng: RngStream, estimator: str = "REML") -> ConditionalDraw:
    """Two-stage conditional with per-cluster logistic fits; no residual
    SD model applies under the Bernoulli likelihood."""
    miss = ~d.mask[:, target]
    if not miss.any():
        return _empty_draw(d)
    gen = rng.generator
    fits, Z = _stage_one(d, target, values, binary=True)
    if not any(f.status == STATUS_OK for f in fits):
        raise FitError("all observed clusters separated or rank deficient")
    meta = meta_random_effects(fits, method=estimator, with_sigma_model=False)
    used = set(meta.used_clusters)
    fits_by_cluster = {f.cluster: f for f in fits if f.cluster in used}
    beta = mvn_sample(meta.beta, meta.var_beta, gen)
    psi = _draw_psi_chol(meta, gen)
    b_draw = _draw_b_conditional(meta, fits_by_cluster, psi, beta,
                                 d.n_clusters, gen)
    prob = expit(np.einsum("ij,ij->i", Z[miss], beta + b_draw[d.cluster[miss]]))
    imputations = (gen.uniform(size=prob.shape) < prob).astype(float)
    theta = {"beta": beta, "psi": psi, "n_excluded": meta.n_excluded}
    return ConditionalDraw(theta=theta, b_draw=b_draw, imputations=imputations)


def _registry():
    from . import baselines

    return {
        ("glm", False): cond_glm_continuous,
        ("glm", True): cond_glm_binary,
        ("twostage_reml", False): lambda d, t, v, r: cond_2stage_continuous(d, t, v, r, "REML"),
        ("twostage_reml", True): lambda d, t, v, r: cond_2stage_binary(d, t, v, r, "REML"),
        ("twostage_mm", False): lambda d, t, v, r: cond_2stage_continuous(d, t, v, r, "MM"),
        ("twostage_mm", True): lambda d, t, v, r: cond_2stage_binary(d, t, v, r, "MM"),
        ("noclust", False): baselines.cond_norm_noclust,
        ("noclust", True): baselines.cond_norm_noclust,
        ("fixclust", False): baselines.cond_norm_fixclust,
        ("fixclust", True): baselines.cond_norm_fixclust,
        ("pmm_fixclust", False): baselines.cond_pmm_fixclust,
        ("pmm_fixclust", True): baselines.cond_pmm_fixclust,
        ("twolnorm", False): baselines.cond_2lnorm,
        ("twolnorm", True): baselines.cond_2lnorm,
    }


def _initial_fill(d: Dataset, gen) -> np.ndarray:
    """Missing cells start as resamples of the column's observed values."""
    values = d.values.copy()
    for j in range(d.p):
        miss = ~d.mask[:, j]
        if not miss.any():
            continue
        pool = d.values[d.mask[:, j], j]
        if pool.size == 0:
            raise FcsError(f"column {d.names[j]!r} has no observed values")
        values[miss, j] = gen.choice(pool, size=int(miss.sum()), replace=True)
    return values


def fcs_impute(d: Dataset, plan: FcsPlan, m: int = 5,
               rng: RngStream | None = None,
               diagnostics_path: str | None = None) -> ImputedSet:
    """Run M independent chained imputations and collect the completions."""
    if rng is None:
        rng = RngStream(0)
    incomplete = [d.names[j] for j in range(d.p) if not d.mask[:, j].all()]
    uncovered = [n for n in incomplete if n not in plan.methods]
    if uncovered:
        raise FcsError(f"no method assigned for incomplete variables: {uncovered}")
    order = plan.visit_order or tuple(n for n in d.names if n in incomplete)
    for n in order:
        if n not in incomplete:
            raise FcsError(f"visit_order names complete or unknown variable {n!r}")
    registry = _registry()
    # the heteroscedastic-normal method imputes binary targets as reals
    # without rounding; those columns leave the run typed as continuous
    out_types = tuple(
        CONTINUOUS if t == BINARY and plan.methods.get(n) == "twolnorm"
        and n in incomplete else t
        for n, t in zip(d.names, d.var_types))
    diag_rows = []
    completions = []
    for run in range(m):
        run_rng = rng.substream(run)
        values = _initial_fill(d, run_rng.substream(0).generator)
        for cycle in range(plan.cycles):
            for step, name in enumerate(order):
                j = d.column(name)
                tag = plan.methods[name]
                binary = d.var_types[j] == BINARY
                cond = registry[(tag, binary)]
                sub = run_rng.substream(1 + cycle * len(order) + step)
                try:
                    draw = cond(d, j, values, sub)
                except (FitError, ValueError, np.linalg.LinAlgError) as exc:
                    raise FcsError(
                        f"conditional method {tag!r} failed on variable "
                        f"{name!r} at cycle {cycle + 1}: {exc}") from exc
                miss = ~d.mask[:, j]
                values[miss, j] = draw.imputations
                if diagnostics_path is not None:
                    cells = values[miss, j]
                    diag_rows.append([run + 1, cycle + 1, name,
                                      float(cells.mean()) if cells.size else np.nan,
                                      float(cells.std()) if cells.size else np.nan])
        if out_types == d.var_types:
            completions.append(d.completed(values))
        else:
            if np.isnan(values).any():
                raise FcsError("completed run still contains NaN")
            completions.append(Dataset(values, np.ones_like(d.mask),
                                       d.cluster.copy(), out_types, d.names,
                                       d.cluster_labels))
    if diagnostics_path is not None:
        with open(diagnostics_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["imputation", "cycle", "variable",
                             "imputed_mean", "imputed_sd"])
            writer.writerows(diag_rows)
    return ImputedSet(source=d, datasets=tuple(completions))
