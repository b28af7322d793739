"""Analysis-model fitting, Rubin's-rules pooling and study-level criteria.

The analysis model is a mixed regression of y on x1 and x2 with a random
intercept and a random x1 slope. Each completed dataset yields one fit;
fits are pooled per estimand with Rubin's rules; replications of pooled
results reduce to bias / SE / coverage / RMSE criteria.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import Dataset
from .glmm import fit_glmm_logit_arrays
from .lmm import DesignSpec, FitError, build_design, fit_lmm_arrays

__all__ = ["AnalysisFit", "PooledEstimate", "CriteriaTable", "ESTIMANDS",
           "fit_analysis_model", "rubin_pool", "evaluate_replications"]

# estimands reported by the study; variance components on the SD scale
ESTIMANDS = ("beta0", "beta1", "beta2", "sqrt_psi00", "sqrt_psi11", "sigma_y")

_BETA_INDEX = {"beta0": 0, "beta1": 1, "beta2": 2}


@dataclass
class AnalysisFit:
    beta: np.ndarray        # (intercept, x1 slope, x2 slope)
    var_beta: np.ndarray    # 3x3
    psi00: float
    psi01: float
    psi11: float
    sigma_y: float          # nan for a binary outcome
    converged: bool

    def estimate(self, estimand: str) -> float:
        if estimand in _BETA_INDEX:
            return float(self.beta[_BETA_INDEX[estimand]])
        if estimand == "sqrt_psi00":
            return float(np.sqrt(max(self.psi00, 0.0)))
        if estimand == "sqrt_psi11":
            return float(np.sqrt(max(self.psi11, 0.0)))
        if estimand == "sigma_y":
            return float(self.sigma_y)
        raise ValueError(f"unknown estimand {estimand!r}")

    def variance(self, estimand: str) -> float:
        """Sampling variance; only the fixed effects carry one."""
        if estimand in _BETA_INDEX:
            i = _BETA_INDEX[estimand]
            return float(self.var_beta[i, i])
        return np.nan


@dataclass
class PooledEstimate:
    qbar: float
    within: float
    between: float
    total: float
    df: float
    ci_low: float
    ci_high: float


@dataclass
class CriteriaTable:
    """One row of summary criteria per estimand."""

    rows: list[dict] = field(default_factory=list)

    def to_csv(self, path) -> None:
        if not self.rows:
            raise ValueError("empty criteria table")
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(self.rows[0].keys()))
            writer.writeheader()
            writer.writerows(self.rows)


def fit_analysis_model(d: Dataset, outcome_type: str = "continuous") -> AnalysisFit:
    """Random-intercept random-x1-slope regression of y on (x1, x2)."""
    if not d.is_complete():
        raise FitError("analysis model requires complete data")
    y_col = d.column("y")
    x1 = d.column("x1")
    x2 = d.column("x2")
    design = DesignSpec(fixed_cols=(x1, x2), random_cols=(x1,),
                        include_intercept=True)
    Z, W = build_design(d.values, design)
    y = d.values[:, y_col]
    if outcome_type == "continuous":
        fit = fit_lmm_arrays(y, Z, W, d.cluster, criterion="REML")
        sigma_y = float(np.sqrt(max(fit.sigma2, 0.0)))
    elif outcome_type == "binary":
        fit = fit_glmm_logit_arrays(y, Z, W, d.cluster)
        sigma_y = np.nan
    else:
        raise ValueError(f"unknown outcome type {outcome_type!r}")
    return AnalysisFit(beta=fit.beta, var_beta=fit.var_beta,
                       psi00=float(fit.psi[0, 0]), psi01=float(fit.psi[0, 1]),
                       psi11=float(fit.psi[1, 1]), sigma_y=sigma_y,
                       converged=fit.converged)


def rubin_pool(fits: list[AnalysisFit], estimand: str,
               small_sample: bool = False,
               complete_df: float | None = None) -> PooledEstimate:
    """Combine M analysis fits for one estimand.

    With small_sample=True the degrees of freedom get the Barnard-Rubin
    correction, which needs the complete-data degrees of freedom.
    """
    m = len(fits)
    if m < 2:
        raise ValueError("pooling needs at least 2 fits")
    if not all(f.converged for f in fits):
        raise ValueError("all pooled fits must have converged")
    q = np.array([f.estimate(estimand) for f in fits])
    u = np.array([f.variance(estimand) for f in fits])
    qbar = float(q.mean())
    within = float(np.nanmean(u)) if np.isfinite(u).any() else 0.0
    between = float(q.var(ddof=1))
    total = within + (1.0 + 1.0 / m) * between
    if between <= 0.0:
        df = np.inf
        crit = stats.norm.ppf(0.975)
    else:
        df = (m - 1) * (1.0 + within / ((1.0 + 1.0 / m) * between)) ** 2
        if small_sample:
            if complete_df is None:
                raise ValueError("small-sample df needs complete_df")
            lam = (1.0 + 1.0 / m) * between / total
            df_obs = (complete_df + 1.0) / (complete_df + 3.0) * complete_df * (1.0 - lam)
            df = 1.0 / (1.0 / df + 1.0 / df_obs)
        crit = stats.t.ppf(0.975, df)
    half = crit * np.sqrt(total)
    return PooledEstimate(qbar=qbar, within=within, between=between,
                          total=total, df=float(df),
                          ci_low=qbar - half, ci_high=qbar + half)


def evaluate_replications(pooled: list[dict], truth: dict,
                          n_failed: int = 0) -> CriteriaTable:
    """Reduce per-replication pooled estimates to study criteria.

    pooled: one dict per successful replication mapping estimand name to
    a PooledEstimate. truth: estimand name to true value. Estimands whose
    truth is zero report absolute bias with a flag instead of a relative
    one.
    """
    if len(pooled) < 2:
        raise ValueError("need at least 2 successful replications")
    table = CriteriaTable()
    names = [e for e in ESTIMANDS if e in pooled[0]]
    for name in names:
        ests = np.array([rep[name].qbar for rep in pooled])
        ses = np.array([np.sqrt(rep[name].total) for rep in pooled])
        t_val = truth[name]
        mean_est = float(ests.mean())
        if t_val == 0.0:
            bias = mean_est
            bias_kind = "absolute"
        else:
            bias = 100.0 * (mean_est - t_val) / t_val
            bias_kind = "relative_pct"
        finite_se = np.isfinite(ses) & (ses > 0)
        model_se = float(np.sqrt(np.mean(ses[finite_se] ** 2))) if finite_se.any() else np.nan
        empirical_se = float(ests.std(ddof=1))
        # coverage is reported for fixed effects only: variance-component
        # pooling has no within-imputation variance, so its CI is not a
        # confidence interval
        if name in _BETA_INDEX and finite_se.any():
            cover = [t_val >= rep[name].ci_low and t_val <= rep[name].ci_high
                     for rep, ok in zip(pooled, finite_se) if ok]
            coverage = 100.0 * float(np.mean(cover))
        else:
            coverage = np.nan
        rmse = float(np.sqrt(np.mean((ests - t_val) ** 2)))
        table.rows.append({
            "estimand": name,
            "truth": t_val,
            "mean_estimate": mean_est,
            "bias": bias,
            "bias_kind": bias_kind,
            "model_se": model_se,
            "empirical_se": empirical_se,
            "coverage_pct": coverage,
            "rmse": rmse,
            "n_replications": len(pooled),
            "n_failed": n_failed,
        })
    return table
