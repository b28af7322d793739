"""Monte-Carlo benchmark harness: data generation, missingness, the
20-row configuration grid, method orchestration and report files.

Each replication generates a complete four-variable two-level dataset
(y, x1, x2, x3), imposes systematic and sporadic missingness on x1 and x2,
runs every requested imputation method, fits the analysis model on each
completed dataset, pools with Rubin's rules, and reduces the replications
to bias / SE / coverage / RMSE criteria per method and estimand.
"""
from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import optimize, stats
from scipy.special import expit

from .data import BINARY, CONTINUOUS, Dataset
from .fcs import FcsError, FcsPlan, fcs_impute
from .jm import JmHyper, SamplerError, jm_impute
from .lmm import FitError
from .pooling import ESTIMANDS, AnalysisFit, CriteriaTable, PooledEstimate, \
    evaluate_replications, fit_analysis_model, rubin_pool
from .rng import RngStream, mvn_sample

__all__ = ["GenConfig", "MissingnessConfig", "RunConfig", "Report",
           "GREAT_SIZES", "EQUAL_SIZE_OPTIONS", "METHODS", "config_grid",
           "generate_complete", "impose_missingness", "run_configuration"]

# observed cohort sizes of the reference meta-analysis, total 11685
GREAT_SIZES = (410, 567, 210, 375, 107, 267, 203, 354, 137, 48, 208, 622,
               78, 670, 1000, 1093, 18, 1834, 358, 54, 588, 651, 455, 294,
               397, 295, 303, 89)

EQUAL_SIZE_OPTIONS = (15, 25, 50, 100, 200, 400)

METHODS = ("full", "cc", "jm_jomo", "jm_pan", "fcs_glm", "fcs_2stage_reml",
           "fcs_2stage_mm", "fcs_noclust", "fcs_fixclust",
           "fcs_fixclust_pmm", "fcs_2lnorm")

_BASE_SIGMA_V = np.array([[0.12, 0.001, 0.001],
                          [0.001, 0.12, 0.001],
                          [0.001, 0.001, 0.12]])
_BASE_SIGMA_X = np.array([[0.36, 0.108],
                          [0.108, 0.36]])
_BASE_PSI = np.array([[0.0077, -0.0015],
                      [-0.0015, 0.0004]])


class ConfigError(ValueError):
    """Invalid run or grid configuration."""


@dataclass(frozen=True)
class GenConfig:
    cluster_sizes: tuple[int, ...] = GREAT_SIZES
    sigma_v: tuple = tuple(map(tuple, _BASE_SIGMA_V))
    alpha1: float = 2.9
    alpha2: float = 0.42
    alpha3: float = 2.9
    sigma_x: tuple = tuple(map(tuple, _BASE_SIGMA_X))
    beta: tuple[float, float, float] = (0.72, -0.11, 0.03)
    psi: tuple = tuple(map(tuple, _BASE_PSI))
    sigma_y: float = 0.15
    outcome_type: str = "continuous"
    x1_type: str = CONTINUOUS
    x2_random_effect_in_y: bool = False
    x2_random_effect_var: float = 0.0004
    binary_link: str = "logit"

    def arrays(self):
        return (np.array(self.sigma_v), np.array(self.sigma_x),
                np.array(self.psi))

    def validate(self):
        sv, sx, psi = self.arrays()
        for name, m in (("sigma_v", sv), ("sigma_x", sx), ("psi", psi)):
            if not np.allclose(m, m.T) or np.linalg.eigvalsh(m).min() < -1e-12:
                raise ConfigError(f"{name} must be symmetric PSD")
        if self.outcome_type not in ("continuous", "binary"):
            raise ConfigError(f"bad outcome_type {self.outcome_type!r}")
        if self.x1_type not in (CONTINUOUS, BINARY):
            raise ConfigError(f"bad x1_type {self.x1_type!r}")
        if self.binary_link not in ("logit", "probit"):
            raise ConfigError(f"bad binary_link {self.binary_link!r}")
        if min(self.cluster_sizes) < 1:
            raise ConfigError("cluster sizes must be positive")


@dataclass(frozen=True)
class MissingnessConfig:
    pi_sys: float = 0.25
    pi_spor: float = 0.25
    mechanism: str = "MCAR"
    mar_strength: float = 1.0

    def validate(self):
        if not (0.0 <= self.pi_sys <= 1.0 and 0.0 <= self.pi_spor <= 1.0):
            raise ConfigError("missingness probabilities must lie in [0, 1]")
        if self.mechanism not in ("MCAR", "MAR"):
            raise ConfigError(f"bad mechanism {self.mechanism!r}")


@dataclass(frozen=True)
class RunConfig:
    config_id: int = 1
    t: int = 500
    m: int = 5
    methods: tuple[str, ...] = ("full", "cc", "jm_jomo", "fcs_glm",
                                "fcs_2stage_reml", "fcs_2stage_mm")
    seed: int = 0
    burnin: int = 2000
    thin: int = 1000
    cycles: int = 5
    gen: GenConfig | None = None
    missing: MissingnessConfig | None = None

    def validate(self):
        if self.gen is None or self.missing is None:
            if not 1 <= self.config_id <= 20:
                raise ConfigError(f"config_id must be 1..20, got {self.config_id}")
        if self.t < 1:
            raise ConfigError("t must be at least 1")
        if self.m < 2:
            raise ConfigError("m must be at least 2")
        for name in self.methods:
            if name not in METHODS:
                raise ConfigError(f"unknown method {name!r}; valid: "
                                  f"{', '.join(METHODS)}")
        if self.burnin < 1 or self.thin < 1 or self.cycles < 1:
            raise ConfigError("burnin, thin and cycles must be positive")

    def resolve(self) -> tuple[GenConfig, MissingnessConfig]:
        if self.gen is not None and self.missing is not None:
            g, mc = self.gen, self.missing
        else:
            g, mc = config_grid(self.config_id)
            if self.gen is not None:
                g = self.gen
            if self.missing is not None:
                mc = self.missing
        g.validate()
        mc.validate()
        return g, mc


def _scaled_sigma(diag: float, base: np.ndarray) -> tuple:
    """Rescale a covariance to a new common diagonal, keeping correlations."""
    corr = base / np.sqrt(np.outer(np.diag(base), np.diag(base)))
    out = corr * diag
    return tuple(map(tuple, out))


def config_grid(config_id: int) -> tuple[GenConfig, MissingnessConfig]:
    """Resolve one row of the 20-configuration study grid.

    Row 1 is the base case; every other row varies exactly the parameters
    flagged for it and keeps the rest at base values.
    """
    if not 1 <= config_id <= 20:
        raise ConfigError(f"config_id must be 1..20, got {config_id}")
    g = GenConfig()
    mc = MissingnessConfig()
    if config_id == 2:
        mc = replace(mc, pi_sys=0.1, pi_spor=0.375)
    elif config_id == 3:
        mc = replace(mc, pi_sys=0.4, pi_spor=0.0625)
    elif config_id == 4:
        g = replace(g, x1_type=BINARY)
    elif config_id == 5:
        g = replace(g, outcome_type="binary")
    elif config_id == 6:
        # x2 complete; handled by per-variable masks below
        pass
    elif config_id == 7:
        pass
    elif config_id == 8:
        mc = replace(mc, mechanism="MAR")
    elif config_id == 9:
        g = replace(g, x2_random_effect_in_y=True)
    elif config_id == 10:
        g = replace(g, cluster_sizes=GREAT_SIZES[:14])
    elif config_id == 11:
        g = replace(g, cluster_sizes=tuple(max(s // 2, 2) for s in GREAT_SIZES))
    elif config_id == 12:
        g = replace(g, cluster_sizes=tuple(max(s // 4, 2) for s in GREAT_SIZES))
    elif config_id == 13:
        g = replace(g, sigma_v=_scaled_sigma(0.36, _BASE_SIGMA_V))
    elif config_id == 14:
        g = replace(g, sigma_v=_scaled_sigma(0.04, _BASE_SIGMA_V))
    elif config_id == 15:
        sv = 0.12 * (0.3 * np.ones((3, 3)) + 0.7 * np.eye(3))
        g = replace(g, sigma_v=tuple(map(tuple, sv)))
    elif config_id == 16:
        sx = np.array([[0.36, 0.18], [0.18, 0.36]])
        g = replace(g, sigma_x=tuple(map(tuple, sx)))
    elif config_id == 17:
        g = replace(g, psi=tuple(map(tuple, 2.0 * _BASE_PSI)))
    elif config_id == 18:
        psi = _BASE_PSI.copy()
        rho = -0.3
        psi[0, 1] = psi[1, 0] = rho * np.sqrt(psi[0, 0] * psi[1, 1])
        g = replace(g, psi=tuple(map(tuple, psi)))
    elif config_id == 19:
        g = replace(g, binary_link="probit")
    elif config_id == 20:
        g = replace(g, cluster_sizes=GREAT_SIZES[:7])
    return g, mc


def missing_variables(config_id: int) -> tuple[str, ...]:
    """Which covariates receive missing values under a grid row."""
    if config_id == 6:
        return ("x1",)
    if config_id == 7:
        return ("x2",)
    return ("x1", "x2")


def generate_complete(g: GenConfig, rng: RngStream) -> Dataset:
    """Draw one complete dataset under the generating model."""
    g.validate()
    gen = rng.generator
    sigma_v, sigma_x, psi = g.arrays()
    sizes = np.array(g.cluster_sizes)
    K = sizes.size
    n = int(sizes.sum())
    cluster = np.repeat(np.arange(K), sizes)
    v = mvn_sample(np.zeros(3), sigma_v, gen, size=K)

    if g.x1_type == BINARY:
        # binary x1: cluster-level logistic intercepts on the x2 scale
        p1 = expit(g.alpha2 + v[cluster, 0])
        x1 = (gen.uniform(size=n) < p1).astype(float)
        x3 = g.alpha3 + v[cluster, 2] \
            + np.sqrt(sigma_x[1, 1]) * gen.standard_normal(n)
    else:
        eps = mvn_sample(np.zeros(2), sigma_x, gen, size=n)
        x1 = g.alpha1 + v[cluster, 0] + eps[:, 0]
        x3 = g.alpha3 + v[cluster, 2] + eps[:, 1]

    eta2 = g.alpha2 + v[cluster, 1]
    p2 = expit(eta2) if g.binary_link == "logit" else stats.norm.cdf(eta2)
    x2 = (gen.uniform(size=n) < p2).astype(float)

    u = mvn_sample(np.zeros(2), psi, gen, size=K)
    lin = g.beta[0] + g.beta[1] * x1 + g.beta[2] * x2 \
        + u[cluster, 0] + u[cluster, 1] * x1
    if g.x2_random_effect_in_y:
        u2 = np.sqrt(g.x2_random_effect_var) * gen.standard_normal(K)
        lin = lin + u2[cluster] * x2
    if g.outcome_type == "continuous":
        y = lin + g.sigma_y * gen.standard_normal(n)
        y_type = CONTINUOUS
    else:
        y = (gen.uniform(size=n) < expit(lin)).astype(float)
        y_type = BINARY

    values = np.column_stack([y, x1, x2, x3])
    types = (y_type,
             BINARY if g.x1_type == BINARY else CONTINUOUS,
             BINARY, CONTINUOUS)
    return Dataset(values, np.ones_like(values, dtype=bool), cluster,
                   types, ("y", "x1", "x2", "x3"))


def _mar_probabilities(x3: np.ndarray, pi_spor: float, strength: float) -> np.ndarray:
    """Logistic missingness in standardized x3, intercept calibrated so the
    average probability equals pi_spor."""
    z = (x3 - x3.mean()) / max(x3.std(), 1e-12)

    def gap(a):
        return expit(a + strength * z).mean() - pi_spor

    lo, hi = -30.0, 30.0
    if gap(lo) > 0 or gap(hi) < 0:
        return np.full(x3.shape, pi_spor)
    a = optimize.brentq(gap, lo, hi, xtol=1e-12)
    return expit(a + strength * z)


def impose_missingness(d: Dataset, mc: MissingnessConfig, rng: RngStream,
                       variables: tuple[str, ...] = ("x1", "x2")) -> Dataset:
    """Blank covariate cells: whole clusters with probability pi_sys, then
    sporadic cells with probability pi_spor in the remaining clusters."""
    mc.validate()
    gen = rng.generator
    values = d.values.copy()
    mask = d.mask.copy()
    for name in variables:
        j = d.column(name)
        systematic = gen.uniform(size=d.n_clusters) < mc.pi_sys
        sys_rows = systematic[d.cluster]
        if mc.mechanism == "MAR":
            probs = _mar_probabilities(d.values[:, d.column("x3")],
                                       mc.pi_spor, mc.mar_strength)
        else:
            probs = np.full(d.n, mc.pi_spor)
        spor_rows = ~sys_rows & (gen.uniform(size=d.n) < probs)
        gone = sys_rows | spor_rows
        mask[gone, j] = False
        values[gone, j] = np.nan
    return Dataset(values, mask, d.cluster.copy(), d.var_types, d.names,
                   d.cluster_labels)


def _single_fit_pool(fit: AnalysisFit, estimands) -> dict:
    """Wrap one analysis fit (full or complete-case) as pooled estimates."""
    z = stats.norm.ppf(0.975)
    out = {}
    for name in estimands:
        est = fit.estimate(name)
        var = fit.variance(name)
        w = var if np.isfinite(var) else 0.0
        half = z * np.sqrt(w) if w > 0 else np.nan
        out[name] = PooledEstimate(qbar=est, within=w, between=0.0, total=w,
                                   df=np.inf,
                                   ci_low=est - half if w > 0 else np.nan,
                                   ci_high=est + half if w > 0 else np.nan)
    return out


def _complete_cases(d: Dataset) -> Dataset:
    keep = d.mask.all(axis=1)
    if not keep.any():
        raise FitError("no complete cases left")
    cluster = d.cluster[keep]
    present = np.unique(cluster)
    remap = {int(c): i for i, c in enumerate(present)}
    dense = np.array([remap[int(c)] for c in cluster], dtype=int)
    labels = tuple(d.cluster_labels[int(c)] for c in present)
    return Dataset(d.values[keep], d.mask[keep], dense, d.var_types,
                   d.names, labels)


_FCS_TAGS = {
    "fcs_glm": "glm",
    "fcs_2stage_reml": "twostage_reml",
    "fcs_2stage_mm": "twostage_mm",
    "fcs_noclust": "noclust",
    "fcs_fixclust": "fixclust",
    "fcs_fixclust_pmm": "pmm_fixclust",
    "fcs_2lnorm": "twolnorm",
}


def _impute_with(method: str, d: Dataset, rc: RunConfig, rng: RngStream):
    if method in ("jm_jomo", "jm_pan"):
        hyper = JmHyper.default(d.p, d.n_clusters,
                                homoscedastic=(method == "jm_pan"),
                                binary_as_continuous=(method == "jm_pan"))
        return jm_impute(d, hyper, m=rc.m, burnin=rc.burnin, thin=rc.thin,
                         rng=rng)
    tag = _FCS_TAGS[method]
    incomplete = {d.names[j]: tag for j in range(d.p)
                  if not d.mask[:, j].all()}
    plan = FcsPlan(methods=incomplete, cycles=rc.cycles)
    return fcs_impute(d, plan, m=rc.m, rng=rng)


def _estimands_for(g: GenConfig) -> tuple[str, ...]:
    if g.outcome_type == "binary":
        return tuple(e for e in ESTIMANDS if e != "sigma_y")
    return ESTIMANDS


def _truths(g: GenConfig) -> dict:
    _, _, psi = g.arrays()
    truths = {"beta0": g.beta[0], "beta1": g.beta[1], "beta2": g.beta[2],
              "sqrt_psi00": float(np.sqrt(psi[0, 0])),
              "sqrt_psi11": float(np.sqrt(psi[1, 1]))}
    if g.outcome_type == "continuous":
        truths["sigma_y"] = g.sigma_y
    return truths


def _run_replication(args):
    """One replication: generate, blank, impute per method, pool.

    Returns (t, {method: pooled dict or error string}, {method: seconds}).
    """
    rc, g, mc, variables, t = args
    rep_rng = RngStream(rc.seed, stream_id=1, path=(t,))
    complete = generate_complete(g, rep_rng.substream(0))
    incomplete = impose_missingness(complete, mc, rep_rng.substream(1),
                                    variables=variables)
    estimands = _estimands_for(g)
    pooled: dict = {}
    seconds: dict = {}
    for i, method in enumerate(rc.methods):
        start = time.perf_counter()
        try:
            if method == "full":
                fit = fit_analysis_model(complete, g.outcome_type)
                if not fit.converged:
                    raise FitError("analysis fit did not converge")
                pooled[method] = _single_fit_pool(fit, estimands)
            elif method == "cc":
                fit = fit_analysis_model(_complete_cases(incomplete),
                                         g.outcome_type)
                if not fit.converged:
                    raise FitError("analysis fit did not converge")
                pooled[method] = _single_fit_pool(fit, estimands)
            else:
                imp = _impute_with(method, incomplete, rc,
                                   rep_rng.substream(2 + i))
                fits = [fit_analysis_model(c, g.outcome_type)
                        for c in imp.datasets]
                pooled[method] = {e: rubin_pool(fits, e) for e in estimands}
        except (FitError, FcsError, SamplerError, ValueError,
                np.linalg.LinAlgError) as exc:
            pooled[method] = f"{type(exc).__name__}: {exc}"
        seconds[method] = time.perf_counter() - start
    return t, pooled, seconds


@dataclass
class Report:
    run: RunConfig
    criteria: dict            # method -> CriteriaTable
    raw_rows: list[dict]
    timings: dict             # method -> mean seconds per replication
    failures: dict            # method -> list of (t, message)

    def write(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        crit_path = os.path.join(out_dir, "criteria.csv")
        rows = []
        for method, table in self.criteria.items():
            for row in table.rows:
                rows.append({"method": method, **row})
        if rows:
            with open(crit_path, "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
                writer.writeheader()
                writer.writerows(rows)
        with open(os.path.join(out_dir, "raw.csv"), "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["replication", "method",
                                                    "estimand", "estimate",
                                                    "se", "ci_low", "ci_high"])
            writer.writeheader()
            writer.writerows(self.raw_rows)
        with open(os.path.join(out_dir, "timings.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "mean_seconds_per_dataset"])
            for method, secs in self.timings.items():
                writer.writerow([method, f"{secs:.6f}"])
        g, mc = self.run.resolve()
        echo = {"run": {k: v for k, v in asdict(self.run).items()
                        if k not in ("gen", "missing")},
                "gen": asdict(g), "missing": asdict(mc),
                "failures": {m: len(v) for m, v in self.failures.items()}}
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            json.dump(echo, fh, indent=2, default=list)


def run_configuration(rc: RunConfig, out_dir=None, jobs: int = 1) -> Report:
    """Execute the full replication loop for one configuration."""
    rc.validate()
    g, mc = rc.resolve()
    variables = missing_variables(rc.config_id) \
        if rc.gen is None and rc.missing is None else ("x1", "x2")
    estimands = _estimands_for(g)
    truths = _truths(g)
    args = [(rc, g, mc, variables, t) for t in range(rc.t)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_replication, args))
    else:
        results = [_run_replication(a) for a in args]
    results.sort(key=lambda r: r[0])

    per_method: dict = {m: [] for m in rc.methods}
    failures: dict = {m: [] for m in rc.methods}
    seconds: dict = {m: [] for m in rc.methods}
    raw_rows = []
    for t, pooled, secs in results:
        for method in rc.methods:
            seconds[method].append(secs[method])
            res = pooled[method]
            if isinstance(res, str):
                failures[method].append((t, res))
                continue
            per_method[method].append(res)
            for e in estimands:
                pe = res[e]
                raw_rows.append({"replication": t, "method": method,
                                 "estimand": e, "estimate": pe.qbar,
                                 "se": float(np.sqrt(pe.total)),
                                 "ci_low": pe.ci_low, "ci_high": pe.ci_high})

    criteria = {}
    for method in rc.methods:
        if len(per_method[method]) >= 2:
            criteria[method] = evaluate_replications(
                per_method[method], truths,
                n_failed=len(failures[method]))
        else:
            criteria[method] = CriteriaTable(rows=[])
    timings = {m: float(np.mean(seconds[m])) if seconds[m] else np.nan
               for m in rc.methods}
    report = Report(run=rc, criteria=criteria, raw_rows=raw_rows,
                    timings=timings, failures=failures)
    if out_dir is not None:
        report.write(out_dir)
    return report
