"""Command-line entry points: impute, simulate, pool, inspect.

Configuration comes from a JSON file mirroring the run dataclasses plus
dotted-path overrides on the command line; every run echoes its resolved
configuration into the output directory. Exit codes: 0 success, 1
configuration or input error, 2 irrecoverable method failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .data import DataError, Dataset, load_dataset, missingness_pattern, \
    write_imputed
from .fcs import FcsError, FcsPlan, fcs_impute
from .jm import JmHyper, SamplerError, jm_impute
from .lmm import FitError
from .pooling import ESTIMANDS, fit_analysis_model, rubin_pool
from .rng import RngStream
from .simulate import ConfigError, GenConfig, MissingnessConfig, RunConfig, \
    METHODS, run_configuration
from . import __version__

log = logging.getLogger("mlmi")

IMPUTE_METHODS = tuple(m for m in METHODS if m not in ("full", "cc"))


class _Parser(argparse.ArgumentParser):
    """argparse variant that reports usage problems with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _parse_schema(text: str) -> dict:
    schema = {}
    for part in text.split(","):
        if "=" not in part:
            raise ConfigError(f"schema entry {part!r} must be name=type")
        name, vtype = part.split("=", 1)
        schema[name.strip()] = vtype.strip()
    return schema


def _load(args) -> Dataset:
    return load_dataset(args.input, _parse_schema(args.schema),
                        args.cluster_column, missing_token=args.missing_token)


def _set_dotted(config: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must be key=value")
    path, raw = assignment.split("=", 1)
    keys = path.strip().split(".")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {path!r} crosses a scalar")
    node[keys[-1]] = value


def _run_config_from(args) -> RunConfig:
    config: dict = {}
    if args.config:
        with open(args.config) as fh:
            config = json.load(fh)
    for assignment in args.set or []:
        _set_dotted(config, assignment)
    run_part = dict(config.get("run", {}))
    for field_name in ("config_id", "t", "m", "seed", "burnin", "thin",
                       "cycles"):
        cli_val = getattr(args, field_name, None)
        if cli_val is not None:
            run_part[field_name] = cli_val
    if args.methods is not None:
        run_part["methods"] = tuple(s.strip() for s in args.methods.split(","))
    elif "methods" in run_part:
        run_part["methods"] = tuple(run_part["methods"])
    gen = None
    missing = None
    if "gen" in config:
        gen_part = dict(config["gen"])
        if "cluster_sizes" in gen_part:
            gen_part["cluster_sizes"] = tuple(gen_part["cluster_sizes"])
        for key in ("sigma_v", "sigma_x", "psi"):
            if key in gen_part:
                gen_part[key] = tuple(map(tuple, gen_part[key]))
        gen = GenConfig(**gen_part)
    if "missing" in config:
        missing = MissingnessConfig(**config["missing"])
    try:
        rc = RunConfig(gen=gen, missing=missing, **run_part)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    rc.validate()
    return rc


def _cmd_impute(args) -> int:
    if args.method not in IMPUTE_METHODS:
        raise ConfigError(f"unknown method {args.method!r}; valid: "
                          f"{', '.join(IMPUTE_METHODS)}")
    if args.m < 2:
        raise ConfigError("m must be at least 2")
    d = _load(args)
    if d.is_complete():
        log.warning("input is complete; the %d outputs will be identical",
                    args.m)
    rng = RngStream(args.seed)
    os.makedirs(args.output_dir, exist_ok=True)
    diag = os.path.join(args.output_dir, "diagnostics.csv")
    if args.method in ("jm_jomo", "jm_pan"):
        hyper = JmHyper.default(d.p, d.n_clusters,
                                homoscedastic=(args.method == "jm_pan"),
                                binary_as_continuous=(args.method == "jm_pan"))
        imputed = jm_impute(d, hyper, m=args.m, burnin=args.burnin,
                            thin=args.thin, rng=rng, diagnostics_path=diag)
    else:
        tag = {"fcs_glm": "glm", "fcs_2stage_reml": "twostage_reml",
               "fcs_2stage_mm": "twostage_mm", "fcs_noclust": "noclust",
               "fcs_fixclust": "fixclust", "fcs_fixclust_pmm": "pmm_fixclust",
               "fcs_2lnorm": "twolnorm"}[args.method]
        plan = FcsPlan(methods={d.names[j]: tag for j in range(d.p)
                                if not d.mask[:, j].all()},
                       cycles=args.cycles)
        imputed = fcs_impute(d, plan, m=args.m, rng=rng,
                             diagnostics_path=diag)
    paths = write_imputed(imputed, args.output_dir,
                          cluster_column=args.cluster_column)
    resolved = {"command": "impute", "method": args.method, "m": args.m,
                "seed": args.seed, "burnin": args.burnin, "thin": args.thin,
                "cycles": args.cycles, "input": args.input,
                "schema": _parse_schema(args.schema),
                "cluster_column": args.cluster_column,
                "version": __version__}
    with open(os.path.join(args.output_dir, "resolved_config.json"), "w") as fh:
        json.dump(resolved, fh, indent=2)
    for p in paths:
        print(p)
    return 0


def _cmd_simulate(args) -> int:
    rc = _run_config_from(args)
    report = run_configuration(rc, out_dir=args.output_dir, jobs=args.jobs)
    for method, table in report.criteria.items():
        for row in table.rows:
            print(f"{method:18s} {row['estimand']:11s} "
                  f"est={row['mean_estimate']: .5f} "
                  f"bias={row['bias']: .2f}({row['bias_kind']}) "
                  f"model_se={row['model_se']:.5f} "
                  f"emp_se={row['empirical_se']:.5f} "
                  f"coverage={row['coverage_pct']} rmse={row['rmse']:.5f}")
        if not table.rows:
            print(f"{method:18s} no successful replications")
    return 0


def _cmd_pool(args) -> int:
    schema = _parse_schema(args.schema)
    fits = []
    for path in args.inputs:
        d = load_dataset(path, schema, args.cluster_column,
                         missing_token=args.missing_token)
        if not d.is_complete():
            raise ConfigError(f"{path}: pooled inputs must be complete")
        fits.append(fit_analysis_model(d, args.outcome_type))
    estimands = [e for e in ESTIMANDS
                 if not (args.outcome_type == "binary" and e == "sigma_y")]
    print("estimand,qbar,within,between,total,df,ci_low,ci_high")
    for e in estimands:
        pe = rubin_pool(fits, e)
        print(f"{e},{pe.qbar:.8g},{pe.within:.8g},{pe.between:.8g},"
              f"{pe.total:.8g},{pe.df:.6g},{pe.ci_low:.8g},{pe.ci_high:.8g}")
    return 0


def _cmd_inspect(args) -> int:
    d = _load(args)
    summary = missingness_pattern(d)
    print(f"rows: {d.n}  columns: {d.p}  clusters: {d.n_clusters}")
    sizes = d.cluster_sizes()
    print(f"cluster sizes: min {sizes.min()}  max {sizes.max()}")
    for j, name in enumerate(d.names):
        frac = 1.0 - d.mask[:, j].mean()
        kinds = summary.classification[:, j]
        n_sys = int((kinds == "systematic").sum())
        n_spor = int((kinds == "sporadic").sum())
        print(f"{name} ({d.var_types[j]}): missing {frac:.3f}, "
              f"{n_sys} systematic and {n_spor} sporadic clusters")
    return 0


def _add_data_args(p):
    p.add_argument("--input", required=True, help="input CSV path")
    p.add_argument("--schema", required=True,
                   help="comma list name=continuous|binary")
    p.add_argument("--cluster-column", default="cluster")
    p.add_argument("--missing-token", default="NA")


def build_parser() -> _Parser:
    parser = _Parser(prog="mlmi",
                     description="Multiple imputation for two-level data "
                                 "with missing continuous and binary "
                                 "variables.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("impute", help="multiply impute one dataset")
    _add_data_args(p)
    p.add_argument("--method", required=True)
    p.add_argument("--m", type=int, default=5)
    p.add_argument("--burnin", type=int, default=2000)
    p.add_argument("--thin", type=int, default=1000)
    p.add_argument("--cycles", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=_cmd_impute)

    p = sub.add_parser("simulate", help="run a benchmark configuration")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--config-id", type=int, default=None)
    p.add_argument("--t", type=int, default=None)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--methods", default=None,
                   help="comma list of method names")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--burnin", type=int, default=None)
    p.add_argument("--thin", type=int, default=None)
    p.add_argument("--cycles", type=int, default=None)
    p.add_argument("--set", action="append", metavar="PATH=VALUE",
                   help="dotted-path config override")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("pool", help="pool analysis fits of completed CSVs")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--cluster-column", default="cluster")
    p.add_argument("--missing-token", default="NA")
    p.add_argument("--outcome-type", default="continuous",
                   choices=("continuous", "binary"))
    p.set_defaults(func=_cmd_pool)

    p = sub.add_parser("inspect", help="summarize a dataset's missingness")
    _add_data_args(p)
    p.set_defaults(func=_cmd_inspect)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigError, DataError, OSError, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        return 1
    except (FcsError, SamplerError, FitError, ValueError,
            np.linalg.LinAlgError) as exc:
        log.error("method failure: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
