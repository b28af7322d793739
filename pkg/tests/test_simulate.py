"""Simulation harness: generation moments, missingness calibration,
configuration grid fidelity and reproducibility."""
import json

import numpy as np
import pytest
from scipy.special import expit, logit

from mlmi.data import BINARY, CONTINUOUS
from mlmi.simulate import (EQUAL_SIZE_OPTIONS, GREAT_SIZES, METHODS,
                           ConfigError, GenConfig, MissingnessConfig,
                           RunConfig, config_grid, generate_complete,
                           impose_missingness, missing_variables,
                           run_configuration)
from mlmi.rng import RngStream


def test_reference_cluster_sizes():
    assert len(GREAT_SIZES) == 28
    assert sum(GREAT_SIZES) == 11685
    assert min(GREAT_SIZES) == 18 and max(GREAT_SIZES) == 1834
    assert EQUAL_SIZE_OPTIONS == (15, 25, 50, 100, 200, 400)


def test_generate_base_case_moments():
    d = generate_complete(GenConfig(), RngStream(1))
    assert d.n == 11685 and d.n_clusters == 28 and d.p == 4
    assert d.names == ("y", "x1", "x2", "x3")
    assert d.var_types == (CONTINUOUS, CONTINUOUS, BINARY, CONTINUOUS)
    assert d.is_complete()
    x1 = d.values[:, 1]
    # Var(x1) = 0.12 + 0.36 = 0.48, ICC = 0.25
    assert abs(x1.var() - 0.48) < 0.1
    cm = np.array([x1[d.cluster == k].mean() for k in range(28)])
    icc = cm.var(ddof=1) / x1.var()
    assert abs(icc - 0.25) < 0.13
    # x2 prevalence near expit(0.42)
    assert abs(d.values[:, 2].mean() - expit(0.42)) < 0.08


def test_generate_zero_sigma_v_kills_cluster_effects():
    g = GenConfig(sigma_v=((0.0,) * 3,) * 3,
                  cluster_sizes=(500,) * 10)
    d = generate_complete(g, RngStream(2))
    x1 = d.values[:, 1]
    cm = np.array([x1[d.cluster == k].mean() for k in range(10)])
    # between-cluster variance of cluster means is sampling noise only
    assert cm.var(ddof=1) < 4 * 0.36 / 500


def test_generate_recovers_analysis_truth():
    from mlmi.pooling import fit_analysis_model
    ests = []
    for t in range(25):
        d = generate_complete(GenConfig(), RngStream(3, path=(t,)))
        ests.append(fit_analysis_model(d).beta[1])
    se = np.std(ests, ddof=1) / np.sqrt(len(ests))
    assert abs(np.mean(ests) + 0.11) < 3 * max(se, 1e-4)


def test_generate_binary_x1_and_outcome():
    g4, _ = config_grid(4)
    d = generate_complete(g4, RngStream(4))
    assert d.var_types[1] == BINARY
    assert np.isin(d.values[:, 1], (0.0, 1.0)).all()
    g5, _ = config_grid(5)
    d5 = generate_complete(g5, RngStream(5))
    assert d5.var_types[0] == BINARY
    assert np.isin(d5.values[:, 0], (0.0, 1.0)).all()


def test_missingness_calibration():
    # expected missing fraction per covariate: 0.25 + 0.75 * 0.25 = 0.4375
    g = GenConfig(cluster_sizes=(100,) * 30)
    mc = MissingnessConfig()
    fracs = []
    for t in range(100):
        d = generate_complete(g, RngStream(6, path=(t, 0)))
        dm = impose_missingness(d, mc, RngStream(6, path=(t, 1)))
        fracs.append((~dm.mask[:, 1]).mean())
        fracs.append((~dm.mask[:, 2]).mean())
        assert dm.mask[:, 0].all() and dm.mask[:, 3].all()  # y, x3 complete
    assert abs(np.mean(fracs) - 0.4375) < 0.01


def test_missingness_zero_rates_noop():
    d = generate_complete(GenConfig(cluster_sizes=(50,) * 6), RngStream(7))
    dm = impose_missingness(d, MissingnessConfig(pi_sys=0.0, pi_spor=0.0),
                            RngStream(8))
    assert dm.mask.all()
    assert np.array_equal(dm.values, d.values)


def test_mar_mechanism_recovery():
    # logistic regression of sporadic missingness on x3 recovers the
    # MAR slope on the standardized scale
    g = GenConfig(cluster_sizes=(400,) * 10)
    mc = MissingnessConfig(pi_sys=0.0, pi_spor=0.25, mechanism="MAR",
                           mar_strength=1.0)
    slopes = []
    for t in range(50):
        d = generate_complete(g, RngStream(9, path=(t, 0)))
        dm = impose_missingness(d, mc, RngStream(9, path=(t, 1)))
        x3 = d.values[:, 3]
        z = (x3 - x3.mean()) / x3.std()
        r = (~dm.mask[:, 1]).astype(float)
        from mlmi.glmm import _plain_logistic
        beta = _plain_logistic(r, np.column_stack([np.ones_like(z), z]))
        slopes.append(beta[1])
    se = np.std(slopes, ddof=1) / np.sqrt(len(slopes))
    assert abs(np.mean(slopes) - 1.0) < 2 * se + 0.05
    # and the marginal rate stays calibrated
    assert abs(np.mean(slopes) - 1.0) < 0.1


def test_grid_all_rows_resolve():
    base_g, base_mc = config_grid(1)
    assert base_g == GenConfig() and base_mc == MissingnessConfig()
    for cid in range(1, 21):
        g, mc = config_grid(cid)
        g.validate()
        mc.validate()
    with pytest.raises(ConfigError):
        config_grid(21)
    with pytest.raises(ConfigError):
        config_grid(0)


def test_grid_row_specifics():
    g2, mc2 = config_grid(2)
    assert mc2.pi_sys == 0.1 and mc2.pi_spor == 0.375 and g2 == GenConfig()
    g3, mc3 = config_grid(3)
    assert mc3.pi_sys == 0.4 and mc3.pi_spor == 0.0625
    assert config_grid(4)[0].x1_type == BINARY
    assert config_grid(5)[0].outcome_type == "binary"
    assert missing_variables(6) == ("x1",)
    assert missing_variables(7) == ("x2",)
    assert missing_variables(1) == ("x1", "x2")
    assert config_grid(8)[1].mechanism == "MAR"
    assert config_grid(9)[0].x2_random_effect_in_y
    assert config_grid(10)[0].cluster_sizes == GREAT_SIZES[:14]
    assert sum(config_grid(11)[0].cluster_sizes) in range(5700, 5900)
    assert sum(config_grid(12)[0].cluster_sizes) in range(2850, 2950)
    sv13 = np.array(config_grid(13)[0].sigma_v)
    assert np.allclose(np.diag(sv13), 0.36)
    sv14 = np.array(config_grid(14)[0].sigma_v)
    assert np.allclose(np.diag(sv14), 0.04)
    sv15 = np.array(config_grid(15)[0].sigma_v)
    assert np.allclose(sv15[0, 1] / sv15[0, 0], 0.3)
    sx16 = np.array(config_grid(16)[0].sigma_x)
    assert sx16[0, 1] == 0.18
    psi17 = np.array(config_grid(17)[0].psi)
    assert np.allclose(psi17, 2.0 * np.array(GenConfig().psi))
    psi18 = np.array(config_grid(18)[0].psi)
    rho = psi18[0, 1] / np.sqrt(psi18[0, 0] * psi18[1, 1])
    assert abs(rho + 0.3) < 1e-12
    assert config_grid(19)[0].binary_link == "probit"
    assert config_grid(20)[0].cluster_sizes == GREAT_SIZES[:7]


def test_run_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(config_id=21).validate()
    with pytest.raises(ConfigError):
        RunConfig(t=0).validate()
    with pytest.raises(ConfigError):
        RunConfig(m=1).validate()
    with pytest.raises(ConfigError):
        RunConfig(methods=("magic",)).validate()
    RunConfig().validate()
    assert set(RunConfig().methods) <= set(METHODS)


def small_run_config(methods=("full", "cc", "fcs_noclust"), t=3):
    g = GenConfig(cluster_sizes=(40,) * 8)
    return RunConfig(config_id=1, t=t, m=2, methods=methods, seed=11,
                     burnin=20, thin=5, cycles=2, gen=g,
                     missing=MissingnessConfig())


def test_run_configuration_report_files(tmp_path):
    rc = small_run_config()
    report = run_configuration(rc, out_dir=str(tmp_path))
    for name in ("criteria.csv", "raw.csv", "timings.csv", "config.json"):
        assert (tmp_path / name).exists()
    echo = json.loads((tmp_path / "config.json").read_text())
    assert echo["run"]["t"] == 3 and echo["run"]["seed"] == 11
    assert echo["missing"]["pi_sys"] == 0.25
    assert set(report.criteria) == set(rc.methods)
    for method in rc.methods:
        rows = report.criteria[method].rows
        assert [r["estimand"] for r in rows] == list(
            ("beta0", "beta1", "beta2", "sqrt_psi00", "sqrt_psi11", "sigma_y"))
        for r in rows:
            assert r["n_replications"] + r["n_failed"] == 3
    # raw rows carry one line per (replication, method, estimand)
    ok = sum(len(report.criteria[m].rows) and
             report.criteria[m].rows[0]["n_replications"]
             for m in rc.methods)
    assert len(report.raw_rows) == 6 * ok


def test_run_configuration_seed_reproducible(tmp_path):
    rc = small_run_config(methods=("full", "fcs_noclust"), t=2)
    a = run_configuration(rc, out_dir=str(tmp_path / "a"))
    b = run_configuration(rc, out_dir=str(tmp_path / "b"))
    assert a.raw_rows == b.raw_rows
    assert (tmp_path / "a" / "criteria.csv").read_text() \
        == (tmp_path / "b" / "criteria.csv").read_text()
    assert (tmp_path / "a" / "raw.csv").read_text() \
        == (tmp_path / "b" / "raw.csv").read_text()


def test_run_configuration_jm_and_2stage_smoke():
    rc = small_run_config(methods=("jm_jomo", "fcs_2stage_mm"), t=2)
    report = run_configuration(rc)
    for method in rc.methods:
        assert not report.failures[method]
        assert report.timings[method] > 0
        rows = report.criteria[method].rows
        beta1 = [r for r in rows if r["estimand"] == "beta1"][0]
        assert abs(beta1["mean_estimate"] + 0.11) < 0.2


def test_missingness_confined_to_requested_variables():
    d = generate_complete(GenConfig(cluster_sizes=(60,) * 6), RngStream(10))
    dm = impose_missingness(d, MissingnessConfig(), RngStream(11),
                            variables=("x1",))
    assert dm.mask[:, 2].all()
    assert not dm.mask[:, 1].all()
