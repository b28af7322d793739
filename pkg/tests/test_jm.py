"""Data-augmentation sampler: state invariants, conjugate-update wiring,
and Monte-Carlo marginal checks."""
import csv

import numpy as np
import pytest

import mlmi.jm as jm
from mlmi.data import BINARY, CONTINUOUS, Dataset
from mlmi.jm import (DEFAULT_BURNIN, DEFAULT_THIN, JmHyper, geweke_z, jm_impute,
                     jm_init, jm_step)
from mlmi.rng import RngStream


def mixed_dataset(seed=0, K=6, n_k=25, miss=0.2):
    rng = np.random.default_rng(seed)
    n = K * n_k
    cluster = np.repeat(np.arange(K), n_k)
    b = rng.normal(0.0, 0.5, K)
    x = 1.0 + b[cluster] + rng.normal(0.0, 1.0, n)
    z = (rng.random(n) < 0.4).astype(float)
    values = np.column_stack([x, z])
    mask = rng.random((n, 2)) >= miss
    # keep at least one observation per cluster and column
    mask[::n_k] = True
    out = np.where(mask, values, np.nan)
    return Dataset(out, mask, cluster, (CONTINUOUS, BINARY), ("x", "z"))


def continuous_dataset(seed=1, K=8, n_k=30, miss=0.0, systematic_col0_cluster=None):
    rng = np.random.default_rng(seed)
    n = K * n_k
    cluster = np.repeat(np.arange(K), n_k)
    values = np.column_stack([
        5.0 + rng.normal(0.0, 1.0, n),
        rng.normal(0.0, 1.0, n),
    ])
    mask = rng.random((n, 2)) >= miss
    mask[::n_k] = True
    if systematic_col0_cluster is not None:
        mask[cluster == systematic_col0_cluster, 0] = False
    out = np.where(mask, values, np.nan)
    return Dataset(out, mask, cluster, (CONTINUOUS, CONTINUOUS), ("a", "b"))


def test_init_complete_data_copies_latents():
    d = continuous_dataset(miss=0.0)
    state = jm_init(d, JmHyper.default(d.p, d.n_clusters), RngStream(0))
    assert np.array_equal(state.latents, d.values)
    assert state.iteration == 0
    assert np.all(state.b == 0.0)


def test_init_systematic_column_uses_grand_mean():
    d = continuous_dataset(systematic_col0_cluster=2)
    state = jm_init(d, JmHyper.default(d.p, d.n_clusters), RngStream(0))
    grand = d.values[d.mask[:, 0], 0].mean()
    rows = d.cluster == 2
    assert np.allclose(state.latents[rows, 0], grand)


def test_init_binary_latents_sign_consistent():
    d = mixed_dataset()
    state = jm_init(d, JmHyper.default(d.p, d.n_clusters), RngStream(0))
    obs = d.mask[:, 1]
    expected = np.where(d.values[obs, 1] > 0.5, 0.5, -0.5)
    assert np.array_equal(state.latents[obs, 1], expected)
    # missing binary latents start at 0
    assert np.all(state.latents[~obs, 1] == 0.0)


def test_default_hyperparameters():
    h = JmHyper.default(4, 28)
    assert h.nu1 == 4.0 and h.eta == 112.0 and h.nu3 == 112.0
    assert np.array_equal(h.lambda1, np.eye(4))
    assert np.array_equal(h.lambda3, np.eye(4) / 8.0)
    assert not h.homoscedastic


def test_psi_update_degrees_of_freedom(monkeypatch):
    # the between-cluster precision draw must use df = nu1 + K (= 2 + 28)
    d = mixed_dataset(K=28, n_k=5, miss=0.1)
    hyper = JmHyper.default(d.p, d.n_clusters)
    state = jm_init(d, hyper, RngStream(0))
    calls = []
    real = jm.wishart_sample

    def spy(df, scale, rng):
        calls.append((float(df), np.asarray(scale).shape))
        return real(df, scale, rng)

    monkeypatch.setattr(jm, "wishart_sample", spy)
    jm_step(state, d, hyper, RngStream(0, path=(1,)))
    assert calls[0][0] == hyper.nu1 + 28 == 30.0
    assert calls[0][1] == (2, 2)
    # per-cluster residual precisions follow with df = nu2 + n_k
    sizes = d.cluster_sizes()
    for k in range(28):
        assert calls[1 + k][0] == state.params.nu2 + sizes[k]


def test_step_is_pure_and_preserves_invariants():
    d = mixed_dataset()
    hyper = JmHyper.default(d.p, d.n_clusters)
    rng = RngStream(42)
    state = jm_init(d, hyper, rng)
    before = state.latents.copy()
    obs_bin = d.mask[:, 1]
    obs_cont = d.mask[:, 0]
    for it in range(20):
        state = jm_step(state, d, hyper, rng.substream(it))
        # observed continuous cells never move
        assert np.array_equal(state.latents[obs_cont, 0], d.values[obs_cont, 0])
        # sign consistency of observed binary latents
        signs = np.sign(state.latents[obs_bin, 1])
        assert np.array_equal(signs, 2.0 * d.values[obs_bin, 1] - 1.0)
        # unit diagonal on the latent-binary coordinate
        assert np.abs(state.params.sigma[:, 1, 1] - 1.0).max() < 1e-10
    # input state untouched (first step operated on a copy)
    assert np.array_equal(before[obs_cont, 0], d.values[obs_cont, 0])
    assert state.iteration == 20


def test_homoscedastic_sigmas_identical():
    d = mixed_dataset(seed=3)
    hyper = JmHyper.default(d.p, d.n_clusters, homoscedastic=True,
                            binary_as_continuous=True)
    rng = RngStream(7)
    state = jm_init(d, hyper, rng)
    for it in range(5):
        state = jm_step(state, d, hyper, rng.substream(it))
        for k in range(1, d.n_clusters):
            assert np.array_equal(state.params.sigma[k], state.params.sigma[0])


def test_complete_data_latents_never_change():
    d = continuous_dataset(miss=0.0)
    hyper = JmHyper.default(d.p, d.n_clusters)
    rng = RngStream(5)
    state = jm_init(d, hyper, rng)
    for it in range(5):
        state = jm_step(state, d, hyper, rng.substream(it))
        assert np.array_equal(state.latents, d.values)


def test_impute_outputs_and_defaults(tmp_path):
    assert DEFAULT_BURNIN == 2000 and DEFAULT_THIN == 1000
    d = mixed_dataset(seed=4)
    diag = tmp_path / "diag.csv"
    imp = jm_impute(d, m=3, burnin=10, thin=4, rng=RngStream(11),
                    diagnostics_path=str(diag))
    assert imp.m == 3
    for comp in imp.datasets:
        assert comp.is_complete()
        assert np.array_equal(comp.values[d.mask], d.values[d.mask])
        # decoded binary cells are categories
        assert np.isin(comp.values[:, 1], (0.0, 1.0)).all()
    # imputations from distinct chain snapshots differ
    assert not np.array_equal(imp.datasets[0].values, imp.datasets[1].values)
    with open(diag) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iteration", "beta_x", "beta_z", "psi_x", "psi_z", "nu2"]
    assert len(rows) - 1 == 10 + 2 * 4 + 1


def test_impute_requires_m_at_least_two():
    d = mixed_dataset()
    with pytest.raises(ValueError):
        jm_impute(d, m=1, burnin=2, thin=1, rng=RngStream(0))


def test_impute_seed_reproducible():
    d = mixed_dataset(seed=8)
    a = jm_impute(d, m=2, burnin=5, thin=2, rng=RngStream(3))
    b = jm_impute(d, m=2, burnin=5, thin=2, rng=RngStream(3))
    for da, db in zip(a.datasets, b.datasets):
        assert np.array_equal(da.values, db.values)


def test_pan_variant_relabels_binary_columns():
    d = mixed_dataset(seed=9)
    hyper = JmHyper.default(d.p, d.n_clusters, homoscedastic=True,
                            binary_as_continuous=True)
    imp = jm_impute(d, hyper=hyper, m=2, burnin=5, thin=2, rng=RngStream(4))
    for comp in imp.datasets:
        assert comp.var_types == (CONTINUOUS, CONTINUOUS)
        assert np.array_equal(comp.values[d.mask], d.values[d.mask])


def test_systematic_cluster_marginal_mean():
    # a fully systematic column in one cluster: its long-run imputation
    # mean must match the fixed-effect mean learned from the other clusters
    d = continuous_dataset(seed=12, K=8, n_k=30, systematic_col0_cluster=0)
    hyper = JmHyper.default(d.p, d.n_clusters)
    rng = RngStream(6)
    state = jm_init(d, hyper, rng)
    rows = d.cluster == 0
    means = []
    for it in range(400):
        state = jm_step(state, d, hyper, rng.substream(it))
        if it >= 100:
            means.append(state.latents[rows, 0].mean())
    assert abs(np.mean(means) - 5.0) < 0.5


def test_geweke_z_behaviour():
    gen = np.random.default_rng(0)
    stationary = gen.standard_normal(4000)
    assert abs(geweke_z(stationary)) < 3.0
    trending = np.linspace(0.0, 5.0, 4000) + gen.standard_normal(4000)
    assert abs(geweke_z(trending)) > 5.0
