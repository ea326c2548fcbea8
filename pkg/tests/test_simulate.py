import csv
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exactsde import catalog
from exactsde.diffeo import identity_diffeo
from exactsde.errors import NonCommutative, NoSurvivors, OdeEscape
from exactsde.numerics import Box, Grid
from exactsde.representation import CanonicalParams, build_representation
from exactsde.simulate import (
    NEVER,
    PathBundle,
    couple_and_compare,
    euler_maruyama,
    milstein,
    moment_stats,
    precompute_increment_laws,
    sample_moments,
    simulate_exact,
    stepping_grid,
)


@lru_cache(maxsize=None)
def _setup(mid, t_end=1.0, n=11, **overrides):
    e = catalog.get(mid, **overrides)
    grid = Grid.uniform(e.s0, e.s0 + t_end, n)
    return e, grid, build_representation(e.params, e.diffeo, e.x0, e.s0, grid)


# -- increment laws ------------------------------------------------------------


def test_identity_transport_gives_step_covariance():
    e, grid, rep = _setup("bm")
    for law, dt in zip(precompute_increment_laws(rep, grid), grid.steps):
        np.testing.assert_allclose(law.cov, [[dt]], atol=1e-15)


@settings(max_examples=15)
@given(st.floats(-1.5, 1.5).filter(lambda b: abs(b) > 1e-2))
def test_scalar_increment_variance(beta):
    s = 0.1
    grid = Grid.uniform(s, 1.1, 6)
    params = CanonicalParams.constant(1, 1, 1, beta=[[beta]])
    rep = build_representation(params, identity_diffeo(1, 1, Box([-50.0], [50.0])), np.zeros(1), s, grid)
    for law in precompute_increment_laws(rep, grid):
        want = (np.exp(-2 * beta * (law.t0 - s)) - np.exp(-2 * beta * (law.t1 - s))) / (2 * beta)
        assert abs(law.cov[0, 0] - want) <= 1e-8 * max(1.0, want)


def test_constant_kappa_increments():
    kap = 0.5
    grid = Grid.uniform(0.0, 1.0, 6)
    params = CanonicalParams.constant(2, 2, 1, kappa=[[kap]])
    rep = build_representation(params, identity_diffeo(2, 2, Box([-9, -9], [9, 9])), np.zeros(2), 0.0, grid)
    for law in precompute_increment_laws(rep, grid):
        dt = law.t1 - law.t0
        np.testing.assert_allclose(law.cov, dt * np.eye(2), atol=1e-14)
        # the chart coordinate moves by G U^{-1} dY = dW_1 + kappa dW_2
        G = rep.G(law.t1) @ rep.Uinv(law.t1)
        np.testing.assert_allclose(G @ law.cov @ G.T, [[dt * (1 + kap**2)]], atol=1e-14)


def test_increment_covariances_are_psd():
    e, grid, rep = _setup("heisenberg")
    for law in precompute_increment_laws(rep, grid):
        assert np.allclose(law.cov, law.cov.T)
        assert np.linalg.eigvalsh(law.cov).min() > 0
        np.testing.assert_allclose(law.factor @ law.factor.T, law.cov + law.jitter * np.eye(2), atol=1e-14)


def test_grid_past_validity_is_rejected():
    e, grid, rep = _setup("bm")
    with pytest.raises(OdeEscape):
        precompute_increment_laws(rep, Grid.uniform(0.0, 1.5, 4))
    with pytest.raises(ValueError):
        simulate_exact(rep, Grid.uniform(0.5, 1.0, 3), 10, 0)


# -- exact sampler ---------------------------------------------------------------


def test_brownian_motion_mean():
    e, grid, rep = _setup("bm")
    n = 100_000
    b = simulate_exact(rep, grid, n, 11)
    assert abs(b.states[:, -1, 0].mean()) <= 3 * np.sqrt(1.0 / n)
    assert abs(b.states[:, -1, 0].var() - 1.0) <= 3 * np.sqrt(2.0 / n)


def test_exact_sampler_is_reproducible_and_thread_independent():
    e, grid, rep = _setup("heisenberg")
    a = simulate_exact(rep, grid, 5000, 4, model=e.model, threads=1, block_size=1024)
    b = simulate_exact(rep, grid, 5000, 4, model=e.model, threads=3, block_size=1024)
    assert np.array_equal(a.states, b.states, equal_nan=True)
    assert np.array_equal(a.exit_index, b.exit_index)
    c = simulate_exact(rep, grid, 3000, 4, model=e.model, block_size=1024)
    assert np.array_equal(a.states[:3000], c.states, equal_nan=True)
    d = simulate_exact(rep, grid, 5000, 5, model=e.model, block_size=1024)
    assert not np.array_equal(a.states, d.states)


def test_successive_increments_are_uncorrelated():
    e, grid, rep = _setup("bm")
    n = 50_000
    b = simulate_exact(rep, grid, n, 2)
    dY = np.diff(b.states[:, :, 0], axis=1) / np.sqrt(grid.steps)
    for k in range(dY.shape[1] - 1):
        assert abs(np.corrcoef(dY[:, k], dY[:, k + 1])[0, 1]) <= 3 / np.sqrt(n)


@pytest.mark.parametrize("mid", ["ou", "gbm", "cir_const", "heisenberg"])
def test_marginals_do_not_depend_on_output_grid(mid):
    e, coarse, rep_c = _setup(mid, n=3)
    _, fine, rep_f = _setup(mid, n=21)
    n = 20_000
    a = moment_stats(simulate_exact(rep_c, coarse, n, 1, model=e.model), 1.0)
    b = moment_stats(simulate_exact(rep_f, fine, n, 2, model=e.model), 1.0)
    se = np.sqrt(a.mean_se**2 + b.mean_se**2)
    assert np.all(np.abs(a.mean - b.mean) <= 3.5 * se)
    vse = np.sqrt(a.var_se**2 + b.var_se**2)
    assert np.all(np.abs(np.diag(a.cov) - np.diag(b.cov)) <= 3.5 * vse)


def test_ou_exact_moments():
    e, grid, rep = _setup("ou")
    ms = moment_stats(simulate_exact(rep, grid, 50_000, 9, model=e.model), 1.0)
    assert abs(ms.mean[0] - e.expected["mean"](1.0)[0]) <= 3 * ms.mean_se[0]
    assert abs(ms.cov[0, 0] - e.expected["var"](1.0)[0, 0]) <= 3 * ms.var_se[0]


def test_cir_survival_decreases_without_feller():
    e, _, _ = _setup("cir_const")
    low = catalog.get("cir_const", x0=0.05)
    grid = Grid.uniform(0.0, 1.9, 20)
    rep = build_representation(low.params, low.diffeo, low.x0, 0.0, grid)
    b = simulate_exact(rep, grid, 20_000, 3, model=low.model)
    surv = b.survival()
    assert surv[0] == 1.0
    assert np.all(np.diff(surv) <= 0)
    assert surv[-1] < surv[len(surv) // 2] < 1.0
    dead = b.exit_index != NEVER
    k = b.exit_index[dead]
    assert np.all(np.isnan(b.states[dead, -1]))
    assert np.all(np.isfinite(b.states[np.flatnonzero(dead), k - 1]))


# -- path bundles and statistics -------------------------------------------------


def test_bundle_csv(tmp_path):
    e, grid, rep = _setup("gbm", n=4)
    b = simulate_exact(rep, grid, 7, 0, model=e.model)
    path = tmp_path / "p.csv"
    b.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["path", "t", "x1", "x2", "alive"]
    assert len(rows) == 1 + 7 * 4
    assert rows[5][0] == "1" and float(rows[5][1]) == grid.nodes[0]
    np.testing.assert_array_equal([float(v) for v in rows[2][2:4]], b.states[0, 1])


def test_moment_stats_of_deterministic_bundle():
    grid = Grid.uniform(0.0, 1.0, 3)
    states = np.broadcast_to(np.array([1.0, 2.0]), (50, 3, 2)).copy()
    b = PathBundle(grid, states, np.full(50, NEVER), 0, "exact", 16, 0.0)
    ms = moment_stats(b, 0.5)
    assert np.array_equal(ms.cov, np.zeros((2, 2)))
    assert ms.survival == 1.0 and ms.n_alive == 50


def test_sample_moments_clt():
    n = 100_000
    x = np.random.default_rng(0).standard_normal((n, 1))
    ms = sample_moments(x)
    assert abs(ms.mean[0]) <= 3 / np.sqrt(n)
    np.testing.assert_allclose(ms.mean_se, 1 / np.sqrt(n), rtol=0.02)
    np.testing.assert_allclose(ms.var_se, np.sqrt(2 / n), rtol=0.05)


def test_no_survivors():
    grid = Grid.uniform(0.0, 1.0, 3)
    states = np.full((4, 3, 1), np.nan)
    states[:, 0] = 0.0
    b = PathBundle(grid, states, np.ones(4, dtype=int), 0, "exact", 16, 0.0)
    with pytest.raises(NoSurvivors):
        moment_stats(b, 1.0)
    assert moment_stats(b, 0.0).n_alive == 4


# -- time-stepping baselines ---------------------------------------------------------


def test_euler_is_exact_for_brownian_motion():
    e, grid, rep = _setup("bm")
    a = simulate_exact(rep, grid, 2000, 8)
    b = euler_maruyama(e.model, grid, 2000, 8, e.x0)
    assert np.array_equal(a.states, b.states)


def test_milstein_reduces_to_euler_for_constant_noise():
    e, grid, _ = _setup("ou")
    a = euler_maruyama(e.model, grid, 1000, 2, e.x0)
    b = milstein(e.model, grid, 1000, 2, e.x0)
    assert np.array_equal(a.states, b.states)


def test_milstein_needs_commuting_noise():
    e = catalog.get("heisenberg_asym")
    with pytest.raises(NonCommutative):
        milstein(e.model, Grid.uniform(0.0, 1.0, 3), 10, 0, e.x0)


def test_euler_weak_error_on_gbm():
    e = catalog.get("gbm")
    dt = 2.0**-10
    out = Grid.uniform(0.0, 1.0, 3)
    b = euler_maruyama(e.model, stepping_grid(0.0, 1.0, dt, out), 10_000, 5, e.x0, output_grid=out)
    ms = moment_stats(b, 1.0)
    want = e.expected["mean"](1.0)
    assert np.all(np.abs(ms.mean - want) <= 5 * dt * np.abs(want) + 3 * ms.mean_se)


def test_cir_full_truncation_matches_exact_moments():
    e, grid, rep = _setup("cir_const")
    ex = moment_stats(simulate_exact(rep, grid, 20_000, 1, model=e.model), 1.0)
    fine = stepping_grid(0.0, 1.0, 2.0**-8, grid)
    eu = euler_maruyama(e.model, fine, 20_000, 2, e.x0, output_grid=grid)
    assert np.all(np.isfinite(eu.states[eu.alive(len(grid) - 1), -1]))
    ms = moment_stats(eu, 1.0)
    se = np.sqrt(ex.mean_se**2 + ms.mean_se**2)
    assert abs(ms.mean[0] - ex.mean[0]) <= 3 * se[0] + 2.0**-8


def test_stepping_grid_merges_output_nodes():
    out = Grid.uniform(0.0, 1.0, 4)
    g = stepping_grid(0.0, 1.0, 0.25, out)
    assert g.nests(out)
    assert g.nests(Grid.from_step(0.0, 1.0, 0.25))
    assert len(g) == 7


# -- coupling ------------------------------------------------------------------------


def test_brownian_coupling_has_no_error():
    e, grid, _ = _setup("bm")
    fine = Grid.from_step(0.0, 1.0, 2.0**-6)
    rep = build_representation(e.params, e.diffeo, e.x0, 0.0, fine)
    tab = couple_and_compare(rep, e.model, fine, Grid.uniform(0.0, 1.0, 5), 500, 1)
    for errs in tab.errors.values():
        assert np.max(errs) <= 1e-12


def test_coupling_needs_nested_grids():
    e, grid, _ = _setup("bm")
    fine = Grid.from_step(0.0, 1.0, 0.3 / 3)
    rep = build_representation(e.params, e.diffeo, e.x0, 0.0, fine)
    with pytest.raises(ValueError):
        couple_and_compare(rep, e.model, fine, Grid.uniform(0.0, 1.0, 4), 10, 0)


def test_coupling_preserves_exact_marginals():
    from exactsde.simulate import coupled_paths

    e = catalog.get("gbm", d=1)
    fine = Grid.from_step(0.0, 1.0, 2.0**-6)
    out = Grid.uniform(0.0, 1.0, 3)
    rep = build_representation(e.params, e.diffeo, e.x0, 0.0, fine)
    run = coupled_paths(rep, e.model, fine, out, 20_000, 4)
    logs = sample_moments(np.log(run.exact[:, -1]))
    mu, C = e.expected["log_moments"](1.0)
    assert abs(logs.mean[0] - mu[0]) <= 3 * logs.mean_se[0]
    assert abs(logs.cov[0, 0] - C[0, 0]) <= 3 * logs.var_se[0]
