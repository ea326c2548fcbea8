import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from exactsde import catalog
from exactsde.commutator import classify_canonical_drift
from exactsde.diffeo import identity_diffeo
from exactsde.errors import OdeEscape
from exactsde.model import SdeModel, stratonovich_to_ito, transform_sde
from exactsde.numerics import Box, Grid
from exactsde.representation import (
    CanonicalParams,
    build_representation,
    compatible_drift,
    scalar_representation,
    validate_representation,
)

POSITIVE = ["bm", "ou", "cir_const", "cir_timevar", "gbm", "heisenberg"]


def _rep(mid, t_end=1.0, n=11):
    e = catalog.get(mid)
    grid = Grid.uniform(e.s0, e.s0 + t_end, n)
    return e, build_representation(e.params, e.diffeo, e.x0, e.s0, grid)


# -- closed-form oracles -------------------------------------------------------


def test_zero_params_give_identity_transport():
    kap = 0.5
    box = Box([-5.0, -5.0], [5.0, 5.0])
    params = CanonicalParams.constant(2, 2, 1, kappa=[[kap]])
    chart = identity_diffeo(2, 2, box)
    x = np.array([0.3, -0.7])
    rep = build_representation(params, chart, x, 0.0, Grid.uniform(0.0, 1.0, 5))
    for t in (0.0, 0.4, 1.0):
        np.testing.assert_allclose(rep.T(t), np.eye(1), atol=1e-14)
        np.testing.assert_allclose(rep.U(t), np.eye(2), atol=1e-14)
        np.testing.assert_allclose(rep.cbar(t), x[:1], atol=1e-14)
    y = np.array([[0.2, -0.1], [1.0, 1.0]])
    want = np.stack([x[0] + y[:, 0] + kap * y[:, 1], np.full(2, x[1])], axis=-1)
    np.testing.assert_allclose(rep.phi(y, 0.7), want, atol=1e-13)


@given(st.floats(-1.5, 1.5).filter(lambda b: abs(b) > 1e-3), st.floats(-1.0, 1.0), st.floats(-2.0, 2.0))
@settings(max_examples=20)
def test_scalar_linear_block(beta, theta, x):
    s = 0.25
    params = CanonicalParams.constant(1, 1, 1, beta=[[beta]], theta=[theta])
    chart = identity_diffeo(1, 1, Box([-50.0], [50.0]))
    rep = build_representation(params, chart, np.array([x]), s, Grid.uniform(s, 1.25, 5))
    for t in rep.grid.nodes:
        e = np.exp(beta * (t - s))
        np.testing.assert_allclose(rep.T(t)[0, 0], 1.0 / e, rtol=1e-9)
        np.testing.assert_allclose(rep.cbar(t)[0], e * x + theta * (e - 1.0) / beta, rtol=1e-9, atol=1e-12)


def test_heisenberg_solution_map_formula():
    e, rep = _rep("heisenberg")
    A = e.expected["A"]
    rng = np.random.default_rng(0)
    for _ in range(50):
        t = float(rng.uniform(0.0, 1.0))
        y = rng.normal(size=2) * np.sqrt(t)
        xi = rep.cbar(t) + rep.Uinv(t) @ y
        want = np.concatenate([xi, [rep.Xtilde(t)[0] + 0.5 * xi @ A @ xi]])
        np.testing.assert_allclose(rep.phi(y, t), want, atol=1e-6)


def test_cbar_matches_quadrature_form():
    # c(t) = T(t)^{-1} ( c(s) + int_s^t T(u) theta(u) du ) for scalar time-varying coefficients
    e, rep = _rep("cir_timevar")
    beta, theta = e.expected["beta"], e.expected["theta"]
    s = e.s0

    def T(u):
        return np.exp(-quad(beta, s, u, epsabs=1e-13)[0])

    c0 = rep.cbar(s)[0]
    for t in (0.3, 0.7, 1.0):
        integral = quad(lambda u: T(u) * theta(u), s, t, epsabs=1e-13)[0]
        np.testing.assert_allclose(rep.cbar(t)[0], (c0 + integral) / T(t), rtol=1e-9)
        np.testing.assert_allclose(rep.T(t)[0, 0], T(t), rtol=1e-9)


# -- structural invariants -----------------------------------------------------


@pytest.mark.parametrize("mid", POSITIVE)
def test_start_conditions(mid):
    e, rep = _rep(mid)
    assert np.array_equal(rep.U(e.s0), np.eye(e.model.d))
    np.testing.assert_allclose(rep.phi(np.zeros(e.model.d), e.s0), e.x0, atol=1e-12)


@pytest.mark.parametrize("mid", POSITIVE)
def test_block_inverse_and_semigroup(mid):
    e, rep = _rep(mid)
    d = e.model.d
    for t in rep.nodes[:: max(1, len(rep.nodes) // 50)]:
        assert np.max(np.abs(rep.Uinv(t) @ rep.U(t) - np.eye(d))) <= 1e-9
        np.testing.assert_allclose(rep.T(t) @ rep.Tinv(t), np.eye(e.model.r), atol=1e-9)
    k = len(rep.nodes) // 3
    later = rep.transition(rep.nodes[k])
    for t in rep.nodes[k::40]:
        assert np.max(np.abs(rep.U(t) - rep.U(rep.nodes[k]) @ later.U(t))) <= 1e-7


def test_block_structure_with_kappa():
    kap = lambda zt, t: np.broadcast_to(np.array([[0.3 + 0.2 * t]]), np.shape(zt)[:-1] + (1, 1)).copy()  # noqa: E731
    params = CanonicalParams(2, 2, 1, lambda zt, t: np.full(np.shape(zt)[:-1] + (1, 1), -0.4),
                             lambda zt, t: np.zeros(np.shape(zt)[:-1] + (1,)), kap,
                             lambda zt, t: np.zeros(np.shape(zt)))
    rep = build_representation(params, identity_diffeo(2, 2, Box([-9, -9], [9, 9])), np.zeros(2), 0.0,
                               Grid.uniform(0.0, 1.0, 3))
    t = 0.8
    T = rep.T(t)[0, 0]
    np.testing.assert_allclose(T, np.exp(0.4 * t), rtol=1e-10)
    want = np.array([[T, T * (0.3 + 0.2 * t) - 0.3], [0.0, 1.0]])
    np.testing.assert_allclose(rep.U(t), want, rtol=1e-10)
    np.testing.assert_allclose(rep.G(t), [[1.0, 0.3 + 0.2 * t]], rtol=1e-12)


@pytest.mark.parametrize("mid", POSITIVE)
def test_validation_passes(mid):
    e, rep = _rep(mid)
    val = validate_representation(rep, e.model, n_points=60)
    assert val.passed, val.to_dict()


def test_corrupted_cbar_is_detected():
    e, rep = _rep("ou")
    val = validate_representation(rep.with_cbar_offset(0.1), e.model, n_points=30)
    assert val.table["time"] > 1e-2
    assert not val.passed


def test_build_is_deterministic():
    _, a = _rep("heisenberg")
    _, b = _rep("heisenberg")
    assert np.array_equal(a.Z, b.Z) and np.array_equal(a.F, b.F)


def test_escape_is_recorded():
    params = CanonicalParams.constant(1, 1, 1, theta=[5.0])
    chart = identity_diffeo(1, 1, Box([-1.0], [1.0]))
    grid = Grid.uniform(0.0, 1.0, 5)
    rep = build_representation(params, chart, np.array([0.0]), 0.0, grid)
    assert 0.19 <= rep.valid_until <= 0.21
    with pytest.raises(OdeEscape):
        build_representation(params, chart, np.array([0.0]), 0.0, grid, strict=True)


def test_csv_export(tmp_path):
    _, rep = _rep("heisenberg", n=6)
    path = tmp_path / "rep.csv"
    rep.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t", "xt1", "T11", "T12", "T21", "T22", "c1", "c2"]
    assert len(rows) == 7
    assert float(rows[-1][0]) == 1.0


# -- scalar shortcut and compatible drifts ---------------------------------------


def test_scalar_brownian_motion():
    e = catalog.get("bm")
    rep = scalar_representation(e.model, 0.0, 0.0, e.diffeo, [0.4], 0.0, Grid.uniform(0.0, 1.0, 3))
    y = np.array([[0.3], [-1.2]])
    np.testing.assert_allclose(rep.phi(y, 0.5), 0.4 + y, atol=1e-14)


def test_scalar_shortcut_rejects_non_scalar():
    e = catalog.get("gbm")
    with pytest.raises(ValueError):
        scalar_representation(e.model, 0.0, 0.0, e.diffeo, e.x0, 0.0, Grid.uniform(0.0, 1.0, 3))


def test_cir_drift_from_params():
    sig, beta = 0.4, -0.5
    e = catalog.get("cir_const")
    h = compatible_drift(CanonicalParams.constant(1, 1, 1, beta=[[beta]]), e.diffeo)
    b = stratonovich_to_ito(e.model, h.h)
    x = np.linspace(0.1, 5.0, 20)[:, None]
    np.testing.assert_allclose(b(x, 0.0), sig**2 / 4 + 2 * beta * x, rtol=1e-10)


def test_cir_timevar_drift_from_params():
    e = catalog.get("cir_timevar")
    s, beta, theta = e.expected["s"], e.expected["beta"], e.expected["theta"]
    sd = lambda t: 0.2 * np.cos(2 * t)  # noqa: E731  d/dt of s
    b = stratonovich_to_ito(e.model, compatible_drift(e.params, e.diffeo).h)
    x = np.linspace(0.1, 5.0, 10)[:, None]
    for t in (0.0, 0.6, 1.3):
        want = theta(t) * s(t) * np.sqrt(x) + 2 * (beta(t) + sd(t) / s(t)) * x + s(t) ** 2 / 4
        np.testing.assert_allclose(b(x, t), want, rtol=1e-9)


def test_gbm_drift_from_params():
    e = catalog.get("gbm")
    gamma, beta, theta = e.expected["gamma"], e.expected["beta"], e.expected["theta"]
    B = gamma @ beta @ np.linalg.inv(gamma)
    alpha = 0.5 * np.diag(gamma @ gamma.T) + gamma @ theta
    b = stratonovich_to_ito(e.model, compatible_drift(e.params, e.diffeo).h)
    x, _ = e.model.sample(30)
    np.testing.assert_allclose(b(x, 0.0), x * (alpha + np.log(x) @ B.T), rtol=1e-9)


def test_zero_params_identity_chart_zero_drift():
    box = Box([-1.0, -1.0], [1.0, 1.0])
    h = compatible_drift(CanonicalParams.constant(2, 2, 2), identity_diffeo(2, 2, box))
    assert np.array_equal(h(np.array([[0.1, 0.2]]), 0.3), np.zeros((1, 2)))


def test_compatible_drift_round_trips_through_classifier():
    e = catalog.get("heisenberg")
    h = compatible_drift(e.params, e.diffeo)
    model = SdeModel("heis_h", 3, 2, 2, e.model.box, e.model.sigma, stratonovich_to_ito(e.model, h.h),
                     sigma_jac=e.model.sigma_jac, h_strat=h.h)
    chart = transform_sde(model, e.diffeo)
    ext = classify_canonical_drift(3, 2, 2, None, chart.h_strat, chart.box, region=chart.region)
    w = np.linspace(-1.0, 1.0, 5)[:, None]
    for name in ("beta", "theta", "htilde"):
        np.testing.assert_allclose(getattr(ext, name)(w, 0.0), getattr(e.params, name)(w, 0.0), atol=1e-5)
