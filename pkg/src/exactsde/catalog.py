"""Built-in models with their charts, canonical parameters and oracles.

Positive entries are representable and carry a closed-form chart and the
canonical parameters that generate their drift. Negative entries fail the
pipeline at a known stage. ``example1_fgmn`` is a checker-only fixture: its
drift condition holds with a constant generator but no chart is supplied.

Drifts are written out in closed form; the load-time validation checks them
against the drift generated from the canonical parameters, so a sign slip in
either place is caught on first use.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import expm

from .diffeo import Diffeomorphism, closed_form_diffeo, verify_p3
from .errors import UnknownModel
from .model import SdeModel, stratonovich_to_ito
from .numerics import Box
from .representation import CanonicalParams, compatible_drift


@dataclass(frozen=True)
class CatalogEntry:
    id: str
    model: SdeModel
    diffeo: Optional[Diffeomorphism]
    params: Optional[CanonicalParams]
    x0: np.ndarray
    s0: float = 0.0
    representable: bool = True
    fail_stage: Optional[str] = None
    checker_only: bool = False
    anchor: Optional[np.ndarray] = None
    expected: dict = field(default_factory=dict)
    notes: str = ""


def _const_sigma(p, d, value):
    S = np.array(value, dtype=float).reshape(p, d)

    def sigma(x, t):
        return np.broadcast_to(S, np.shape(x)[:-1] + (p, d)).copy()

    def sigma_jac(x, t):
        return np.zeros(np.shape(x)[:-1] + (p, d, p))

    return sigma, sigma_jac


def _bm(T=2.0):
    box = Box([-10.0], [10.0])
    sigma, sj = _const_sigma(1, 1, 1.0)
    model = SdeModel("bm", 1, 1, 1, box, sigma, lambda x, t: np.zeros(np.shape(x)), T=T, sigma_jac=sj)
    diffeo = closed_form_diffeo("bm", {"box": box, "p": 1})
    expected = {"mean": lambda t, x=0.0, s=0.0: np.array([x]), "var": lambda t, s=0.0: np.array([[t - s]])}
    return CatalogEntry(
        "bm", model, diffeo, CanonicalParams.constant(1, 1, 1), np.zeros(1), expected=expected,
        notes="standard Brownian motion; every map is the identity",
    )


def _ou(kappa=0.8, mu=0.5, sigma=0.5, T=2.0):
    box = Box([-5.0], [5.0])
    sig, sj = _const_sigma(1, 1, sigma)
    model = SdeModel("ou", 1, 1, 1, box, sig, lambda x, t: kappa * (mu - np.asarray(x)), T=T, sigma_jac=sj)
    diffeo = closed_form_diffeo("ou", {"box": box, "sigma": sigma})
    params = CanonicalParams.constant(1, 1, 1, beta=[[-kappa]], theta=[kappa * mu / sigma])
    x0 = np.array([1.0])

    def mean(t, x=1.0, s=0.0):
        return np.array([mu + (x - mu) * np.exp(-kappa * (t - s))])

    def var(t, s=0.0):
        return np.array([[sigma**2 * (1 - np.exp(-2 * kappa * (t - s))) / (2 * kappa)]])

    return CatalogEntry(
        "ou", model, diffeo, params, x0, expected={"mean": mean, "var": var},
        notes="Ornstein-Uhlenbeck, chart z = x / sigma, beta = -kappa",
    )


def _cir_model(name, s_fn, sdot_fn, beta_fn, theta_fn, T, time_homogeneous, box):
    def sigma(x, t):
        return (s_fn(t) * np.sqrt(np.asarray(x, dtype=float)))[..., None]

    def sigma_jac(x, t):
        return (0.5 * s_fn(t) / np.sqrt(np.asarray(x, dtype=float)))[..., None, None]

    def b(x, t):
        x = np.asarray(x, dtype=float)
        s = s_fn(t)
        return theta_fn(t) * s * np.sqrt(x) + 2.0 * (beta_fn(t) + sdot_fn(t) / s) * x + s**2 / 4.0

    return SdeModel(
        name, 1, 1, 1, box, sigma, b, T=T, time_homogeneous=time_homogeneous,
        sigma_jac=sigma_jac, clip=lambda x: np.maximum(x, 1e-300),
    )


def cir_moments(x, beta, theta, sigma, t, s=0.0):
    """Mean and variance of ``X_t = Z^2 / 4`` with ``Z ~ N(m, v)``."""
    e = np.exp(beta * (t - s))
    m = 2.0 * e * np.sqrt(x) + (theta * sigma / beta) * (e - 1.0) if beta != 0 else 2 * np.sqrt(x) + theta * sigma * (t - s)
    v = sigma**2 * (np.exp(2 * beta * (t - s)) - 1.0) / (2 * beta) if beta != 0 else sigma**2 * (t - s)
    return (m**2 + v) / 4.0, (4 * m**2 * v + 2 * v**2) / 16.0, m, v


def _cir_const(sigma=0.4, beta=-0.5, theta=0.0, x0=1.0, T=2.0):
    box = Box([0.0], [9.0])
    model = _cir_model(
        "cir_const", lambda t: sigma, lambda t: 0.0, lambda t: beta, lambda t: theta, T, True, box
    )
    diffeo = closed_form_diffeo("cir_const", {"box": box, "sigma": sigma})
    params = CanonicalParams.constant(1, 1, 1, beta=[[beta]], theta=[theta])

    def mean(t, x=x0, s=0.0):
        return np.array([cir_moments(x, beta, theta, sigma, t, s)[0]])

    def var(t, x=x0, s=0.0):
        return np.array([[cir_moments(x, beta, theta, sigma, t, s)[1]]])

    return CatalogEntry(
        "cir_const", model, diffeo, params, np.array([x0]),
        expected={"mean": mean, "var": var, "sigma": sigma, "beta": beta, "theta": theta},
        notes="square-root diffusion, chart 2 sqrt(x) / sigma; X = Z^2 / 4 with Gaussian Z",
    )


def _cir_timevar(x0=1.0, T=2.0):
    box = Box([0.0], [9.0])

    def s_fn(t):
        return 0.4 * (1.0 + 0.25 * np.sin(2.0 * t))

    def sdot_fn(t):
        return 0.2 * np.cos(2.0 * t)

    def beta_fn(t):
        return -0.5 + 0.2 * t

    def theta_fn(t):
        return 0.1 + 0.05 * t

    model = _cir_model("cir_timevar", s_fn, sdot_fn, beta_fn, theta_fn, T, False, box)
    diffeo = closed_form_diffeo("cir_timevar", {"box": box, "s": s_fn, "sdot": sdot_fn})
    params = CanonicalParams.constant(1, 1, 1, beta=lambda t: [[beta_fn(t)]], theta=lambda t: [theta_fn(t)])
    return CatalogEntry(
        "cir_timevar", model, diffeo, params, np.array([x0]),
        expected={"s": s_fn, "beta": beta_fn, "theta": theta_fn},
        notes="time-varying square-root diffusion with s(t) = 0.4 (1 + sin(2t) / 4)",
    )


GBM_DEFAULTS = {
    1: {"gamma": [[0.4]], "beta": [[0.0]], "theta": [1.0]},
    2: {
        "gamma": [[0.3, 0.1], [0.05, 0.25]],
        "beta": [[-0.4, 0.1], [0.05, -0.3]],
        "theta": [2.0, 1.5],
    },
}


def gbm_log_moments(gamma, beta, theta, z0, t, s=0.0):
    """Gaussian law of ``log X_t = gamma z_t`` for ``dz = (theta + beta z) dt + dW``.

    Uses the block-exponential identities for ``int e^{beta u} du`` and
    ``int e^{beta u} e^{beta^T u} du``.
    """
    gamma, beta, theta = (np.atleast_2d(np.array(gamma, float)), np.atleast_2d(np.array(beta, float)),
                          np.array(theta, float))
    d = beta.shape[0]
    tau = t - s
    E = expm(beta * tau)
    aug = np.zeros((2 * d, 2 * d))
    aug[:d, :d] = beta
    aug[:d, d:] = np.eye(d)
    F = expm(aug * tau)[:d, d:]  # int_0^tau e^{beta u} du
    van = np.zeros((2 * d, 2 * d))
    van[:d, :d] = -beta
    van[:d, d:] = np.eye(d)
    van[d:, d:] = beta.T
    V = expm(van * tau)
    C = V[d:, d:].T @ V[:d, d:]  # int_0^tau e^{beta u} e^{beta^T u} du
    mz = E @ z0 + F @ theta
    return gamma @ mz, gamma @ C @ gamma.T


def _gbm(d=2, gamma=None, beta=None, theta=None, x0=None, T=2.0):
    base = GBM_DEFAULTS.get(d)
    if base is None and (gamma is None or beta is None or theta is None):
        raise UnknownModel(f"no default GBM parameters for d={d}")
    gamma = np.array(base["gamma"] if gamma is None else gamma, dtype=float).reshape(d, d)
    beta = np.array(base["beta"] if beta is None else beta, dtype=float).reshape(d, d)
    theta = np.array(base["theta"] if theta is None else theta, dtype=float).reshape(d)
    x0 = np.ones(d) if x0 is None else np.array(x0, dtype=float).reshape(d)
    box = Box(np.full(d, 0.01), np.full(d, 100.0))
    ginv = np.linalg.inv(gamma)
    Bt = gamma @ beta @ ginv
    alpha = gamma @ theta + 0.5 * np.sum(gamma**2, axis=1)

    def sigma(x, t):
        return np.asarray(x, dtype=float)[..., :, None] * gamma

    def sigma_jac(x, t):
        x = np.asarray(x, dtype=float)
        J = np.zeros(x.shape[:-1] + (d, d, d))
        for i in range(d):
            J[..., i, :, i] = gamma[i]
        return J

    def b(x, t):
        x = np.asarray(x, dtype=float)
        return x * (alpha + np.log(x) @ Bt.T)

    model = SdeModel("gbm", d, d, d, box, sigma, b, T=T, sigma_jac=sigma_jac)
    diffeo = closed_form_diffeo("gbm", {"box": box, "gamma": gamma})
    params = CanonicalParams.constant(d, d, d, beta=beta, theta=theta)
    z0 = ginv @ np.log(x0)

    def log_moments(t, s=0.0):
        return gbm_log_moments(gamma, beta, theta, z0, t, s)

    def mean(t, s=0.0):
        m, C = log_moments(t, s)
        return np.exp(m + 0.5 * np.diag(C))

    return CatalogEntry(
        "gbm", model, diffeo, params, x0, anchor=x0.copy(),
        expected={"log_moments": log_moments, "mean": mean, "gamma": gamma, "beta": beta, "theta": theta,
                  "B_drift": Bt, "alpha": alpha},
        notes="geometric Brownian motion with log-linear drift; chart gamma^{-1} log x",
    )


HEIS_A = [[1.0, 0.3], [0.3, 2.0]]
HEIS_B0 = np.array([[-0.5, 0.2], [0.1, -0.3]])


def _heisenberg_params():
    def beta(w, t):
        w = np.asarray(w, dtype=float)[..., 0]
        return HEIS_B0 + 0.1 * np.sin(w)[..., None, None] * np.eye(2)

    def theta(w, t):
        w = np.asarray(w, dtype=float)[..., 0]
        return np.stack([0.2 + 0.1 * np.cos(w), np.full_like(w, -0.1)], axis=-1)

    def htilde(w, t):
        w = np.asarray(w, dtype=float)
        return 0.3 - 0.2 * w

    def kappa(w, t):
        return np.zeros(np.shape(w)[:-1] + (2, 0))

    return CanonicalParams(3, 2, 2, beta, theta, kappa, htilde)


def _heisenberg(A=None, anchor=(1.0, 1.0, 0.0), T=2.0):
    A = np.array(HEIS_A if A is None else A, dtype=float)
    if not np.allclose(A, A.T):
        raise ValueError("the representable Heisenberg entry needs a symmetric A")
    box = Box([-3.0, -3.0, -10.0], [3.0, 3.0, 20.0])
    params = _heisenberg_params()

    def sigma(x, t):
        x = np.asarray(x, dtype=float)
        xi = x[..., :2]
        S = np.zeros(x.shape[:-1] + (3, 2))
        S[..., 0, 0] = 1.0
        S[..., 1, 1] = 1.0
        S[..., 2, :] = xi @ A.T
        return S

    def sigma_jac(x, t):
        x = np.asarray(x, dtype=float)
        J = np.zeros(x.shape[:-1] + (3, 2, 3))
        J[..., 2, :, :2] = A
        return J

    def b(x, t):
        x = np.asarray(x, dtype=float)
        xi, z = x[..., :2], x[..., 2]
        w = (z - 0.5 * np.einsum("...i,ij,...j->...", xi, A, xi))[..., None]
        top = params.theta(w, t) + np.einsum("...ij,...j->...i", params.beta(w, t), xi)
        last = params.htilde(w, t)[..., 0] + np.einsum("...i,ij,...j->...", xi, A, top) + 0.5 * np.trace(A)
        return np.concatenate([top, last[..., None]], axis=-1)

    model = SdeModel("heisenberg", 3, 2, 2, box, sigma, b, T=T, sigma_jac=sigma_jac)
    diffeo = closed_form_diffeo("heisenberg", {"box": box, "A": A})
    anchor = np.array(anchor, dtype=float)
    return CatalogEntry(
        "heisenberg", model, diffeo, params, anchor.copy(), anchor=anchor, expected={"A": A},
        notes="Heisenberg-type diffusion with symmetric A; chart (xi, z - xi^T A xi / 2)",
    )


def _heisenberg_asym(A=((0.0, 1.0), (-1.0, 0.0)), T=2.0):
    A = np.array(A, dtype=float)
    box = Box([-3.0, -3.0, -10.0], [3.0, 3.0, 20.0])

    def sigma(x, t):
        x = np.asarray(x, dtype=float)
        S = np.zeros(x.shape[:-1] + (3, 2))
        S[..., 0, 0] = 1.0
        S[..., 1, 1] = 1.0
        S[..., 2, :] = x[..., :2] @ A.T
        return S

    model = SdeModel("heisenberg_asym", 3, 2, 2, box, sigma, lambda x, t: np.zeros(np.shape(x)), T=T)
    return CatalogEntry(
        "heisenberg_asym", model, None, None, np.array([1.0, 1.0, 0.0]), representable=False,
        fail_stage="sigma", anchor=np.array([1.0, 1.0, 0.0]), expected={"A": A},
        notes="antisymmetric A: the noise columns do not commute",
    )


def _example1(alpha=0.5, beta=0.3, gamma=0.7, delta=0.4, T=2.0):
    box = Box([-1.0, -1.0], [1.0, 1.0])

    def parts(x):
        x = np.asarray(x, dtype=float)
        p1, p2 = x[..., 0], x[..., 1]
        m = p1 + p1**3 / 3.0
        mp = 1.0 + p1**2
        g = np.exp(p2)
        return p1, p2, m, mp, g

    def sigma(x, t):
        p1, p2, m, mp, g = parts(x)
        S = np.zeros(np.shape(x)[:-1] + (2, 2))
        S[..., 0, 0] = gamma / mp
        S[..., 1, 0] = delta / g
        S[..., 1, 1] = delta / g
        return S

    def h(x, t):
        p1, p2, m, mp, g = parts(x)
        return np.stack([alpha * g / mp, beta * m / g], axis=-1)

    def b(x, t):
        p1, p2, m, mp, g = parts(x)
        a = gamma / mp
        a_p = -2.0 * gamma * p1 / mp**2
        e = delta / g
        e_p = -delta / g
        return h(x, t) + 0.5 * np.stack([a * a_p, 2.0 * e * e_p], axis=-1)

    model = SdeModel("example1_fgmn", 2, 2, 2, box, sigma, b, T=T, h_strat=h)
    c = alpha * delta / gamma
    B = np.array([[c, c], [beta * gamma / delta - c, -c]])
    return CatalogEntry(
        "example1_fgmn", model, None, None, np.zeros(2), checker_only=True,
        expected={"B": B},
        notes="coupled (f, g, m, n) system with m = x + x^3/3, g = e^y; constant generator",
    )


def _nonaffine(T=2.0):
    box = Box([-1.0], [1.0])
    sig, sj = _const_sigma(1, 1, 1.0)
    model = SdeModel("nonaffine_drift", 1, 1, 1, box, sig, lambda x, t: np.asarray(x, dtype=float) ** 2,
                     T=T, sigma_jac=sj)
    diffeo = closed_form_diffeo("nonaffine_drift", {"box": box, "p": 1})
    return CatalogEntry(
        "nonaffine_drift", model, diffeo, None, np.zeros(1), representable=False, fail_stage="drift",
        notes="unit noise with quadratic drift: not affine in the straightened chart",
    )


BUILDERS: dict = {
    "bm": _bm,
    "ou": _ou,
    "cir_const": _cir_const,
    "cir_timevar": _cir_timevar,
    "gbm": _gbm,
    "heisenberg": _heisenberg,
    "heisenberg_asym": _heisenberg_asym,
    "example1_fgmn": _example1,
    "nonaffine_drift": _nonaffine,
}

POSITIVE = ("bm", "ou", "cir_const", "cir_timevar", "gbm", "heisenberg")
NEGATIVE = ("heisenberg_asym", "nonaffine_drift")

_CACHE: dict = {}


def _freeze(v):
    if isinstance(v, (list, tuple, np.ndarray)):
        return tuple(_freeze(u) for u in np.asarray(v, dtype=float).tolist()) if np.ndim(v) else float(v)
    return v


def validate_entry(entry: CatalogEntry, n_points: int = 40) -> None:
    """Load-time consistency: canonical chart and generated drift."""
    if entry.diffeo is None or entry.params is None:
        return
    res = verify_p3(entry.diffeo, entry.model, n_points=n_points, tol=1e-6)
    if not res.report.passed:
        raise ValueError(f"{entry.id}: chart does not straighten sigma ({res.report.max_residual:.3g})")
    h = compatible_drift(entry.params, entry.diffeo)
    b_gen = stratonovich_to_ito(entry.model, h.h)
    x, t = entry.model.sample(n_points, seed=7)
    for xi, ti in zip(x, t):
        want = np.asarray(entry.model.b(xi, ti))
        got = b_gen(xi, ti)
        if np.max(np.abs(got - want)) > 1e-6 * (1.0 + np.max(np.abs(want))):
            raise ValueError(f"{entry.id}: closed-form drift disagrees with the canonical parameters at {xi}")


def get(model_id: str, validate: bool = True, **overrides) -> CatalogEntry:
    """Catalog lookup; entries are validated once and cached."""
    if model_id not in BUILDERS:
        raise UnknownModel(f"unknown model {model_id!r}; known: {', '.join(sorted(BUILDERS))}")
    key = (model_id, tuple(sorted((k, _freeze(v)) for k, v in overrides.items())))
    if key in _CACHE:
        return _CACHE[key]
    entry = BUILDERS[model_id](**overrides)
    if validate:
        validate_entry(entry)
    _CACHE[key] = entry
    return entry


def ids() -> list:
    return sorted(BUILDERS)
