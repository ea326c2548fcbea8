"""Assembly of the explicit solution ``X_t = phi(Y_t, t)``.

Given canonical parameters ``(kappa, beta, theta, h_tilde)`` and a chart
``Lambda_t``, the deterministic pieces are obtained from one augmented ODE
started at ``(x, s)``::

    X~'     = h~(X~, t)               X~(s)   = Lambda~_s(x)
    T'      = -T beta                 T(s)    = I
    (T^-1)' = beta T^-1               T^-1(s) = I
    c'      = theta + beta c          c(s)    = Lambda-bar_s(x)
    S'      = U U^T,  M' = U          S(s) = M(s) = 0

with ``U = [[T, T kappa_t - kappa_s], [0, I]]``. ``S`` and ``M`` carry the
running integrals needed by the Gaussian sampler. The solution map is

    phi(y, t) = Lambda_t^{-1}( c + G U^{-1} y,  X~_t ),    G = [I | kappa_t].
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .commutator import CheckReport
from .errors import DomainExit, ExactSdeError, OdeEscape, SingularJacobian
from .model import SdeModel, StratonovichDrift, ito_to_stratonovich
from .numerics import Grid, JacobianSpec, jacobian, psd_factor

H_MAX = 2.0**-9


def _lift(value, shape):
    """Wrap a constant or a function of time as a batched ``(z~, t)`` field."""
    if callable(value):

        def f(zt, t):
            v = np.asarray(value(t), dtype=float).reshape(shape)
            return np.broadcast_to(v, np.shape(zt)[:-1] + shape).copy()

    else:
        v = np.asarray(value, dtype=float).reshape(shape)

        def f(zt, t):
            return np.broadcast_to(v, np.shape(zt)[:-1] + shape).copy()

    return f


@dataclass(frozen=True)
class CanonicalParams:
    """Free functions of the representable family.

    Each callable takes ``(z_tilde, t)`` with ``z_tilde`` of shape
    ``(..., p - r)`` and returns ``kappa (..., r, d - r)``, ``beta (..., r, r)``,
    ``theta (..., r)`` or ``htilde (..., p - r)``. None of them can see the
    bar coordinates, so independence from them holds by construction.
    """

    p: int
    d: int
    r: int
    beta: Callable
    theta: Callable
    kappa: Callable
    htilde: Callable

    def __post_init__(self):
        if not (1 <= self.r <= min(self.p, self.d)):
            raise ValueError("need 1 <= r <= min(p, d)")
        zt = np.zeros(self.p - self.r)
        checks = {
            "beta": (self.beta, (self.r, self.r)),
            "theta": (self.theta, (self.r,)),
            "kappa": (self.kappa, (self.r, self.d - self.r)),
            "htilde": (self.htilde, (self.p - self.r,)),
        }
        for name, (fn, shape) in checks.items():
            got = np.shape(fn(zt, 0.0))
            if got != shape:
                raise ValueError(f"{name} has shape {got}, expected {shape}")

    @classmethod
    def constant(cls, p, d, r, beta=None, theta=None, kappa=None, htilde=None) -> "CanonicalParams":
        """Parameters that are constants or functions of time only."""
        beta = np.zeros((r, r)) if beta is None else beta
        theta = np.zeros(r) if theta is None else theta
        kappa = np.zeros((r, d - r)) if kappa is None else kappa
        htilde = np.zeros(p - r) if htilde is None else htilde
        return cls(
            p, d, r,
            _lift(beta, (r, r)),
            _lift(theta, (r,)),
            _lift(kappa, (r, d - r)),
            _lift(htilde, (p - r,)),
        )


def refine(grid: Grid, h_max: float) -> tuple:
    """Subdivide every grid interval into equal steps no longer than ``h_max``.

    Returns ``(nodes, index)`` where ``index`` locates the original nodes.
    """
    pieces = [grid.nodes[:1]]
    index = [0]
    for a, b in zip(grid.nodes[:-1], grid.nodes[1:]):
        m = max(1, int(np.ceil((b - a) / h_max - 1e-9)))
        pieces.append(np.linspace(a, b, m + 1)[1:])
        index.append(index[-1] + m)
    nodes = np.concatenate(pieces)
    nodes[np.array(index)] = grid.nodes
    return nodes, np.array(index)


@dataclass(frozen=True)
class _Layout:
    q: int
    r: int
    d: int

    @property
    def slices(self):
        q, r, d = self.q, self.r, self.d
        sizes = [("xt", q), ("T", r * r), ("Tinv", r * r), ("c", r), ("S", d * d), ("M", d * d)]
        out, k = {}, 0
        for name, n in sizes:
            out[name] = slice(k, k + n)
            k += n
        return out, k

    def unpack(self, Z):
        sl, _ = self.slices
        lead = Z.shape[:-1]
        q, r, d = self.q, self.r, self.d
        return {
            "xt": Z[..., sl["xt"]],
            "T": Z[..., sl["T"]].reshape(lead + (r, r)),
            "Tinv": Z[..., sl["Tinv"]].reshape(lead + (r, r)),
            "c": Z[..., sl["c"]],
            "S": Z[..., sl["S"]].reshape(lead + (d, d)),
            "M": Z[..., sl["M"]].reshape(lead + (d, d)),
        }


def _assemble_U(T, kap_t, kap_s, d):
    r = T.shape[-1]
    lead = T.shape[:-2]
    U = np.zeros(lead + (d, d))
    U[..., :r, :r] = T
    U[..., :r, r:] = T @ kap_t - kap_s
    idx = np.arange(r, d)
    U[..., idx, idx] = 1.0
    return U


def _assemble_Uinv(Tinv, kap_t, kap_s, d):
    r = Tinv.shape[-1]
    lead = Tinv.shape[:-2]
    V = np.zeros(lead + (d, d))
    V[..., :r, :r] = Tinv
    V[..., :r, r:] = Tinv @ kap_s - kap_t
    idx = np.arange(r, d)
    V[..., idx, idx] = 1.0
    return V


def _make_rhs(params: CanonicalParams, kap_s: np.ndarray, layout: _Layout):
    q, r, d = layout.q, layout.r, layout.d

    def rhs(Z, t):
        st = layout.unpack(Z)
        xt = st["xt"]
        beta = params.beta(xt, t)
        kap = params.kappa(xt, t)
        T, Tinv, c = st["T"], st["Tinv"], st["c"]
        U = _assemble_U(T, kap, kap_s, d)
        return np.concatenate(
            [
                np.asarray(params.htilde(xt, t), dtype=float).ravel(),
                (-T @ beta).ravel(),
                (beta @ Tinv).ravel(),
                np.asarray(params.theta(xt, t), dtype=float) + beta @ c,
                (U @ U.T).ravel(),
                U.ravel(),
            ]
        )

    return rhs


def _integrate(rhs, Z0, nodes, check=None):
    """RK4 with one step per internal interval; returns values and slopes.

    ``check(Z, t)`` may veto a node; integration stops there and the index
    of the last accepted node is returned alongside.
    """
    n = nodes.size
    Z = np.empty((n, Z0.size))
    F = np.empty((n, Z0.size))
    Z[0] = Z0
    F[0] = rhs(Z0, nodes[0])
    last = n - 1
    for k in range(n - 1):
        t0, h = nodes[k], nodes[k + 1] - nodes[k]
        y = Z[k]
        k1 = F[k]
        k2 = rhs(y + 0.5 * h * k1, t0 + 0.5 * h)
        k3 = rhs(y + 0.5 * h * k2, t0 + 0.5 * h)
        k4 = rhs(y + h * k3, t0 + h)
        Z[k + 1] = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(Z[k + 1])) or (check is not None and not check(Z[k + 1], nodes[k + 1])):
            last = k
            break
        F[k + 1] = rhs(Z[k + 1], nodes[k + 1])
    return Z[: last + 1], F[: last + 1], last


@dataclass(frozen=True)
class Representation:
    """Deterministic ingredients of ``X_t = phi(Y_t, t)`` started at ``(x, s)``.

    Tables live on a refined internal grid ``nodes``; values between nodes
    use cubic Hermite interpolation with the ODE slopes, so ``phi`` is
    continuously differentiable in ``t``. ``valid_until`` is the last time
    at which the mean chart path stayed inside the chart's domain.
    """

    params: CanonicalParams
    diffeo: object
    x: np.ndarray
    s: float
    grid: Grid
    nodes: np.ndarray
    Z: np.ndarray
    F: np.ndarray
    grid_index: np.ndarray
    kappa_s: np.ndarray
    valid_until: float
    rhs: Callable = field(repr=False, compare=False)
    cbar_offset: float = 0.0

    @property
    def layout(self) -> _Layout:
        return _Layout(self.params.p - self.params.r, self.params.r, self.params.d)

    @property
    def p(self):
        return self.params.p

    @property
    def d(self):
        return self.params.d

    @property
    def r(self):
        return self.params.r

    @property
    def perm(self):
        return tuple(self.diffeo.perm)

    def node_index(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.nodes - t)))
        if abs(self.nodes[k] - t) > 1e-12 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not a node of the representation")
        return k

    def state_at(self, t):
        """Interpolated tables at time(s) ``t`` (dict of arrays)."""
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        tt = np.atleast_1d(t)
        if np.any(tt < self.nodes[0] - 1e-12) or np.any(tt > self.valid_until + 1e-12):
            raise OdeEscape(f"time outside the validity interval [{self.s}, {self.valid_until}]")
        k = np.clip(np.searchsorted(self.nodes, tt, side="right") - 1, 0, self.nodes.size - 2)
        k = np.minimum(k, self.Z.shape[0] - 2) if self.Z.shape[0] > 1 else k * 0
        if self.Z.shape[0] == 1:
            Zt = np.broadcast_to(self.Z[0], tt.shape + self.Z.shape[1:]).copy()
        else:
            t0, t1 = self.nodes[k], self.nodes[k + 1]
            h = (t1 - t0)[:, None]
            u = ((tt - t0) / (t1 - t0))[:, None]
            h00 = 2 * u**3 - 3 * u**2 + 1
            h10 = u**3 - 2 * u**2 + u
            h01 = -2 * u**3 + 3 * u**2
            h11 = u**3 - u**2
            Zt = h00 * self.Z[k] + h10 * h * self.F[k] + h01 * self.Z[k + 1] + h11 * h * self.F[k + 1]
            exact = np.isclose(tt, t0, rtol=0, atol=0)
            Zt[exact] = self.Z[k[exact]]
            exact1 = np.isclose(tt, t1, rtol=0, atol=0)
            Zt[exact1] = self.Z[k[exact1] + 1]
        st = self.layout.unpack(Zt)
        st["c"] = st["c"] + self.cbar_offset
        if scalar:
            st = {key: v[0] for key, v in st.items()}
        return st

    def kappa_at(self, t: float, xt=None) -> np.ndarray:
        if xt is None:
            xt = self.state_at(t)["xt"]
        return np.asarray(self.params.kappa(xt, t), dtype=float)

    def T(self, t):
        return self.state_at(t)["T"]

    def Tinv(self, t):
        return self.state_at(t)["Tinv"]

    def cbar(self, t):
        return self.state_at(t)["c"]

    def Xtilde(self, t):
        return self.state_at(t)["xt"]

    def U(self, t: float) -> np.ndarray:
        st = self.state_at(t)
        return _assemble_U(st["T"], self.kappa_at(t, st["xt"]), self.kappa_s, self.d)

    def Uinv(self, t: float) -> np.ndarray:
        st = self.state_at(t)
        return _assemble_Uinv(st["Tinv"], self.kappa_at(t, st["xt"]), self.kappa_s, self.d)

    def G(self, t: float) -> np.ndarray:
        r = self.r
        return np.concatenate([np.eye(r), self.kappa_at(t)], axis=1)

    def cov_integral(self, t: float) -> np.ndarray:
        """``int_s^t U U^T du``."""
        return self.state_at(t)["S"]

    def mean_integral(self, t: float) -> np.ndarray:
        """``int_s^t U du``."""
        return self.state_at(t)["M"]

    def chart_point(self, y, t: float) -> np.ndarray:
        """``(c + G U^{-1} y, X~_t)`` in chart coordinates."""
        y = np.asarray(y, dtype=float)
        st = self.state_at(t)
        kap = self.kappa_at(t, st["xt"])
        G = np.concatenate([np.eye(self.r), kap], axis=1)
        V = _assemble_Uinv(st["Tinv"], kap, self.kappa_s, self.d)
        zbar = st["c"] + y @ (G @ V).T
        zt = np.broadcast_to(st["xt"], y.shape[:-1] + (self.p - self.r,))
        return np.concatenate([zbar, zt], axis=-1)

    def phi(self, y, t) -> np.ndarray:
        """Solution map; ``t`` is a scalar or an array matching ``y``'s batch."""
        y = np.asarray(y, dtype=float)
        t = np.asarray(t, dtype=float)
        if t.ndim == 0:
            return np.asarray(self.diffeo.inverse(self.chart_point(y, float(t)), float(t)), dtype=float)
        out = np.empty(y.shape[:-1] + (self.p,))
        for tt in np.unique(t):
            m = t == tt
            out[m] = self.diffeo.inverse(self.chart_point(y[m], float(tt)), float(tt))
        return out

    def transition(self, u: float) -> "Representation":
        """Re-integration from internal node ``u`` (``T_{u,.}``) on the same steps."""
        k = self.node_index(u)
        st = self.layout.unpack(self.Z[k])
        q, r, d = self.layout.q, self.r, self.d
        kap_u = self.kappa_at(self.nodes[k], st["xt"])
        Z0 = np.concatenate(
            [st["xt"], np.eye(r).ravel(), np.eye(r).ravel(), st["c"], np.zeros(d * d), np.zeros(d * d)]
        )
        rhs = _make_rhs(self.params, kap_u, self.layout)
        nodes = self.nodes[k : self.Z.shape[0]]
        Z, F, _ = _integrate(rhs, Z0, nodes)
        return replace(
            self,
            s=float(self.nodes[k]),
            nodes=nodes,
            Z=Z,
            F=F,
            grid_index=np.array([0, len(nodes) - 1]),
            kappa_s=kap_u,
            rhs=rhs,
        )

    def with_cbar_offset(self, offset: float) -> "Representation":
        return replace(self, cbar_offset=float(offset))

    def to_csv(self, path) -> None:
        """Tables at the user grid nodes: ``t, X~, vec(T), c``."""
        q, r = self.layout.q, self.r
        header = ["t"] + [f"xt{i + 1}" for i in range(q)]
        header += [f"T{i + 1}{j + 1}" for i in range(r) for j in range(r)]
        header += [f"c{i + 1}" for i in range(r)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in self.grid_index:
                if k >= self.Z.shape[0]:
                    break
                st = self.layout.unpack(self.Z[k])
                row = [self.nodes[k], *st["xt"], *st["T"].ravel(), *(st["c"] + self.cbar_offset)]
                w.writerow(["%.17g" % v for v in row])


def build_representation(
    params: CanonicalParams,
    diffeo,
    x,
    s: float,
    grid: Grid,
    h_max: float = H_MAX,
    strict: bool = False,
) -> Representation:
    """Solve the deterministic system on ``grid`` (refined to ``h_max``).

    The mean chart path ``(c_t, X~_t)`` is monitored: the first time it
    leaves the chart image or its preimage leaves the chart's valid box ends
    the validity interval (``OdeEscape`` when ``strict``).
    """
    x = np.asarray(x, dtype=float)
    if abs(grid.start - s) > 1e-12:
        raise ValueError("grid must start at s")
    p, d, r = params.p, params.d, params.r
    z0 = np.asarray(diffeo.forward(x, s), dtype=float)
    if not np.all(np.isfinite(z0)):
        raise OdeEscape("starting point is outside the chart")
    layout = _Layout(p - r, r, d)
    kap_s = np.asarray(params.kappa(z0[r:], s), dtype=float)
    Z0 = np.concatenate(
        [z0[r:], np.eye(r).ravel(), np.eye(r).ravel(), z0[:r], np.zeros(d * d), np.zeros(d * d)]
    )
    nodes, index = refine(grid, h_max)
    rhs = _make_rhs(params, kap_s, layout)
    valid_box = getattr(diffeo, "valid_box", None)

    def check(Z, t):
        st = layout.unpack(Z)
        z = np.concatenate([st["c"], st["xt"]])
        in_image = getattr(diffeo, "in_image", None)
        if in_image is not None and not bool(in_image(z, t)):
            return False
        try:
            xx = diffeo.inverse(z, t)
        except ExactSdeError:
            return False
        if not np.all(np.isfinite(xx)):
            return False
        return valid_box is None or bool(valid_box.contains(xx))

    Z, F, last = _integrate(rhs, Z0, nodes, check=check)
    valid_until = float(nodes[last])
    if last < nodes.size - 1 and strict:
        raise OdeEscape(f"mean chart path leaves the chart at t={nodes[last + 1]:.6g}")
    return Representation(params, diffeo, x, float(s), grid, nodes, Z, F, index, kap_s, valid_until, rhs)


def scalar_representation(
    model: SdeModel,
    beta,
    theta,
    diffeo,
    x,
    s: float,
    grid: Grid,
    h_max: float = H_MAX,
) -> Representation:
    """One-dimensional case: ``T_{s,t} = exp(-int beta)``, ``U = T``."""
    if not (model.p == model.d == model.r == 1):
        raise ValueError("scalar_representation needs p = d = r = 1")
    xs, ts = model.sample(32)
    for xi, ti in zip(xs, ts):
        if not np.all(np.asarray(model.sigma(xi, ti)) > 0):
            raise ValueError("sigma must be positive on the domain")
    params = CanonicalParams.constant(1, 1, 1, beta=beta, theta=theta)
    return build_representation(params, diffeo, np.atleast_1d(x), s, grid, h_max)


def compatible_drift(params: CanonicalParams, diffeo) -> StratonovichDrift:
    """Stratonovich drift for which the representation solves the SDE.

    ``h = [grad Lambda_t]^{-1} ( [theta + beta z_bar; h~] - d_t Lambda_t )``
    evaluated at ``z = Lambda_t(x)``.
    """
    r = params.r

    def h(x, t):
        x = np.asarray(x, dtype=float)
        z = np.asarray(diffeo.forward(x, t), dtype=float)
        zt = z[..., r:]
        top = np.asarray(params.theta(zt, t)) + np.einsum("...ij,...j->...i", params.beta(zt, t), z[..., :r])
        rhs = np.concatenate([top, np.asarray(params.htilde(zt, t))], axis=-1) - diffeo.dt(x, t)
        J = np.asarray(diffeo.jac(x, t), dtype=float)
        if np.any(np.abs(np.linalg.det(J)) < 1e-12):
            raise SingularJacobian("chart Jacobian is singular", point=x)
        return np.linalg.solve(J, rhs[..., None])[..., 0]

    return StratonovichDrift(h)


def _sample_points(rep: Representation, model: SdeModel, n: int, seed: int, t_pad: float):
    """Random ``(y, t)`` with ``phi`` well inside the model domain."""
    rng = np.random.default_rng(seed)
    lo, hi = rep.s + t_pad, rep.valid_until - t_pad
    if hi <= lo:
        raise OdeEscape("validity interval too short to validate")
    ys, ts = [], []
    tries = 0
    while len(ys) < n and tries < 50 * n:
        tries += 1
        t = float(rng.uniform(lo, hi))
        S = rep.cov_integral(t)
        L, _ = psd_factor(0.5 * (S + S.T))
        y = L @ rng.standard_normal(rep.d)
        try:
            z = rep.chart_point(y, t)
            if hasattr(rep.diffeo, "in_image") and not bool(rep.diffeo.in_image(z, t)):
                continue
            xx = rep.diffeo.inverse(z, t)
        except ExactSdeError:
            continue
        if not (model.contains(xx, t) and model.box.shrink(0.01).contains(xx)):
            continue
        ys.append(y)
        ts.append(t)
    if len(ys) < n:
        raise DomainExit(f"only {len(ys)} of {n} validation points fell inside the domain")
    return np.array(ys), np.array(ts)


def validate_representation(
    rep: Representation,
    model: SdeModel,
    n_points: int = 200,
    tol: float = 1e-5,
    semigroup_tol: float = 1e-7,
    seed: int = 0,
    n_triples: int = 60,
) -> CheckReport:
    """Residuals of the defining equations of ``phi`` and of the semigroup law.

    * grad:  ``|grad_y phi - sigma^pi(phi, t) U^{-1}_{s,t}| / (1 + |sigma U^{-1}|)``
    * time:  ``|d_t phi - h(phi, t)| / (1 + |h|)``
    * semigroup: ``|U_{a,c} - U_{a,b} U_{b,c}|`` over internal node triples.
    """
    perm = list(rep.perm)
    h = ito_to_stratonovich(model)
    spec = JacobianSpec("central", 1e-5)
    ys, ts = _sample_points(rep, model, n_points, seed, t_pad=1e-3)
    grad_res = np.zeros(len(ys))
    time_res = np.zeros(len(ys))
    for i, (y, t) in enumerate(zip(ys, ts)):
        Jy = jacobian(lambda yy, _t: rep.phi(yy, t), y, t, spec)
        xx = rep.phi(y, t)
        target = np.asarray(model.sigma(xx, t), dtype=float)[:, perm] @ rep.Uinv(t)
        grad_res[i] = np.max(np.abs(Jy - target)) / (1.0 + np.max(np.abs(target)))
        dt = 1e-5 * max(1.0, abs(t))
        dphi = (rep.phi(y, t + dt) - rep.phi(y, t - dt)) / (2 * dt)
        hv = np.asarray(h(xx, t), dtype=float)
        time_res[i] = np.max(np.abs(dphi - hv)) / (1.0 + np.max(np.abs(hv)))

    rng = np.random.default_rng(seed + 1)
    last = rep.Z.shape[0] - 1
    sg, worst_sg = 0.0, None
    if last >= 3:
        cache = {0: rep}

        def from_node(k):
            if k not in cache:
                cache[k] = rep.transition(rep.nodes[k])
            return cache[k]

        a_nodes = [0, int(rng.integers(1, max(2, last // 2)))]
        b_nodes = sorted(set(int(b) for b in rng.integers(1, last, size=3)))
        per = max(1, n_triples // (len(a_nodes) * len(b_nodes)))
        for a in a_nodes:
            for b in b_nodes:
                if not (a < b < last):
                    continue
                Uab = from_node(a).U(rep.nodes[b])
                for c in rng.integers(b + 1, last + 1, size=per):
                    tc = rep.nodes[c]
                    res = float(np.max(np.abs(from_node(a).U(tc) - Uab @ from_node(b).U(tc))))
                    if res >= sg:
                        sg, worst_sg = res, (rep.nodes[a], rep.nodes[b], tc)
    max_pde = float(max(grad_res.max(), time_res.max()))
    verdict = "pass" if (max_pde <= tol and sg <= semigroup_tol) else "fail"
    wi = int(np.argmax(np.maximum(grad_res, time_res)))
    return CheckReport(
        verdict,
        max_pde,
        (ys[wi], float(ts[wi])),
        {"grad": float(grad_res.max()), "time": float(time_res.max()), "semigroup": sg},
        len(ys),
        0,
        tol,
        "representation",
        {"semigroup_tol": semigroup_tol, "semigroup_worst": worst_sg},
    )
