"""Time-dependent local diffeomorphisms ``(x, t) -> (Lambda_t(x), t)``.

Closed-form charts for the catalog models live here, together with the
straightening check (the pushed-forward diffusion must read
``[I_r | kappa; 0 0]``) and a numerical construction of a straightening
chart from commuting diffusion flows.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .commutator import CheckReport
from .errors import (
    DomainExit,
    ExactSdeError,
    FlowEscape,
    KappaDependsOnBar,
    NotCanonical,
    PermutationExhausted,
    SingularJacobian,
    UnknownModel,
)
from .model import SdeModel, transform_sde
from .numerics import Box, JacobianSpec, all_finite, by_time, jacobian, sample_interior


def _zeros_dt(x, t):
    return np.zeros(np.shape(x))


@dataclass(frozen=True)
class Diffeomorphism:
    """Chart ``Lambda_t`` with its inverse and derivatives.

    All callables are batched over leading axes. ``perm`` lists the noise
    columns in the order the chart straightens them; ``hessian`` (optional)
    returns ``[..., m, i, k] = d_i d_k Lambda_m``.
    """

    forward: Callable
    inverse: Callable
    jac: Callable
    dt: Callable = _zeros_dt
    perm: tuple = (0,)
    valid_box: Optional[Box] = None
    time_dependent: bool = False
    image_contains: Optional[Callable] = None
    hessian: Optional[Callable] = None
    name: str = ""

    def __post_init__(self):
        perm = tuple(int(i) for i in self.perm)
        if sorted(perm) != list(range(len(perm))):
            raise ValueError(f"{perm} is not a permutation")
        object.__setattr__(self, "perm", perm)

    @property
    def perm_matrix(self) -> np.ndarray:
        d = len(self.perm)
        P = np.zeros((d, d))
        P[list(self.perm), np.arange(d)] = 1.0
        return P

    def in_image(self, z, t) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        ok = all_finite(z)
        if self.image_contains is not None:
            ok = ok & np.asarray(self.image_contains(z, t), dtype=bool)
        return ok

    def inverted(self, image_box: Box) -> "Diffeomorphism":
        """The inverse chart, valid on ``image_box``."""
        fwd = self

        def jac_inv(z, t):
            return np.linalg.inv(fwd.jac(fwd.inverse(z, t), t))

        def dt_inv(z, t):
            # d/dt Lambda_t^{-1}(z) = -[grad Lambda_t]^{-1} d_t Lambda_t at x = Lambda_t^{-1}(z)
            x = fwd.inverse(z, t)
            return -np.linalg.solve(fwd.jac(x, t), fwd.dt(x, t)[..., None])[..., 0]

        return Diffeomorphism(
            forward=fwd.inverse,
            inverse=fwd.forward,
            jac=jac_inv,
            dt=dt_inv,
            perm=tuple(range(len(self.perm))),
            valid_box=image_box,
            time_dependent=self.time_dependent,
            name=f"{self.name}^-1",
        )


def _as_time_fn(v):
    if callable(v):
        return v
    c = float(v)
    return lambda t: c


def _as_matrix_fn(v):
    if callable(v):
        return v
    M = np.array(v, dtype=float)
    return lambda t: M


def identity_diffeo(p: int, d: int, box: Box, scale=1.0, shift=0.0, name="identity") -> Diffeomorphism:
    """Affine chart ``z = (x - shift) * scale`` with a constant diagonal scale."""
    scale = np.broadcast_to(np.asarray(scale, dtype=float), (p,)).copy()
    shift = np.broadcast_to(np.asarray(shift, dtype=float), (p,)).copy()
    return Diffeomorphism(
        forward=lambda x, t: (np.asarray(x, dtype=float) - shift) * scale,
        inverse=lambda z, t: np.asarray(z, dtype=float) / scale + shift,
        jac=lambda x, t: np.broadcast_to(np.diag(scale), np.shape(x)[:-1] + (p, p)).copy(),
        hessian=lambda x, t: np.zeros(np.shape(x)[:-1] + (p, p, p)),
        perm=tuple(range(d)),
        valid_box=box,
        name=name,
    )


def cir_diffeo(s, sdot, box: Box) -> Diffeomorphism:
    """``Lambda_t(x) = 2 sqrt(x) / s(t)`` for ``dX = ... + s(t) sqrt(X) dW``."""
    s, sdot = _as_time_fn(s), _as_time_fn(sdot)

    def forward(x, t):
        return 2.0 * np.sqrt(np.asarray(x, dtype=float)) / s(t)

    def inverse(z, t):
        return (np.asarray(z, dtype=float) * s(t) / 2.0) ** 2

    def jac(x, t):
        return (1.0 / (s(t) * np.sqrt(np.asarray(x, dtype=float))))[..., None]

    def dt(x, t):
        return -2.0 * np.sqrt(np.asarray(x, dtype=float)) * sdot(t) / s(t) ** 2

    def hessian(x, t):
        x = np.asarray(x, dtype=float)
        return (-0.5 / (s(t) * x**1.5))[..., None, None]

    timevar = not (np.isclose(sdot(0.0), 0.0) and np.isclose(sdot(0.7), 0.0) and np.isclose(s(0.0), s(1.3)))
    return Diffeomorphism(
        forward, inverse, jac, dt, (0,), box, timevar,
        image_contains=lambda z, t: np.all(np.asarray(z) > 0, axis=-1),
        hessian=hessian, name="cir",
    )


def gbm_diffeo(gamma, box: Box) -> Diffeomorphism:
    """``Lambda(x) = gamma^{-1} log x`` for ``sigma_ij = x_i gamma_ij``."""
    gamma = np.array(gamma, dtype=float)
    ginv = np.linalg.inv(gamma)
    d = gamma.shape[0]

    def forward(x, t):
        return np.log(np.asarray(x, dtype=float)) @ ginv.T

    def inverse(z, t):
        return np.exp(np.asarray(z, dtype=float) @ gamma.T)

    def jac(x, t):
        x = np.asarray(x, dtype=float)
        return ginv / x[..., None, :]

    def hessian(x, t):
        x = np.asarray(x, dtype=float)
        H = np.zeros(x.shape[:-1] + (d, d, d))
        idx = np.arange(d)
        H[..., :, idx, idx] = -ginv / (x**2)[..., None, :]
        return H

    return Diffeomorphism(forward, inverse, jac, _zeros_dt, tuple(range(d)), box, False, hessian=hessian, name="gbm")


def heisenberg_diffeo(A, box: Box, Adot=None) -> Diffeomorphism:
    """``Lambda_t(xi, z) = (xi, z - xi^T A(t) xi / 2)``."""
    A_fn = _as_matrix_fn(A)
    if Adot is None:
        Adot_fn = (lambda t: np.zeros_like(A_fn(0.0))) if not callable(A) else None
    else:
        Adot_fn = _as_matrix_fn(Adot)
    if Adot_fn is None:
        raise ValueError("a time-dependent A needs its derivative Adot")
    d = A_fn(0.0).shape[0]
    p = d + 1
    timevar = callable(A)

    def quad(M, xi):
        return 0.5 * np.einsum("...i,ij,...j->...", xi, M, xi)

    def forward(x, t):
        x = np.asarray(x, dtype=float)
        xi = x[..., :d]
        return np.concatenate([xi, (x[..., d] - quad(A_fn(t), xi))[..., None]], axis=-1)

    def inverse(z, t):
        z = np.asarray(z, dtype=float)
        xi = z[..., :d]
        return np.concatenate([xi, (z[..., d] + quad(A_fn(t), xi))[..., None]], axis=-1)

    def jac(x, t):
        x = np.asarray(x, dtype=float)
        M = A_fn(t)
        J = np.broadcast_to(np.eye(p), x.shape[:-1] + (p, p)).copy()
        J[..., d, :d] = -0.5 * x[..., :d] @ (M + M.T)
        return J

    def dt(x, t):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        out[..., d] = -quad(Adot_fn(t), x[..., :d])
        return out

    def hessian(x, t):
        x = np.asarray(x, dtype=float)
        M = A_fn(t)
        H = np.zeros(x.shape[:-1] + (p, p, p))
        H[..., d, :d, :d] = -0.5 * (M + M.T)
        return H

    return Diffeomorphism(forward, inverse, jac, dt, tuple(range(d)), box, timevar, hessian=hessian, name="heisenberg")


def closed_form_diffeo(catalog_id: str, params: dict) -> Diffeomorphism:
    """Analytic chart for a catalog family.

    ``params`` carries ``box`` plus the family's coefficients: ``p, d`` and an
    optional ``scale`` for the identity/affine family, ``s`` and ``sdot``
    (or a constant ``sigma``) for CIR, ``gamma`` for GBM, ``A`` (and
    ``Adot`` when ``A`` is a function of time) for Heisenberg.
    """
    box = params["box"]
    if catalog_id in ("bm", "identity", "nonaffine_drift"):
        p = params.get("p", 1)
        return identity_diffeo(p, params.get("d", p), box, params.get("scale", 1.0), name=catalog_id)
    if catalog_id == "ou":
        return identity_diffeo(1, 1, box, 1.0 / float(params["sigma"]), name="ou")
    if catalog_id in ("cir", "cir_const", "cir_timevar"):
        if "s" in params:
            return cir_diffeo(params["s"], params.get("sdot", 0.0), box)
        return cir_diffeo(float(params["sigma"]), 0.0, box)
    if catalog_id == "gbm":
        return gbm_diffeo(params["gamma"], box)
    if catalog_id == "heisenberg":
        return heisenberg_diffeo(params["A"], box, params.get("Adot"))
    raise UnknownModel(f"no closed-form diffeomorphism for {catalog_id!r}")


@dataclass
class P3Result:
    report: CheckReport
    kappa: Optional[Callable]
    transformed: SdeModel


def verify_p3(
    diffeo,
    model: SdeModel,
    n_points: int = 100,
    tol: float = 1e-5,
    seed: int = 0,
    raise_on_fail: bool = False,
) -> P3Result:
    """Check that the pushed-forward diffusion is ``[I_r | kappa; 0 0]``.

    The residual is the largest deviation of the left ``r`` columns from
    ``[I_r; 0]`` and of the bottom rows from zero. ``kappa`` is returned as a
    field on chart coordinates and must not depend on the first ``r`` of them.
    """
    p, d, r = model.p, model.d, model.r
    chart = transform_sde(model, diffeo, seed=seed)
    t_range = None if chart.time_homogeneous else (0.0, model.T)
    z, t = sample_interior(chart.box, n_points, seed=seed + 1, t_range=t_range, margin=0.02, region=chart.region)
    target = np.zeros((p, r))
    target[:r, :r] = np.eye(r)
    S = by_time(chart.sigma, z, t)
    dev = np.abs(S[..., :r] - target)
    if d > r:
        dev = np.concatenate([dev, np.abs(S[..., r:, r:])], axis=-1)
    shape_res = np.max(dev, axis=(-1, -2))
    kap_res = np.zeros(len(z))
    skipped = 0
    kappa = None
    if d > r:

        def kappa(zz, tt):
            return np.asarray(chart.sigma(zz, tt), dtype=float)[..., :r, r:]

        def dk(zb, tt):
            return jacobian(kappa, zb, tt, JacobianSpec(), box=chart.box)[..., :r]

        try:
            kap_res = np.max(np.abs(by_time(dk, z, t)), axis=(-1, -2, -3))
        except (DomainExit, ExactSdeError):
            for i, (zi, ti) in enumerate(zip(z, t)):
                try:
                    kap_res[i] = np.max(np.abs(dk(zi[None], ti)))
                except (DomainExit, ExactSdeError):
                    skipped += 1
    worst_i = int(np.argmax(np.maximum(shape_res, kap_res)))
    max_res = float(max(shape_res.max(), kap_res.max()))
    verdict = "pass" if max_res <= tol else "fail"
    if skipped > 0.2 * len(z):
        verdict = "inconclusive"
    report = CheckReport(
        verdict,
        max_res,
        (z[worst_i], float(t[worst_i])),
        {"shape": float(shape_res.max()), "kappa_bar": float(kap_res.max())},
        len(z),
        skipped,
        tol,
        "p3",
    )
    if raise_on_fail and verdict == "fail":
        if kap_res.max() > tol:
            raise KappaDependsOnBar("kappa depends on the bar coordinates", point=report.worst_point, residual=max_res)
        raise NotCanonical("pushed-forward diffusion is not canonical", point=report.worst_point, residual=max_res)
    return P3Result(report, kappa, chart)


# ---------------------------------------------------------------------------
# numerical straightening


# RK4 step along the flows, measured in units of 1 / Lipschitz(sigma)
FLOW_STEP = 0.02
NEWTON_TOL = 1e-13
NEWTON_MAXIT = 30


def choose_permutation(S: np.ndarray, r: int) -> tuple:
    """Greedy column order with the largest pivots ``alpha_{i,i}``.

    At stage ``i`` the candidate column is expressed in the frame
    ``[chosen columns, e_i, ..., e_{p-1}]``; its ``i``-th coefficient is the
    pivot of that stage.
    """
    p, d = S.shape
    chosen = []
    for i in range(r):
        M = np.concatenate([S[:, chosen], np.eye(p)[:, i:]], axis=1)
        best, best_c = -1.0, None
        for c in range(d):
            if c in chosen:
                continue
            alpha = np.linalg.solve(M, S[:, c])
            score = abs(alpha[i])
            if score > 1e-8 * max(np.linalg.norm(alpha), 1e-300) and score > best:
                best, best_c = score, c
        if best_c is None:
            raise PermutationExhausted(f"no column gives a nonzero pivot at stage {i + 1}")
        chosen.append(best_c)
    rest = [c for c in range(d) if c not in chosen]
    return tuple(chosen + rest)


@dataclass
class NumericDiffeo:
    """Straightening chart built from the flows of commuting columns.

    With ``V_1..V_r`` the selected columns of ``sigma(., t)``, the inverse map
    is the combined flow

        Lambda_t^{-1}(y) = Fl^{sum_i (y_i - a_i) V_i}_1 (a_1, .., a_r, y_{r+1}, .., y_p)

    where ``a`` is the anchor; commuting fields make the flows of the
    individual columns compose into one flow. The forward map finds the flow
    times ``tau`` carrying ``x`` back onto the slice ``{x_i = a_i, i <= r}`` by
    Newton's method, whose Jacobian is ``-sigma^pi[:r, :r]`` at the landing
    point. Hence ``forward(anchor) = anchor``. Time is frozen along flows.
    """

    model: SdeModel
    anchor: np.ndarray
    t_anchor: float
    perm: tuple
    r: int
    valid_box: Box
    time_dependent: bool
    flow_step: float = FLOW_STEP
    lipschitz: float = 1.0
    cache_size: int = 4096
    hessian: Optional[Callable] = None
    image_contains: Optional[Callable] = None
    name: str = "numeric"
    _cache: dict = field(default_factory=dict, repr=False)

    def _fields(self, x, t):
        S = np.asarray(self.model.sigma(x, t), dtype=float)
        return S[..., list(self.perm[: self.r])]  # (..., p, r)

    def _flow(self, x0, coef, t):
        """Unit-time flow of ``sum_i coef_i V_i`` from ``x0`` (batched).

        Returns ``(x, ok)``; points that leave the model box are frozen at
        their last interior position and flagged in ``ok``.
        """
        x = np.array(x0, dtype=float)
        coef = np.array(coef, dtype=float)
        ok = np.ones(x.shape[:-1], dtype=bool)
        span = float(np.max(np.sum(np.abs(coef), axis=-1))) if coef.size else 0.0
        n = max(4, int(np.ceil(span * self.lipschitz / self.flow_step)))
        h = 1.0 / n

        def f(y):
            return np.einsum("...ij,...j->...i", self._fields(y, t), coef)

        box = self.model.box
        for _ in range(n):
            k1 = f(x)
            k2 = f(x + 0.5 * h * k1)
            k3 = f(x + 0.5 * h * k2)
            k4 = f(x + h * k3)
            nxt = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            inside = box.contains(nxt) & np.all(np.isfinite(nxt), axis=-1)
            if not np.all(inside):
                ok &= inside
                coef[~inside] = 0.0
                nxt = np.where(inside[..., None], nxt, x)
            x = nxt
        return x, ok

    def try_inverse(self, y, t):
        y = np.asarray(y, dtype=float)
        r = self.r
        start = np.array(y, copy=True)
        start[..., :r] = self.anchor[:r]
        if not np.all(self.model.box.contains(start)):
            ok0 = self.model.box.contains(start)
            x = np.full(y.shape, np.nan)
            if np.any(ok0):
                x[ok0], ok1 = self.try_inverse(y[ok0], t)
                ok0 = ok0.copy()
                ok0[ok0] = ok1
            return x, ok0
        coef = y[..., :r] - self.anchor[:r]
        x, ok = self._flow(start, coef, t)
        return np.where(ok[..., None], x, np.nan), ok

    def inverse(self, y, t):
        y = np.asarray(y, dtype=float)
        x, ok = self.try_inverse(y, t)
        if not np.all(ok):
            i = int(np.argmax(~np.atleast_1d(ok)))
            raise FlowEscape("inverse flow left the model domain", point=np.atleast_2d(y)[i])
        return x

    def _forward_batch(self, x, t):
        """Damped Newton for the flow times, vectorized over points."""
        r = self.r
        a = self.anchor[:r]
        n = len(x)
        tau = np.zeros((n, r))
        z = x.copy()
        F = z[:, :r] - a
        normF = np.max(np.abs(F), axis=1)
        done = normF <= NEWTON_TOL * (1.0 + np.abs(a).max())
        for _ in range(NEWTON_MAXIT):
            if np.all(done):
                break
            S = self._fields(z, t)[:, :r, :]
            step = np.zeros_like(tau)
            act = ~done
            step[act] = np.linalg.solve(S[act], F[act][..., None])[..., 0]
            lam = np.ones(n)
            pending = act.copy()
            for _ in range(40):
                trial = tau + lam[:, None] * step
                zt, ok = self._flow(x[pending], -trial[pending], t)
                Ft = zt[:, :r] - a
                nt = np.max(np.abs(Ft), axis=1)
                accept = ok & (nt <= (1.0 - 1e-4 * lam[pending]) * normF[pending] + 1e-15)
                idx = np.flatnonzero(pending)
                acc = idx[accept]
                tau[acc] = trial[acc]
                z[acc] = zt[accept]
                F[acc] = Ft[accept]
                small = np.max(np.abs(lam[acc, None] * step[acc]), axis=1)
                done[acc] = (nt[accept] <= NEWTON_TOL * (1.0 + np.abs(a).max())) | (
                    small <= NEWTON_TOL * np.maximum(1.0, np.max(np.abs(tau[acc]), axis=1))
                )
                normF[acc] = nt[accept]
                pending[acc] = False
                if not np.any(pending):
                    break
                lam[pending] *= 0.5
            if np.any(pending):
                # line search stalled: accept convergence if already at the rounding floor
                stuck = np.flatnonzero(pending)
                floor = normF[stuck] <= 1e-11 * (1.0 + np.abs(a).max())
                done[stuck[floor]] = True
                if not np.all(floor):
                    i = stuck[~floor][0]
                    raise FlowEscape("could not flow the point back to the anchor slice", point=x[i])
        if not np.all(done):
            i = int(np.argmax(~done))
            raise FlowEscape("Newton iteration for the flow times did not converge", point=x[i])
        out = z.copy()
        out[:, :r] = a + tau
        return out

    def forward(self, x, t):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            key = (np.round(x / 1e-12).astype(np.int64).tobytes(), round(float(t) / 1e-12))
            hit = self._cache.get(key)
            if hit is not None:
                return hit.copy()
            val = self._forward_batch(x[None], t)[0]
            if len(self._cache) >= self.cache_size:
                self._cache.clear()
            self._cache[key] = val
            return val.copy()
        flat = x.reshape(-1, x.shape[-1])
        return self._forward_batch(flat, t).reshape(x.shape)

    def jac(self, x, t):
        return jacobian(self.forward, x, t, JacobianSpec("central", 1e-5))

    def dt(self, x, t):
        if not self.time_dependent:
            return np.zeros(np.shape(x))
        h = 1e-5 * max(1.0, abs(t))
        if t - h >= 0:
            return (self.forward(x, t + h) - self.forward(x, t - h)) / (2 * h)
        f0, f1, f2 = self.forward(x, t), self.forward(x, t + h), self.forward(x, t + 2 * h)
        return (-3 * f0 + 4 * f1 - f2) / (2 * h)

    def in_image(self, z, t):
        return all_finite(np.asarray(z, dtype=float))

    def as_diffeo(self) -> Diffeomorphism:
        return Diffeomorphism(
            self.forward, self.inverse, self.jac, self.dt, self.perm, self.valid_box,
            self.time_dependent, name=self.name,
        )


def flow_straighten(
    model: SdeModel,
    anchor,
    t_anchor: float = 0.0,
    half_width_frac: float = 0.05,
    flow_step: float = FLOW_STEP,
) -> NumericDiffeo:
    """Build a straightening chart around ``anchor`` from the diffusion flows.

    The column order maximizes the stagewise pivots at the anchor; the chart
    is declared valid on the model box intersected with a cube of half-width
    ``half_width_frac`` of the box width around the anchor.
    """
    anchor = np.asarray(anchor, dtype=float)
    if not model.box.contains(anchor):
        raise DomainExit("anchor is not inside the model domain", point=anchor)
    S = np.asarray(model.sigma(anchor, t_anchor), dtype=float)
    perm = choose_permutation(S, model.r)
    valid = model.box.around(anchor, half_width_frac * model.box.width)
    dS = model.dsigma(anchor, t_anchor)[:, list(perm[: model.r]), :]
    lip = max(float(np.max(np.sum(np.abs(dS), axis=-1))), 1e-3)
    nd = NumericDiffeo(
        model, anchor, float(t_anchor), perm, model.r, valid, not model.time_homogeneous,
        flow_step=flow_step, lipschitz=lip,
    )
    J = nd.jac(anchor, t_anchor)
    if abs(np.linalg.det(J)) < 1e-10:
        raise SingularJacobian("straightening chart is singular at the anchor", point=anchor)
    return nd


def with_perm(diffeo: Diffeomorphism, perm) -> Diffeomorphism:
    return replace(diffeo, perm=tuple(perm))
