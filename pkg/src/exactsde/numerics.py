"""Shared numerical kernels.

Finite-difference Jacobians, fixed-step RK4 for array-valued ODEs, a jittered
Cholesky factorization, reproducible RNG streams and quasi-random interior
sampling. Everything here works in float64.

Coefficient callbacks throughout the package are *batched*: a field receives
``x`` of shape ``(..., p)`` plus a scalar time and returns ``(..., *out)``.
The helpers below exploit that by evaluating whole stencils in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

from .errors import DomainExit, NonFinite, NotPsd

Field = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class Box:
    """Axis-aligned open box ``prod_i (lower_i, upper_i)``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("box must be bounded")
        if np.any(hi <= lo):
            raise ValueError("box must be nonempty")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        # column loop: reductions over a short trailing axis are slow in numpy
        ok = (x[..., 0] > self.lower[0]) & (x[..., 0] < self.upper[0])
        for i in range(1, self.dim):
            ok &= (x[..., i] > self.lower[i]) & (x[..., i] < self.upper[i])
        return ok

    def shrink(self, frac: float) -> "Box":
        pad = frac * self.width
        return Box(self.lower + pad, self.upper - pad)

    def around(self, point, half_width) -> "Box":
        """Intersection of this box with ``point +- half_width``."""
        point = np.asarray(point, dtype=float)
        lo = np.maximum(self.lower, point - half_width)
        hi = np.minimum(self.upper, point + half_width)
        return Box(lo, hi)


@dataclass(frozen=True)
class Grid:
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float).ravel()
        if nodes.size < 2:
            raise ValueError("a grid needs at least two nodes")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("grid nodes must be strictly increasing")
        if nodes[0] < 0:
            raise ValueError("grid starts before time 0")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, start: float, end: float, n_nodes: int) -> "Grid":
        return cls(np.linspace(start, end, int(n_nodes)))

    @classmethod
    def from_step(cls, start: float, end: float, dt: float) -> "Grid":
        n = int(round((end - start) / dt))
        if n < 1 or not np.isclose(start + n * dt, end, rtol=0, atol=1e-9 * max(1.0, abs(end))):
            raise ValueError(f"dt={dt} does not divide [{start}, {end}]")
        return cls.uniform(start, end, n + 1)

    @property
    def start(self) -> float:
        return float(self.nodes[0])

    @property
    def end(self) -> float:
        return float(self.nodes[-1])

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.nodes)

    def __len__(self):
        return self.nodes.size

    def check_horizon(self, T: float) -> None:
        if self.end >= T:
            raise ValueError(f"grid end {self.end} not inside [0, {T})")

    def index_of(self, t: float, atol: float = 1e-12) -> int:
        k = int(np.argmin(np.abs(self.nodes - t)))
        if abs(self.nodes[k] - t) > atol * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not a grid node")
        return k

    def nests(self, coarse: "Grid") -> bool:
        """True when every node of ``coarse`` is also a node of this grid."""
        idx = np.searchsorted(self.nodes, coarse.nodes)
        idx = np.clip(idx, 0, len(self) - 1)
        near = np.minimum(
            np.abs(self.nodes[idx] - coarse.nodes),
            np.abs(self.nodes[np.maximum(idx - 1, 0)] - coarse.nodes),
        )
        return bool(np.all(near <= 1e-12 * np.maximum(1.0, np.abs(coarse.nodes))))


@dataclass(frozen=True)
class JacobianSpec:
    mode: str = "central"  # or "analytic"
    fd_step: float = 1e-5

    def __post_init__(self):
        if self.mode not in ("central", "analytic"):
            raise ValueError(f"unknown Jacobian mode {self.mode!r}")
        if not (0.0 < self.fd_step <= 1e-2):
            raise ValueError("fd_step must lie in (0, 1e-2]")


DEFAULT_JACOBIAN = JacobianSpec()


@dataclass
class RngStream:
    """Independent normal stream keyed by ``(master_seed, path_index)``.

    ``stream`` separates auxiliary sequences that belong to the same index
    (e.g. Brownian increments and conditional corrections).
    """

    master_seed: int
    path_index: int
    stream: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        ss = np.random.SeedSequence(
            entropy=int(self.master_seed) % 2**64, spawn_key=(int(self.path_index), int(self.stream))
        )
        self._gen = np.random.Generator(np.random.PCG64(ss))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size) -> np.ndarray:
        return self._gen.standard_normal(size)


def _fd_steps(x: np.ndarray, fd_step: float) -> np.ndarray:
    return fd_step * np.maximum(1.0, np.abs(x))


def jacobian(
    field: Field,
    point,
    t: float,
    spec: JacobianSpec = DEFAULT_JACOBIAN,
    box: Optional[Box] = None,
    analytic: Optional[Field] = None,
) -> np.ndarray:
    """Spatial Jacobian of a batched field.

    ``point`` has shape ``(..., p)``; the field output ``(..., *out)`` becomes
    ``(..., *out, p)`` with the differentiation index last. Central
    differences use the relative step ``fd_step * max(1, |x_k|)``.
    """
    x = np.asarray(point, dtype=float)
    if spec.mode == "analytic":
        if analytic is None:
            raise ValueError("analytic mode needs an analytic Jacobian callback")
        return np.asarray(analytic(x, t), dtype=float)
    p = x.shape[-1]
    batch = x.shape[:-1]
    h = _fd_steps(x, spec.fd_step)  # (..., p)
    offs = h[..., :, None] * np.eye(p)  # (..., dir, p)
    xp = x[..., None, :] + offs
    xm = x[..., None, :] - offs
    if box is not None:
        if not (np.all(box.contains(xp)) and np.all(box.contains(xm))):
            bad = ~(box.contains(xp) & box.contains(xm))
            where = np.argwhere(bad)[0]
            raise DomainExit("finite-difference stencil leaves the domain", point=x[tuple(where[:-1])])
    stacked = np.concatenate([xp, xm], axis=-2).reshape(-1, p)
    out = np.asarray(field(stacked, t), dtype=float)
    tail = out.shape[1:]
    out = out.reshape(batch + (2, p) + tail)
    nb = len(batch)
    diff = np.take(out, 0, axis=nb) - np.take(out, 1, axis=nb)
    hb = h.reshape(batch + (p,) + (1,) * len(tail))
    jac = diff / (2.0 * hb)  # (..., dir, *tail)
    return np.moveaxis(jac, len(batch), -1)


def time_derivative(
    field: Field,
    point,
    t: float,
    spec: JacobianSpec = DEFAULT_JACOBIAN,
    t_min: float = 0.0,
) -> np.ndarray:
    """d/dt of a batched field at fixed state; one-sided near ``t_min``."""
    x = np.asarray(point, dtype=float)
    h = spec.fd_step * max(1.0, abs(t))
    if t - h >= t_min:
        return (np.asarray(field(x, t + h)) - np.asarray(field(x, t - h))) / (2 * h)
    f0 = np.asarray(field(x, t))
    f1 = np.asarray(field(x, t + h))
    f2 = np.asarray(field(x, t + 2 * h))
    return (-3 * f0 + 4 * f1 - f2) / (2 * h)


def rk4_step(rhs, y: np.ndarray, t: float, h: float) -> np.ndarray:
    k1 = rhs(y, t)
    k2 = rhs(y + 0.5 * h * k1, t + 0.5 * h)
    k3 = rhs(y + 0.5 * h * k2, t + 0.5 * h)
    k4 = rhs(y + h * k3, t + h)
    return y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def solve_matrix_ode(
    rhs: Callable[[np.ndarray, float], np.ndarray],
    M0,
    grid: Grid,
    substeps: int = 4,
    adaptive: bool = False,
) -> np.ndarray:
    """Integrate ``dM/dt = rhs(M, t)`` and return M at every grid node.

    Works for any array shape. The default is classical RK4 with
    ``substeps`` equal steps per grid interval; ``adaptive=True`` hands the
    flattened system to scipy's RK45 instead.
    """
    M0 = np.array(M0, dtype=float)
    nodes = grid.nodes
    out = np.empty((nodes.size,) + M0.shape)
    out[0] = M0
    if adaptive:
        from scipy.integrate import solve_ivp

        sol = solve_ivp(
            lambda t, y: np.asarray(rhs(y.reshape(M0.shape), t), dtype=float).ravel(),
            (nodes[0], nodes[-1]),
            M0.ravel(),
            t_eval=nodes,
            rtol=1e-11,
            atol=1e-13,
        )
        if not sol.success:
            raise NonFinite(sol.message)
        out[:] = sol.y.T.reshape(out.shape)
    else:
        M = M0
        for k in range(nodes.size - 1):
            t0 = nodes[k]
            h = (nodes[k + 1] - t0) / substeps
            for j in range(substeps):
                M = rk4_step(rhs, M, t0 + j * h, h)
            out[k + 1] = M
    if not np.all(np.isfinite(out)):
        bad = int(np.argmax(~np.all(np.isfinite(out.reshape(nodes.size, -1)), axis=1)))
        raise NonFinite(f"ODE solution became non-finite at t={nodes[bad]}")
    return out


JITTER_LADDER = (0.0, 1e-14, 1e-12, 1e-10, 1e-8, 1e-6)


def psd_factor(S, ladder=JITTER_LADDER):
    """Cholesky factor of a symmetric (semi)definite matrix with jitter.

    Returns ``(L, jitter)`` where ``L @ L.T == S + jitter * I``. Jitter levels
    are relative to ``||S||_2``; anything beyond ``1e-6 * ||S||`` raises.
    """
    S = np.asarray(S, dtype=float)
    norm = np.linalg.norm(S, 2) if S.size else 0.0
    if not np.allclose(S, S.T, rtol=0, atol=1e-10 * max(norm, 1e-300)):
        raise NotPsd("matrix is not symmetric")
    if norm == 0.0:
        return np.zeros_like(S), 0.0
    S = 0.5 * (S + S.T)
    eye = np.eye(S.shape[0])
    for level in ladder:
        jitter = level * norm
        try:
            return np.linalg.cholesky(S + jitter * eye), jitter
        except np.linalg.LinAlgError:
            continue
    raise NotPsd(f"factorization failed with jitter up to {ladder[-1] * norm:.3g}")


def by_time(fn, x, t):
    """Apply ``fn(x_batch, t_scalar)`` to points grouped by their time."""
    x = np.asarray(x, dtype=float)
    t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
    uniq = np.unique(t)
    if uniq.size == 1:
        return np.asarray(fn(x, float(uniq[0])))
    parts = {}
    for tt in uniq:
        m = t == tt
        parts[tt] = (m, np.asarray(fn(x[m], float(tt))))
    first = next(iter(parts.values()))[1]
    out = np.empty(x.shape[:-1] + first.shape[1:], dtype=first.dtype)
    for m, val in parts.values():
        out[m] = val
    return out


def eval_region(region, x, t) -> np.ndarray:
    """Boolean mask of a batched region predicate."""
    return by_time(lambda xb, tt: np.asarray(region(xb, tt), dtype=bool), x, t).astype(bool)


def sample_interior(
    box: Box,
    n: int,
    seed: int = 0,
    t_range: Optional[tuple] = None,
    margin: float = 0.01,
    region: Optional[Callable] = None,
):
    """Scrambled Halton points inside ``box`` (and optionally a time range).

    Points stay ``margin`` (fraction of the width) away from every face.
    ``region(x, t)`` (batched over ``x``, scalar ``t``) can reject points of
    a non-box admissible set; the
    sampler oversamples until ``n`` points are accepted or gives up.
    Returns ``(x, t)`` with shapes ``(n, p)`` and ``(n,)``.
    """
    inner = box.shrink(margin)
    p = box.dim
    dim = p + (1 if t_range is not None else 0)
    sampler = qmc.Halton(d=dim, scramble=True, seed=seed)
    xs, ts = [], []
    have = 0
    for _ in range(50):
        u = sampler.random(max(n, 16) if region is None else 4 * max(n, 16))
        x = inner.lower + u[:, :p] * inner.width
        if t_range is not None:
            lo, hi = t_range
            pad = margin * (hi - lo)
            t = lo + pad + u[:, p] * (hi - lo - 2 * pad)
        else:
            t = np.zeros(len(u))
        if region is not None:
            ok = eval_region(region, x, t)
            x, t = x[ok], t[ok]
        xs.append(x)
        ts.append(t)
        have += len(x)
        if have >= n:
            break
    x = np.concatenate(xs)[:n]
    t = np.concatenate(ts)[:n]
    if len(x) < n:
        raise DomainExit(f"could only place {len(x)} of {n} sample points in the region")
    return x, t


def all_finite(x: np.ndarray) -> np.ndarray:
    """Row-wise finiteness over the last axis."""
    ok = np.isfinite(x[..., 0])
    for i in range(1, x.shape[-1]):
        ok &= np.isfinite(x[..., i])
    return ok


def inf_norm(M: np.ndarray) -> np.ndarray:
    """Matrix infinity norm (max absolute row sum), batched."""
    M = np.asarray(M)
    return np.max(np.sum(np.abs(M), axis=-1), axis=-1)
