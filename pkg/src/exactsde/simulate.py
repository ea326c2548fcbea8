"""Path simulation: the bias-free Gaussian sampler and time-stepping baselines.

The exact sampler draws ``Y`` on the output grid from independent Gaussian
increments with covariance ``int U U^T`` over each interval and maps it
through ``phi``. Euler-Maruyama and Milstein act on the original SDE.

Random numbers come in blocks of ``BLOCK`` paths. Block ``b`` owns the
stream keyed by ``(seed, b)`` and draws one ``(BLOCK, d)`` slab of standard
normals per time step, so results depend neither on the worker count nor on
how many paths are requested (the first ``n`` paths of a larger run are the
same paths).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .commutator import check_sigma_commutator
from .errors import NonCommutative, NoSurvivors, OdeEscape
from .model import SdeModel, try_inverse
from .numerics import Grid, RngStream, all_finite, psd_factor

BLOCK = 4096
NEVER = -1


@dataclass
class PathBundle:
    """Simulated paths on ``grid``.

    ``states[i, k]`` is the state of path ``i`` at node ``k``. Paths that
    leave the domain carry NaN from ``exit_index[i]`` on; ``NEVER`` (-1)
    marks paths that stayed inside up to the last node.
    """

    grid: Grid
    states: np.ndarray
    exit_index: np.ndarray
    seed: int
    scheme: str = "exact"
    block_size: int = BLOCK
    wall_time: float = field(default=0.0, compare=False)

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def p(self) -> int:
        return self.states.shape[2]

    def alive(self, k: Optional[int] = None) -> np.ndarray:
        """Survival mask, per path at node ``k`` or ``(n_paths, nodes)``."""
        ex = self.exit_index
        if k is None:
            idx = np.arange(len(self.grid))
            return (ex[:, None] == NEVER) | (idx[None, :] < ex[:, None])
        return (ex == NEVER) | (k < ex)

    def survival(self) -> np.ndarray:
        return self.alive().mean(axis=0)

    def to_csv(self, path) -> None:
        """One row per ``(path, node)``: ``path,t,x1..xp,alive``."""
        n, m, p = self.states.shape
        pid = np.repeat(np.arange(n), m)
        t = np.tile(self.grid.nodes, n)
        alive = self.alive().ravel().astype(int)
        table = np.column_stack([pid, t, self.states.reshape(n * m, p), alive])
        header = ",".join(["path", "t"] + [f"x{i + 1}" for i in range(p)] + ["alive"])
        fmt = ["%d", "%.17g"] + ["%.17g"] * p + ["%d"]
        with open(path, "w", newline="") as fh:
            fh.write(header + "\n")
            np.savetxt(fh, table, fmt=fmt, delimiter=",")


@dataclass(frozen=True)
class IncrementLaw:
    """Gaussian law of ``int_{t0}^{t1} U dW``: covariance, factor and ``int U du``."""

    t0: float
    t1: float
    cov: np.ndarray
    factor: np.ndarray
    jitter: float
    mean_map: np.ndarray


def precompute_increment_laws(rep, grid: Grid) -> list:
    """Interval covariances from the running integrals carried by ``rep``.

    ``rep`` integrates ``S' = U U^T`` and ``M' = U`` alongside ``T``; the
    interval laws are differences of those tables.
    """
    _check_grid(rep, grid)
    S = np.stack([rep.cov_integral(t) for t in grid.nodes])
    M = np.stack([rep.mean_integral(t) for t in grid.nodes])
    laws = []
    for k in range(len(grid) - 1):
        cov = S[k + 1] - S[k]
        cov = 0.5 * (cov + cov.T)
        L, jitter = psd_factor(cov)
        laws.append(IncrementLaw(float(grid.nodes[k]), float(grid.nodes[k + 1]), cov, L, jitter, M[k + 1] - M[k]))
    return laws


def _check_grid(rep, grid: Grid) -> None:
    if abs(grid.start - rep.s) > 1e-12:
        raise ValueError(f"grid starts at {grid.start}, representation at {rep.s}")
    if grid.end > rep.valid_until + 1e-12:
        raise OdeEscape(f"grid ends at {grid.end}, representation valid until {rep.valid_until}")


def _blocks(n_paths: int, block_size: int):
    n_blocks = -(-n_paths // block_size)
    return [(b, b * block_size, min(n_paths, (b + 1) * block_size)) for b in range(n_blocks)]


def _run_blocks(fn, n_paths: int, block_size: int, threads: Optional[int]):
    """Apply ``fn(b, lo, hi)`` to every block; results are returned in block order."""
    jobs = _blocks(n_paths, block_size)
    workers = min(len(jobs), threads or 1)
    if workers <= 1:
        return [fn(*job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))


def default_threads() -> int:
    return os.cpu_count() or 1


def _chart_tables(rep, grid: Grid) -> list:
    """Per node ``(c, G U^{-1}, X~)`` so that ``chart = c + Y (G U^{-1})^T``."""
    out = []
    for t in grid.nodes:
        st = rep.state_at(t)
        kap = rep.kappa_at(t, st["xt"])
        G = np.concatenate([np.eye(rep.r), kap], axis=1)
        d = rep.d
        V = np.zeros((d, d))
        V[: rep.r, : rep.r] = st["Tinv"]
        V[: rep.r, rep.r :] = st["Tinv"] @ rep.kappa_s - kap
        V[rep.r :, rep.r :] = np.eye(d - rep.r)
        out.append((st["c"], G @ V, st["xt"]))
    return out


def _map_exact(rep, model, tables, t: float, k: int, Y: np.ndarray) -> tuple:
    """``phi(Y, t)`` with a validity mask (chart image, chart box, model domain)."""
    c, GV, xt = tables[k]
    z = np.empty(Y.shape[:-1] + (rep.p,))
    z[..., : rep.r] = c + Y @ GV.T
    z[..., rep.r :] = xt
    in_image = getattr(rep.diffeo, "in_image", None)
    ok = np.asarray(in_image(z, t), dtype=bool) if in_image is not None else np.ones(Y.shape[0], bool)
    if ok.all():
        x, good = try_inverse(rep.diffeo, z, t)
        ok = good.copy()
    else:
        x = np.full(z.shape, np.nan)
        if ok.any():
            x[ok], good = try_inverse(rep.diffeo, z[ok], t)
            ok[ok] = good
    ok &= all_finite(x)
    vb = getattr(rep.diffeo, "valid_box", None)
    if vb is not None:
        ok &= vb.contains(np.where(ok[:, None], x, vb.center))
    if model is not None:
        if ok.all():
            ok = np.asarray(model.contains(x, t), dtype=bool)
        elif ok.any():
            ok[ok] = model.contains(x[ok], t)
    return x, ok


def _finish(states: np.ndarray, dead: np.ndarray, exit_index: np.ndarray, k: int) -> None:
    """Record first exits at node ``k`` and blank the remainder of those paths."""
    new = dead & (exit_index == NEVER)
    exit_index[new] = k
    states[new, k:] = np.nan


@dataclass(frozen=True)
class ExactPlan:
    """Everything the exact sampler needs that does not depend on the noise."""

    grid: Grid
    laws: list
    factors: np.ndarray
    tables: list


def prepare_exact(rep, grid: Grid, laws: Optional[list] = None) -> ExactPlan:
    if laws is None:
        laws = precompute_increment_laws(rep, grid)
    else:
        _check_grid(rep, grid)
    factors = np.stack([law.factor for law in laws])
    return ExactPlan(grid, laws, factors.transpose(0, 2, 1).copy(), _chart_tables(rep, grid))


def simulate_exact(
    rep,
    grid: Grid,
    n_paths: int,
    seed: int,
    model: Optional[SdeModel] = None,
    laws: Optional[list] = None,
    threads: Optional[int] = None,
    block_size: int = BLOCK,
    plan: Optional[ExactPlan] = None,
) -> PathBundle:
    """Bias-free paths ``X_t = phi(Y_t, t)`` at the nodes of ``grid``.

    A path stops at the first node where ``phi`` leaves the chart or the
    model domain; exits between nodes go unnoticed. ``plan`` (from
    ``prepare_exact``) moves all deterministic work out of the call.
    """
    import time

    if plan is None or plan.grid is not grid:
        plan = prepare_exact(rep, grid, laws)
    tables, Lt = plan.tables, plan.factors
    K, p, d = len(grid), rep.p, rep.d
    x0 = np.asarray(rep.x, dtype=float)

    def block(b, lo, hi):
        n = hi - lo
        Z = RngStream(seed, b).normal((K - 1, block_size, d))[:, :n]
        Y = np.cumsum(np.matmul(Z, Lt), axis=0)
        states = np.empty((n, K, p))
        states[:, 0] = x0
        alive = np.ones(n, dtype=bool)
        exit_index = np.full(n, NEVER, dtype=np.int64)
        for k in range(1, K):
            x, ok = _map_exact(rep, model, tables, float(grid.nodes[k]), k, Y[k - 1])
            states[:, k] = x
            if not alive.all():
                states[~alive, k] = np.nan
            if not ok.all():
                _finish(states, alive & ~ok, exit_index, k)
                alive &= ok
        return states, exit_index

    t0 = time.perf_counter()
    parts = _run_blocks(block, n_paths, block_size, threads)
    wall = time.perf_counter() - t0
    states = np.concatenate([s for s, _ in parts]) if parts else np.empty((0, K, p))
    exits = np.concatenate([e for _, e in parts]) if parts else np.empty(0, dtype=np.int64)
    return PathBundle(grid, states, exits, seed, "exact", block_size, wall)


# -- time-stepping baselines -------------------------------------------------


def _domain_ok(model: SdeModel, x: np.ndarray, t: float) -> np.ndarray:
    xc = model.clip(x) if model.clip is not None else x
    ok = all_finite(x)
    if ok.all():
        return np.asarray(model.contains(xc, t), dtype=bool)
    if ok.any():
        ok[ok] = model.contains(xc[ok], t)
    return ok


def scheme_step(model: SdeModel, scheme: str, x: np.ndarray, t: float, dt: float, dW: np.ndarray) -> np.ndarray:
    """One explicit step; coefficients see the clipped state when ``model.clip`` is set."""
    xc = model.clip(x) if model.clip is not None else x
    S = np.asarray(model.sigma(xc, t), dtype=float)
    out = x + np.asarray(model.b(xc, t), dtype=float) * dt + np.einsum("nij,nj->ni", S, dW)
    if scheme == "milstein":
        dS = model.dsigma(xc, t)
        # L[n, i, j, k] = ((grad sigma_k) sigma_j)_i
        Lc = np.einsum("nikm,nmj->nijk", dS, S)
        out = out + 0.5 * np.einsum("nijk,nj,nk->ni", Lc, dW, dW) - 0.5 * dt * np.einsum("nijj->ni", Lc)
    elif scheme != "euler":
        raise ValueError(f"unknown scheme {scheme!r}")
    return out


def _require_commutative(model: SdeModel) -> None:
    if model.d == 1:
        return
    report = check_sigma_commutator(model)
    if not report.passed:
        raise NonCommutative(
            f"Milstein without Levy areas needs commuting noise; residual {report.max_residual:.3g} "
            f"at {report.worst_point}"
        )


def _output_index(fine: Grid, out: Grid) -> np.ndarray:
    if not fine.nests(out):
        raise ValueError("output grid must be a subset of the stepping grid")
    return np.array([fine.index_of(t) for t in out.nodes])


def _time_step(
    model: SdeModel,
    scheme: str,
    grid: Grid,
    n_paths: int,
    seed: int,
    x0,
    output_grid: Optional[Grid],
    threads: Optional[int],
    block_size: int,
) -> PathBundle:
    import time

    out_grid = output_grid if output_grid is not None else grid
    out_idx = _output_index(grid, out_grid)
    slot = {int(k): j for j, k in enumerate(out_idx)}
    x0 = np.asarray(x0, dtype=float)
    p, d = model.p, model.d
    steps = grid.steps
    nodes = grid.nodes
    sqrt_dt = np.sqrt(steps)

    def block(b, lo, hi):
        n = hi - lo
        rng = RngStream(seed, b)
        x = np.tile(x0, (n, 1))
        states = np.empty((n, len(out_grid), p))
        exit_index = np.full(n, NEVER, dtype=np.int64)
        alive = np.ones(n, dtype=bool)
        if 0 in slot:
            states[:, slot[0]] = x0
        for k in range(len(steps)):
            dW = rng.normal((block_size, d))[:n] * sqrt_dt[k]
            t = float(nodes[k])
            if alive.all():
                x = scheme_step(model, scheme, x, t, steps[k], dW)
                ok = _domain_ok(model, x, float(nodes[k + 1]))
            else:
                x[alive] = scheme_step(model, scheme, x[alive], t, steps[k], dW[alive])
                ok = np.zeros(n, dtype=bool)
                ok[alive] = _domain_ok(model, x[alive], float(nodes[k + 1]))
            alive &= ok
            if k + 1 in slot:
                j = slot[k + 1]
                states[:, j] = x
                states[~alive, j] = np.nan
                newly = ~alive & (exit_index == NEVER)
                exit_index[newly] = j
                states[newly, j:] = np.nan
            elif not alive.all():
                # exit between output nodes: charged to the next output node
                nxt = int(np.searchsorted(out_idx, k + 1))
                newly = ~alive & (exit_index == NEVER)
                exit_index[newly] = nxt
                states[newly, nxt:] = np.nan
        return states, exit_index

    t0 = time.perf_counter()
    parts = _run_blocks(block, n_paths, block_size, threads)
    wall = time.perf_counter() - t0
    states = np.concatenate([s for s, _ in parts])
    exits = np.concatenate([e for _, e in parts])
    return PathBundle(out_grid, states, exits, seed, scheme, block_size, wall)


def euler_maruyama(
    model: SdeModel,
    grid: Grid,
    n_paths: int,
    seed: int,
    x0=None,
    output_grid: Optional[Grid] = None,
    threads: Optional[int] = None,
    block_size: int = BLOCK,
) -> PathBundle:
    """Explicit Euler on ``grid``; states are reported on ``output_grid``."""
    x0 = _default_x0(model, x0)
    return _time_step(model, "euler", grid, n_paths, seed, x0, output_grid, threads, block_size)


def milstein(
    model: SdeModel,
    grid: Grid,
    n_paths: int,
    seed: int,
    x0=None,
    output_grid: Optional[Grid] = None,
    threads: Optional[int] = None,
    block_size: int = BLOCK,
) -> PathBundle:
    """Milstein scheme for commuting noise (no Levy areas)."""
    _require_commutative(model)
    x0 = _default_x0(model, x0)
    return _time_step(model, "milstein", grid, n_paths, seed, x0, output_grid, threads, block_size)


def stepping_grid(start: float, end: float, dt: float, output_grid: Optional[Grid] = None) -> Grid:
    """Uniform ``dt`` grid with the output nodes merged in."""
    nodes = Grid.from_step(start, end, dt).nodes
    if output_grid is not None:
        nodes = np.union1d(nodes, output_grid.nodes)
        keep = np.concatenate([[True], np.diff(nodes) > 1e-12 * max(1.0, abs(end))])
        nodes = nodes[keep]
    return Grid(nodes)


def _default_x0(model, x0):
    if x0 is None:
        return model.box.center
    return np.asarray(x0, dtype=float)


# -- coupling -----------------------------------------------------------------


def _sqrt_psd(S: np.ndarray, scale: float = 0.0, rtol: float = 1e-10) -> np.ndarray:
    """Symmetric square root; eigenvalues at rounding level are set to zero."""
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    floor = rtol * max(float(np.abs(w).max(initial=0.0)), scale)
    return V * np.sqrt(np.where(w > floor, w, 0.0))


@dataclass
class CoupledRun:
    """Exact and scheme paths driven by the same Brownian increments."""

    output_grid: Grid
    dts: np.ndarray
    exact: np.ndarray
    exact_ok: np.ndarray
    paths: dict
    ok: dict


def coupled_paths(
    rep,
    model: SdeModel,
    fine_grid: Grid,
    output_grid: Grid,
    n_paths: int,
    seed: int,
    dts: Optional[Sequence[float]] = None,
    schemes: Sequence[str] = ("euler",),
    threads: Optional[int] = None,
    block_size: int = BLOCK,
) -> CoupledRun:
    """Drive the exact sampler and each scheme/level with one Brownian path.

    On each fine interval the exact increment ``I = int U dW`` is drawn
    from its law conditional on ``dW`` (``W`` in the chart's column order):

        I | dW ~ N(M dW / h,  Sigma - M M^T / h),   M = int U du,

    so the exact marginals are unaffected by the coupling. Scheme levels use
    sums of fine increments.
    """
    _check_grid(rep, fine_grid)
    if not fine_grid.nests(output_grid):
        raise ValueError("fine grid must nest the output grid")
    h = fine_grid.steps
    if not np.allclose(h, h[0], rtol=1e-9):
        raise ValueError("coupling needs a uniform fine grid")
    h0 = float(h[0])
    if dts is None:
        dts = [h0]
    dts = np.asarray(sorted(dts, reverse=True), dtype=float)
    ratios = np.rint(dts / h0).astype(int)
    if np.any(np.abs(ratios * h0 - dts) > 1e-9 * dts):
        raise ValueError("every dt must be a multiple of the fine step")
    out_fine = _output_index(fine_grid, output_grid)
    for m in ratios:
        if np.any(out_fine % m):
            raise ValueError("output nodes must fall on every coarse grid")
    if "milstein" in schemes:
        _require_commutative(model)

    laws = precompute_increment_laws(rep, fine_grid)
    A = np.stack([law.mean_map / h0 for law in laws])
    R = np.stack([_sqrt_psd(law.cov - law.mean_map @ law.mean_map.T / h0, np.abs(law.cov).max()) for law in laws])
    tables = _chart_tables(rep, output_grid)
    perm = np.asarray(rep.perm)
    d, p = rep.d, rep.p
    x0 = np.asarray(rep.x, dtype=float)
    n_out = len(output_grid)
    slot = {int(k): j for j, k in enumerate(out_fine)}
    keys = [(s, float(dt)) for s in schemes for dt in dts]
    nodes = fine_grid.nodes

    def block(b, lo, hi):
        n = hi - lo
        rw, rr = RngStream(seed, b, 0), RngStream(seed, b, 1)
        Y = np.zeros((n, d))
        ex = np.empty((n, n_out, p))
        ex[:, 0] = x0
        ex_ok = np.ones(n, dtype=bool)
        xs = {key: np.tile(x0, (n, 1)) for key in keys}
        acc = {float(dt): np.zeros((n, d)) for dt in dts}
        out = {key: np.empty((n, n_out, p)) for key in keys}
        oks = {key: np.ones(n, dtype=bool) for key in keys}
        for key in keys:
            out[key][:, 0] = x0
        for k in range(len(h)):
            dW = rw.normal((block_size, d))[:n] * np.sqrt(h0)
            xi = rr.normal((block_size, d))[:n]
            dWp = dW[:, perm]
            Y += dWp @ A[k].T + xi @ R[k].T
            for dt, m in zip(dts, ratios):
                acc[float(dt)] += dW
                if (k + 1) % m == 0:
                    t_left = float(nodes[k + 1 - m])
                    for s in schemes:
                        key = (s, float(dt))
                        live = oks[key]
                        xs[key][live] = scheme_step(model, s, xs[key][live], t_left, float(dt), acc[float(dt)][live])
                        oks[key][live] = _domain_ok(model, xs[key][live], float(nodes[k + 1]))
                    acc[float(dt)][:] = 0.0
            if k + 1 in slot:
                j = slot[k + 1]
                x, ok = _map_exact(rep, model, tables, float(nodes[k + 1]), j, Y)
                ex[:, j] = x
                ex_ok &= ok
                for key in keys:
                    out[key][:, j] = xs[key]
        return ex, ex_ok, out, oks

    parts = _run_blocks(block, n_paths, block_size, threads)
    exact = np.concatenate([q[0] for q in parts])
    exact_ok = np.concatenate([q[1] for q in parts])
    paths = {key: np.concatenate([q[2][key] for q in parts]) for key in keys}
    ok = {key: np.concatenate([q[3][key] for q in parts]) for key in keys}
    return CoupledRun(output_grid, dts, exact, exact_ok, paths, ok)


def _slope(dts, errs) -> float:
    dts, errs = np.asarray(dts, float), np.asarray(errs, float)
    good = errs > 0
    if good.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(dts[good]), np.log(errs[good]), 1)[0])


@dataclass
class StrongErrorTable:
    dts: np.ndarray
    errors: dict
    std_errors: dict
    slopes: dict
    n_paths: int
    n_used: int

    def to_dict(self) -> dict:
        return {
            "dts": [float(v) for v in self.dts],
            "errors": {k: [float(v) for v in e] for k, e in self.errors.items()},
            "std_errors": {k: [float(v) for v in e] for k, e in self.std_errors.items()},
            "slopes": {k: float(v) for k, v in self.slopes.items()},
            "n_paths": int(self.n_paths),
            "n_used": int(self.n_used),
        }


def couple_and_compare(
    rep,
    model: SdeModel,
    fine_grid: Grid,
    output_grid: Grid,
    n_paths: int,
    seed: int,
    dts: Optional[Sequence[float]] = None,
    schemes: Sequence[str] = ("euler", "milstein"),
    threads: Optional[int] = None,
) -> StrongErrorTable:
    """``E max_k |X_exact - X_scheme|`` over the output nodes, per step size.

    ``dts`` defaults to the halving ladder from the output spacing down to
    the fine step. Paths that left the domain under any scheme are dropped.
    """
    h0 = float(fine_grid.steps[0])
    if dts is None:
        coarse = float(np.min(output_grid.steps))
        n = int(np.floor(np.log2(coarse / h0) + 1e-9))
        dts = [h0 * 2.0**j for j in range(n, -1, -1)]
    run = coupled_paths(rep, model, fine_grid, output_grid, n_paths, seed, dts, schemes, threads)
    keep = run.exact_ok.copy()
    for ok in run.ok.values():
        keep &= ok
    if not keep.any():
        raise NoSurvivors("no path survived under every scheme")
    errors, ses, slopes = {}, {}, {}
    for s in schemes:
        e, se = [], []
        for dt in run.dts:
            diff = np.abs(run.paths[(s, float(dt))][keep] - run.exact[keep])
            worst = diff.max(axis=(1, 2))
            e.append(worst.mean())
            se.append(worst.std(ddof=1) / np.sqrt(worst.size) if worst.size > 1 else np.nan)
        errors[s], ses[s] = np.array(e), np.array(se)
        slopes[s] = _slope(run.dts, errors[s])
    return StrongErrorTable(run.dts, errors, ses, slopes, n_paths, int(keep.sum()))


# -- statistics ----------------------------------------------------------------


@dataclass(frozen=True)
class MomentStats:
    t: float
    mean: np.ndarray
    cov: np.ndarray
    mean_se: np.ndarray
    var_se: np.ndarray
    survival: float
    n_alive: int

    def to_dict(self) -> dict:
        return {
            "t": float(self.t),
            "mean": self.mean.tolist(),
            "cov": self.cov.tolist(),
            "mean_se": self.mean_se.tolist(),
            "var_se": self.var_se.tolist(),
            "survival": float(self.survival),
            "n_alive": int(self.n_alive),
        }


def sample_moments(x: np.ndarray, t: float = float("nan"), survival: float = 1.0) -> MomentStats:
    """Unbiased mean/covariance of samples ``x`` (n, p) with standard errors."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n == 0:
        raise NoSurvivors("no samples")
    mean = x.mean(axis=0)
    if n < 2:
        nan = np.full(x.shape[1], np.nan)
        return MomentStats(t, mean, np.zeros((x.shape[1],) * 2), nan, nan, survival, n)
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    var = np.diag(cov)
    m4 = np.mean((x - mean) ** 4, axis=0)
    return MomentStats(t, mean, cov, np.sqrt(var / n), np.sqrt(np.maximum(m4 - var**2, 0.0) / n), survival, n)


def moment_stats(bundle: PathBundle, t: float) -> MomentStats:
    """Moments over the paths still alive at node ``t``."""
    k = bundle.grid.index_of(t)
    alive = bundle.alive(k)
    if not alive.any():
        raise NoSurvivors(f"no path alive at t={t}")
    return sample_moments(bundle.states[alive, k], float(bundle.grid.nodes[k]), float(alive.mean()))
