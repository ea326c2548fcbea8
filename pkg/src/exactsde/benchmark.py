"""Wall-time comparison of the exact sampler with Euler at equal weak error.

Euler's weak error on ``E[X_T]`` is estimated with the exact sampler as a
control variate: both are driven by the same Brownian path, so
``mean(X_euler - X_exact)`` has the Euler bias as its expectation and a
standard error set by the (small) strong error rather than by the spread
of ``X_T``. The exact sampler's own error is measured against the catalog
oracle directly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .catalog import CatalogEntry
from .errors import ConfigError
from .numerics import Grid
from .representation import build_representation
from .simulate import (
    coupled_paths,
    euler_maruyama,
    moment_stats,
    prepare_exact,
    simulate_exact,
    stepping_grid,
)

DEFAULT_LADDER = tuple(2.0**-j for j in range(4, 13))


@dataclass
class EulerPoint:
    dt: float
    wall_time: float
    weak_error: float
    weak_se: float


@dataclass
class BenchmarkResult:
    model: str
    n_paths: int
    t_end: float
    n_output: int
    target: float
    precompute_time: float
    exact_time: float
    exact_error: float
    exact_se: float
    oracle: list
    curve: list = field(default_factory=list)
    dt_star: Optional[float] = None
    euler_time: Optional[float] = None
    speedup: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "n_paths": self.n_paths,
            "t_end": self.t_end,
            "n_output": self.n_output,
            "target_weak_error": self.target,
            "precompute_time": self.precompute_time,
            "exact": {"wall_time": self.exact_time, "weak_error": self.exact_error, "weak_se": self.exact_se},
            "oracle_mean": self.oracle,
            "euler": [
                {"dt": c.dt, "wall_time": c.wall_time, "weak_error": c.weak_error, "weak_se": c.weak_se}
                for c in self.curve
            ],
            "dt_star": self.dt_star,
            "euler_time_at_target": self.euler_time,
            "speedup": self.speedup,
        }


def _timed(fn, repeats: int):
    best, out = np.inf, None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def run_benchmark(
    entry: CatalogEntry,
    n_paths: int = 10_000,
    t_end: float = 1.0,
    n_output: int = 10,
    target: float = 1e-3,
    ladder: Sequence[float] = DEFAULT_LADDER,
    seed: int = 0,
    threads: Optional[int] = None,
    repeats: int = 3,
) -> BenchmarkResult:
    """Time-to-equal-weak-error of the exact sampler versus Euler.

    ``dt_star`` is the largest ladder step whose estimated Euler weak error,
    and that of every finer step, is within ``target``.
    """
    oracle_fn = entry.expected.get("mean")
    if oracle_fn is None or entry.params is None:
        raise ConfigError(f"model {entry.id!r} has no moment oracle for benchmarking")
    s = float(entry.s0)
    model = entry.model
    out_grid = Grid.uniform(s, s + t_end, n_output + 1)
    oracle = np.atleast_1d(np.asarray(oracle_fn(s + t_end), dtype=float))

    t0 = time.perf_counter()
    rep = build_representation(entry.params, entry.diffeo, entry.x0, s, out_grid)
    plan = prepare_exact(rep, out_grid)
    precompute = time.perf_counter() - t0

    exact_time, bundle = _timed(
        lambda: simulate_exact(rep, out_grid, n_paths, seed, model=model, threads=threads, plan=plan), repeats
    )
    ms = moment_stats(bundle, s + t_end)
    k = int(np.argmax(np.abs(ms.mean - oracle) / ms.mean_se))
    exact_err, exact_se = float(np.abs(ms.mean - oracle)[k]), float(ms.mean_se[k])

    ladder = sorted((float(v) for v in ladder), reverse=True)
    fine = Grid.from_step(s, s + t_end, ladder[-1])
    fine_rep = build_representation(entry.params, entry.diffeo, entry.x0, s, fine)
    run = coupled_paths(
        fine_rep, model, fine, Grid(np.array([s, s + t_end])), n_paths, seed + 1, ladder, ("euler",), threads
    )
    curve = []
    for dt in ladder:
        ok = run.exact_ok & run.ok[("euler", dt)]
        diff = run.paths[("euler", dt)][ok, -1] - run.exact[ok, -1]
        bias = diff.mean(axis=0)
        se = diff.std(axis=0, ddof=1) / np.sqrt(ok.sum())
        j = int(np.argmax(np.abs(bias)))
        grid = stepping_grid(s, s + t_end, dt, out_grid)
        wall, _ = _timed(
            lambda: euler_maruyama(model, grid, n_paths, seed, entry.x0, output_grid=out_grid, threads=threads),
            repeats,
        )
        curve.append(EulerPoint(dt, wall, float(np.abs(bias[j])), float(se[j])))

    result = BenchmarkResult(
        entry.id, n_paths, t_end, n_output, target, precompute, exact_time, exact_err, exact_se,
        oracle.tolist(), curve,
    )
    passing = [c.weak_error <= target for c in curve]
    for i in range(len(curve)):
        if all(passing[i:]):
            result.dt_star = curve[i].dt
            result.euler_time = curve[i].wall_time
            result.speedup = curve[i].wall_time / exact_time
            break
    return result
