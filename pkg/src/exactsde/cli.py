"""``exactsde`` command line.

Exit codes: 0 success (for ``check``: representable), 1 configuration or
runtime error, 2 not representable, 3 inconclusive. Reports are JSON on
stdout with a fixed field order; path tables go to ``--out`` as CSV.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from typing import Optional

import numpy as np

from . import catalog
from .benchmark import DEFAULT_LADDER, run_benchmark
from .commutator import _jsonable
from .config import (
    COMMANDS,
    SCHEMES,
    RunConfig,
    build_inline_model,
    build_inline_params,
    env_seed,
    load_config,
    validate,
)
from .diffeo import flow_straighten, verify_p3
from .errors import ConfigError, ExactSdeError
from .numerics import Grid, sample_interior
from .pipeline import EXIT_ERROR, EXIT_OK, NotRepresentable, check_pipeline, full_pipeline
from .representation import build_representation, validate_representation
from .simulate import default_threads, euler_maruyama, milstein, moment_stats, simulate_exact


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="exactsde", description="Explicit-solution checks and exact SDE sampling.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="INI run configuration")
    ap.add_argument("--model", help="catalog id (or 'inline' with a config)")
    ap.add_argument("--paths", type=int, help="number of paths")
    ap.add_argument("--seed", type=int, help="master seed (overrides EXACTSDE_SEED)")
    ap.add_argument("--dt", type=float, help="time step of the output grid")
    ap.add_argument("--t-end", type=float, dest="t_end", help="final time")
    ap.add_argument("--out", help="output file (CSV for build/simulate, JSON otherwise)")
    ap.add_argument("--scheme", choices=SCHEMES, help="sampler for simulate")
    ap.add_argument("--threads", type=int, help="worker cap (default: hardware count)")
    ap.add_argument("--tol", type=float, help="check tolerance")
    return ap


def resolve_config(args) -> RunConfig:
    """Config file, then the environment seed, then explicit flags."""
    cfg = load_config(args.config) if args.config else RunConfig()
    seed = env_seed()
    if seed is not None:
        cfg = cfg.with_overrides(seed=seed)
    cfg = cfg.with_overrides(
        command=args.command, model=args.model, n_paths=args.paths, seed=args.seed, dt=args.dt,
        t_end=args.t_end, out=args.out, scheme=args.scheme, threads=args.threads, tol=args.tol,
    )
    return cfg


class Setup:
    """Model, chart and parameters resolved from a config."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.entry = None
        if cfg.model == "inline":
            validate(cfg, cfg.inline.p if cfg.inline else None)
            self.model = build_inline_model(cfg)
            self.diffeo = None
            self.params = build_inline_params(cfg) if cfg.params is not None else None
            self.x = cfg.x if cfg.x is not None else self.model.box.center
            self.anchor = cfg.anchor if cfg.anchor is not None else self.x
        else:
            validate(cfg)
            entry = catalog.get(cfg.model, **cfg.overrides)
            validate(cfg, entry.model.p)
            self.entry = entry
            self.model = entry.model
            self.diffeo = entry.diffeo
            self.params = entry.params
            self.x = cfg.x if cfg.x is not None else entry.x0
            self.anchor = cfg.anchor if cfg.anchor is not None else (
                entry.anchor if entry.anchor is not None else self.x
            )
        if cfg.s is not None:
            self.s = float(cfg.s)
        else:
            self.s = float(self.entry.s0) if self.entry is not None else 0.0

    def grid(self) -> Grid:
        cfg = self.cfg
        t_end = cfg.t_end if cfg.t_end is not None else self.s + 1.0
        if cfg.dt is not None:
            return Grid.from_step(self.s, t_end, cfg.dt)
        return Grid.uniform(self.s, t_end, cfg.n_nodes if cfg.n_nodes is not None else 11)

    def oracle(self, t: float) -> Optional[dict]:
        """Catalog moment oracle at ``t`` when the run starts at the catalog state."""
        if self.entry is None:
            return None
        if not (np.allclose(self.x, self.entry.x0) and self.s == self.entry.s0):
            return None
        out = {}
        for key in ("mean", "var"):
            fn = self.entry.expected.get(key)
            if callable(fn):
                out[key] = _jsonable(np.atleast_1d(np.asarray(fn(t), dtype=float)))
        return out or None


def _emit(obj: dict, out: Optional[str] = None) -> None:
    text = json.dumps(_jsonable(obj), indent=2, allow_nan=True)
    print(text)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


def cmd_check(setup: Setup) -> int:
    rep = check_pipeline(setup.model, diffeo=setup.diffeo, anchor=setup.anchor, tol=setup.cfg.tol,
                         seed=setup.cfg.seed)
    _emit(rep.to_dict(), setup.cfg.out)
    return rep.exit_code


def cmd_straighten(setup: Setup, n_probe: int = 50) -> int:
    t0 = time.perf_counter()
    nd = flow_straighten(setup.model, setup.anchor)
    probes, _ = sample_interior(nd.valid_box, n_probe, seed=setup.cfg.seed)
    num = nd.forward(probes, 0.0)
    roundtrip = float(np.abs(nd.inverse(num, 0.0) - probes).max())
    out = {
        "model": setup.model.name,
        "anchor": setup.anchor,
        "perm": list(nd.perm),
        "valid_box": {"lower": nd.valid_box.lower, "upper": nd.valid_box.upper},
        "n_probe": n_probe,
        "roundtrip": roundtrip,
        "reference_diff": None,
    }
    if setup.diffeo is not None and tuple(setup.diffeo.perm) == tuple(nd.perm):
        ref = setup.diffeo.forward(probes, 0.0) - setup.diffeo.forward(setup.anchor, 0.0) + setup.anchor
        out["reference_diff"] = float(np.abs(num - ref).max())
    p3 = verify_p3(nd, setup.model, n_points=50, seed=setup.cfg.seed)
    out["p3"] = p3.report.to_dict()
    out["wall_time"] = time.perf_counter() - t0
    _emit(out, setup.cfg.out)
    tol = setup.cfg.tol if setup.cfg.tol is not None else 1e-6
    ok = p3.report.passed and (out["reference_diff"] is None or out["reference_diff"] <= tol)
    return EXIT_OK if ok else EXIT_ERROR


def _representation(setup: Setup, grid: Grid):
    if setup.params is not None and setup.diffeo is not None:
        return build_representation(setup.params, setup.diffeo, setup.x, setup.s, grid), None
    res = full_pipeline(setup.model, setup.x, setup.s, grid, diffeo=setup.diffeo, params=setup.params,
                        anchor=setup.anchor, seed=setup.cfg.seed)
    return res.representation, res.validation


def cmd_build(setup: Setup) -> int:
    grid = setup.grid()
    t0 = time.perf_counter()
    rep, val = _representation(setup, grid)
    build_time = time.perf_counter() - t0
    if val is None:
        val = validate_representation(rep, setup.model, tol=setup.cfg.tol or 1e-5, seed=setup.cfg.seed)
    if setup.cfg.out:
        rep.to_csv(setup.cfg.out)
    _emit({
        "model": setup.model.name,
        "x": setup.x,
        "s": setup.s,
        "t_end": grid.end,
        "valid_until": rep.valid_until,
        "internal_nodes": int(rep.nodes.size),
        "build_time": build_time,
        "validation": val.to_dict(),
    })
    return EXIT_OK if val.passed else EXIT_ERROR


def cmd_simulate(setup: Setup) -> int:
    cfg = setup.cfg
    grid = setup.grid()
    threads = cfg.threads or default_threads()
    n_paths = cfg.n_paths or 1000
    precompute = 0.0
    if cfg.scheme == "exact":
        t0 = time.perf_counter()
        rep, _ = _representation(setup, grid)
        precompute = time.perf_counter() - t0
        bundle = simulate_exact(rep, grid, n_paths, cfg.seed, model=setup.model, threads=threads)
    else:
        fn = euler_maruyama if cfg.scheme == "euler" else milstein
        bundle = fn(setup.model, grid, n_paths, cfg.seed, setup.x, threads=threads)
    if cfg.out:
        bundle.to_csv(cfg.out)
    t_end = grid.end
    try:
        stats = moment_stats(bundle, t_end).to_dict()
    except ExactSdeError as exc:
        stats = {"error": str(exc)}
    _emit({
        "model": setup.model.name,
        "scheme": cfg.scheme,
        "seed": cfg.seed,
        "n_paths": n_paths,
        "nodes": len(grid),
        "t_end": t_end,
        "moments": stats,
        "oracle": setup.oracle(t_end),
        "survival": bundle.survival(),
        "precompute_time": precompute,
        "wall_time": bundle.wall_time,
        "csv": cfg.out,
    })
    return EXIT_OK


def cmd_benchmark(setup: Setup) -> int:
    if setup.entry is None:
        raise ConfigError("benchmark needs a catalog model with a moment oracle")
    cfg = setup.cfg
    t_end = (cfg.t_end if cfg.t_end is not None else setup.s + 1.0) - setup.s
    res = run_benchmark(
        setup.entry, n_paths=cfg.n_paths or 10_000, t_end=t_end,
        n_output=cfg.n_output, target=cfg.target, ladder=DEFAULT_LADDER, seed=cfg.seed, threads=cfg.threads,
    )
    _emit(res.to_dict(), cfg.out)
    return EXIT_OK


HANDLERS = {
    "check": cmd_check,
    "straighten": cmd_straighten,
    "build": cmd_build,
    "simulate": cmd_simulate,
    "benchmark": cmd_benchmark,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        setup = Setup(cfg)
        return HANDLERS[cfg.command](setup)
    except NotRepresentable as exc:
        _emit(exc.report.to_dict())
        return exc.report.exit_code
    except (ExactSdeError, ValueError) as exc:
        print(f"exactsde: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
