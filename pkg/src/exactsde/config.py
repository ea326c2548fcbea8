"""Run configuration: an INI file, command-line overrides and validation.

Example::

    [run]
    command = simulate
    model = cir_const          ; catalog id, or "inline"
    paths = 100000
    seed = 1
    scheme = exact
    out = cir.csv

    [start]
    x = 1.0
    s = 0.0

    [grid]
    t_end = 1.0
    n_nodes = 11               ; or: dt = 0.01

    [catalog]                  ; keyword overrides for the catalog builder
    d = 1

An inline model replaces the catalog id with ``model = inline`` and adds::

    [inline]
    p = 1
    d = 1
    r = 1
    state = x                  ; symbol names, default x1..xp
    lower = -5
    upper = 5
    sigma = 0.5                ; rows separated by ';', entries by ','
    drift = 0.8*(0.5 - x)
    form = ito                 ; or stratonovich

    [params]                   ; optional canonical parameters, functions of t
    beta = -0.5
    theta = 0.1 + 0.05*t
    kappa = ...
    htilde = ...

Every shape is checked against ``p, d, r`` before anything is computed.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ConfigError
from .expr import ExprField, split_matrix

COMMANDS = ("check", "straighten", "build", "simulate", "benchmark")
SCHEMES = ("exact", "euler", "milstein")
SEED_ENV = "EXACTSDE_SEED"


@dataclass(frozen=True)
class InlineSpec:
    p: int
    d: int
    r: int
    state: tuple
    lower: np.ndarray
    upper: np.ndarray
    sigma: list
    drift: list
    form: str = "ito"
    horizon: float = 10.0


@dataclass(frozen=True)
class ParamSpec:
    beta: Optional[list] = None
    theta: Optional[list] = None
    kappa: Optional[list] = None
    htilde: Optional[list] = None


@dataclass(frozen=True)
class RunConfig:
    command: Optional[str] = None
    model: Optional[str] = None
    overrides: dict = field(default_factory=dict)
    inline: Optional[InlineSpec] = None
    params: Optional[ParamSpec] = None
    x: Optional[np.ndarray] = None
    s: Optional[float] = None
    anchor: Optional[np.ndarray] = None
    t_end: Optional[float] = None
    n_nodes: Optional[int] = None
    dt: Optional[float] = None
    n_paths: Optional[int] = None
    seed: int = 0
    scheme: str = "exact"
    threads: Optional[int] = None
    tol: Optional[float] = None
    out: Optional[str] = None
    target: float = 1e-3
    n_output: int = 10

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def _floats(text: str, what: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.replace(";", ",").split(",") if v.strip()], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"{what}: expected comma-separated numbers, got {text!r}") from exc


def _int(sec, key, default=None):
    if key not in sec:
        return default
    try:
        return int(sec[key])
    except ValueError as exc:
        raise ConfigError(f"[{sec.name}] {key}: expected an integer, got {sec[key]!r}") from exc


def _float(sec, key, default=None):
    if key not in sec:
        return default
    try:
        return float(sec[key])
    except ValueError as exc:
        raise ConfigError(f"[{sec.name}] {key}: expected a number, got {sec[key]!r}") from exc


def _literal(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if "," in text:
        return tuple(float(v) for v in text.split(","))
    return text


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str  # catalog overrides are case-sensitive keyword names
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    run = cp["run"] if cp.has_section("run") else {}
    kw = {}
    if run:
        kw["command"] = run.get("command")
        kw["model"] = run.get("model")
        kw["n_paths"] = _int(run, "paths")
        kw["seed"] = _int(run, "seed", 0)
        kw["scheme"] = run.get("scheme", "exact")
        kw["threads"] = _int(run, "threads")
        kw["tol"] = _float(run, "tol")
        kw["out"] = run.get("out")
        kw["target"] = _float(run, "target", 1e-3)
        kw["n_output"] = _int(run, "n_output", 10)
    if cp.has_section("start"):
        st = cp["start"]
        if "x" in st:
            kw["x"] = _floats(st["x"], "[start] x")
        kw["s"] = _float(st, "s")
        if "anchor" in st:
            kw["anchor"] = _floats(st["anchor"], "[start] anchor")
    if cp.has_section("grid"):
        g = cp["grid"]
        kw["t_end"] = _float(g, "t_end")
        kw["n_nodes"] = _int(g, "n_nodes")
        kw["dt"] = _float(g, "dt")
    if cp.has_section("catalog"):
        kw["overrides"] = {k: _literal(v) for k, v in cp["catalog"].items()}
    if cp.has_section("inline"):
        kw["inline"] = _inline(cp["inline"])
    if cp.has_section("params"):
        pr = cp["params"]
        kw["params"] = ParamSpec(
            *[split_matrix(pr[k]) if k in pr else None for k in ("beta", "theta", "kappa", "htilde")]
        )
    return RunConfig(**{k: v for k, v in kw.items() if v is not None})


def _inline(sec) -> InlineSpec:
    for key in ("p", "d", "r", "lower", "upper", "sigma", "drift"):
        if key not in sec:
            raise ConfigError(f"[inline] needs {key!r}")
    p, d, r = _int(sec, "p"), _int(sec, "d"), _int(sec, "r")
    state = tuple(s.strip() for s in sec["state"].split(",")) if "state" in sec else tuple(
        f"x{i + 1}" for i in range(p)
    )
    drift = [c for row in split_matrix(sec["drift"]) for c in row]
    return InlineSpec(
        p, d, r, state,
        _floats(sec["lower"], "[inline] lower"),
        _floats(sec["upper"], "[inline] upper"),
        split_matrix(sec["sigma"]),
        drift,
        sec.get("form", "ito").strip().lower(),
        _float(sec, "horizon", 10.0),
    )


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def env_seed() -> Optional[int]:
    raw = os.environ.get(SEED_ENV)
    if raw is None or not raw.strip():
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc


def _shape(rows) -> tuple:
    lens = {len(r) for r in rows}
    if len(lens) != 1:
        raise ConfigError("ragged matrix: rows have different lengths")
    return (len(rows), lens.pop())


def validate(cfg: RunConfig, p: Optional[int] = None) -> None:
    """Reject inconsistent settings. ``p`` is the catalog model dimension when known."""
    if cfg.command is not None and cfg.command not in COMMANDS:
        raise ConfigError(f"unknown command {cfg.command!r}; expected one of {', '.join(COMMANDS)}")
    if cfg.scheme not in SCHEMES:
        raise ConfigError(f"unknown scheme {cfg.scheme!r}; expected one of {', '.join(SCHEMES)}")
    if cfg.model is None:
        raise ConfigError("no model given (use --model or [run] model)")
    if cfg.n_paths is not None and cfg.n_paths < 1:
        raise ConfigError("paths must be positive")
    if cfg.threads is not None and cfg.threads < 1:
        raise ConfigError("threads must be positive")
    if cfg.tol is not None and not cfg.tol > 0:
        raise ConfigError("tol must be positive")
    if cfg.n_nodes is not None and cfg.n_nodes < 2:
        raise ConfigError("n_nodes must be at least 2")
    if cfg.dt is not None and not cfg.dt > 0:
        raise ConfigError("dt must be positive")
    if cfg.t_end is not None and cfg.t_end <= (cfg.s or 0.0):
        raise ConfigError("t_end must exceed the start time s")
    if cfg.model == "inline":
        if cfg.inline is None:
            raise ConfigError("model = inline needs an [inline] section")
        spec = cfg.inline
        p, d, r = spec.p, spec.d, spec.r
        if min(p, d, r) < 1 or r > min(p, d):
            raise ConfigError(f"need 1 <= r <= min(p, d); got p={p}, d={d}, r={r}")
        if len(spec.state) != p:
            raise ConfigError(f"{len(spec.state)} state symbols for p={p}")
        if spec.lower.size != p or spec.upper.size != p:
            raise ConfigError(f"box bounds must have {p} entries")
        if np.any(spec.lower >= spec.upper):
            raise ConfigError("box lower bounds must be below the upper bounds")
        if _shape(spec.sigma) != (p, d):
            raise ConfigError(f"sigma has shape {_shape(spec.sigma)}, expected ({p}, {d})")
        if len(spec.drift) != p:
            raise ConfigError(f"drift has {len(spec.drift)} entries, expected {p}")
        if spec.form not in ("ito", "stratonovich"):
            raise ConfigError("form must be 'ito' or 'stratonovich'")
        if cfg.params is not None:
            want = {"beta": (r, r), "theta": (1, r), "kappa": (r, d - r), "htilde": (1, p - r)}
            for name, shape in want.items():
                rows = getattr(cfg.params, name)
                if rows is None:
                    continue
                got = _shape(rows)
                ok = got == shape or (shape[0] == 1 and got == (shape[1], 1))
                if not ok:
                    raise ConfigError(f"{name} has shape {got}, expected {shape}")
    if p is not None:
        for name in ("x", "anchor"):
            v = getattr(cfg, name)
            if v is not None and v.size != p:
                raise ConfigError(f"{name} has {v.size} entries, expected {p}")


def build_inline_model(cfg: RunConfig):
    """``SdeModel`` from an inline spec, with symbolic Jacobians."""
    from .model import SdeModel, from_stratonovich
    from .numerics import Box

    spec = cfg.inline
    sigma = ExprField.from_strings(spec.sigma, (spec.p, spec.d), spec.state)
    drift = ExprField.from_strings(spec.drift, (spec.p,), spec.state)
    homogeneous = not (sigma.time_dependent or drift.time_dependent)
    box = Box(spec.lower, spec.upper)
    name = cfg.model if cfg.model != "inline" else "inline"
    common = dict(T=spec.horizon, time_homogeneous=homogeneous, sigma_jac=sigma.jac)
    if spec.form == "stratonovich":
        return from_stratonovich(name, spec.p, spec.d, spec.r, box, sigma, drift, **common)
    return SdeModel(name, spec.p, spec.d, spec.r, box, sigma, drift, b_jac=drift.jac, **common)


def build_inline_params(cfg: RunConfig):
    """``CanonicalParams`` from the [params] section (functions of ``t`` only)."""
    from .representation import CanonicalParams

    spec, ps = cfg.inline, cfg.params
    p, d, r = spec.p, spec.d, spec.r
    shapes = {"beta": (r, r), "theta": (r,), "kappa": (r, d - r), "htilde": (p - r,)}
    values = {}
    for name, shape in shapes.items():
        rows = getattr(ps, name)
        if rows is None or int(np.prod(shape)) == 0:
            continue
        f = ExprField.from_strings([c for row in rows for c in row], shape, ())
        values[name] = (lambda fld: (lambda t: fld(np.zeros(0), t)))(f)
    return CanonicalParams.constant(p, d, r, **values)
