"""Numerical decision procedures for the commutator conditions.

Three checks, applied in order by the pipeline:

* the diffusion commutator ``(grad sigma_k) sigma_j = (grad sigma_j) sigma_k``;
* the drift condition, solved for the generator matrix ``A`` from
  ``sigma A_j = (grad sigma_j) h + d_t sigma_j - (grad h) sigma_j``;
* in the canonical chart, affinity of the drift in the bar coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import DomainExit, KappaDependsOnBar, NoSolution, NotAffine
from .model import SdeModel, StratonovichDrift, ito_to_stratonovich
from .numerics import (
    Box,
    JacobianSpec,
    eval_region,
    jacobian,
    inf_norm,
    sample_interior,
    time_derivative,
)

FD_TOL = 1e-5
ANALYTIC_TOL = 1e-8
# the drift check differentiates h, which is itself a finite difference of
# sigma unless a closed form is supplied; a wider step keeps the nested
# difference above the rounding floor
NESTED_SPEC = JacobianSpec("central", 1e-4)
GENERATOR_TOL = 1e-4
INCONCLUSIVE_FRACTION = 0.2
PINV_RCOND = 1e-10


@dataclass
class CheckReport:
    """Outcome of one numerical check.

    ``verdict`` is ``"pass"`` exactly when ``max_residual <= tol`` and no
    more than a fifth of the sampled points had to be skipped.
    """

    verdict: str
    max_residual: float
    worst_point: Optional[tuple]
    table: dict
    sample_count: int
    skipped: int = 0
    tol: float = FD_TOL
    stage: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def to_dict(self) -> dict:
        wp = None
        if self.worst_point is not None:
            x, t = self.worst_point
            wp = {"x": [float(v) for v in np.ravel(x)], "t": float(t)}
        return {
            "verdict": self.verdict,
            "max_residual": float(self.max_residual),
            "worst_point": wp,
            "table": {k: float(v) for k, v in self.table.items()},
            "sample_count": int(self.sample_count),
            "skipped": int(self.skipped),
            "tol": float(self.tol),
            "stage": self.stage,
            "extra": _jsonable(self.extra),
        }

    def to_json(self, indent: Optional[int] = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)) and not isinstance(obj, bool):
        return int(obj)
    return obj


def _verdict(max_res: float, tol: float, skipped: int, total: int) -> str:
    if total == 0 or skipped > INCONCLUSIVE_FRACTION * total:
        return "inconclusive"
    return "pass" if max_res <= tol else "fail"


def _default_tol(model: SdeModel) -> float:
    return ANALYTIC_TOL if model.sigma_jac is not None else FD_TOL


def _per_point(model: SdeModel, x, t, fn):
    """Evaluate ``fn(x_batch, t_scalar)`` over sample points.

    Points sharing a time are batched; a batch that trips a stencil exit is
    retried point by point so that only the offending points are skipped.
    Returns ``(results, ok_mask)`` with ``results[i] is None`` when skipped.
    """
    n = len(x)
    out = [None] * n
    for tt in np.unique(t):
        idx = np.flatnonzero(t == tt)
        try:
            res = fn(x[idx], float(tt))
            for j, i in enumerate(idx):
                out[i] = tuple(r[j] for r in res)
            continue
        except DomainExit:
            pass
        for i in idx:
            try:
                res = fn(x[i : i + 1], float(tt))
                out[i] = tuple(r[0] for r in res)
            except DomainExit:
                out[i] = None
    ok = np.array([o is not None for o in out])
    return out, ok


def commutator_tensor(model: SdeModel, x, t) -> np.ndarray:
    """``C[..., i, j, k] = [(grad sigma_j) sigma_k]_i`` on a batch."""
    S = np.asarray(model.sigma(x, t), dtype=float)
    dS = model.dsigma(x, t, box=model.box)
    return np.einsum("...ijm,...mk->...ijk", dS, S)


def commutator_residuals(model: SdeModel, x, t) -> np.ndarray:
    """Unnormalized residuals ``||C_jk - C_kj||_inf`` with shape ``(..., d, d)``."""
    C = commutator_tensor(model, x, t)
    return np.max(np.abs(C - np.swapaxes(C, -1, -2)), axis=-3)


def check_sigma_commutator(
    model: SdeModel,
    n_points: int = 128,
    tol: Optional[float] = None,
    seed: int = 0,
    force_fd: bool = False,
) -> CheckReport:
    """Sampled test of the diffusion commutator condition.

    Each point contributes ``||(grad s_k) s_j - (grad s_j) s_k||_inf /
    (1 + ||sigma||_inf)`` per unordered pair ``j < k``. ``force_fd`` ignores
    an analytic Jacobian and uses central differences.
    """
    if n_points < 1:
        raise ValueError("n_points must be positive")
    if force_fd and model.sigma_jac is not None:
        model = replace(model, sigma_jac=None, check_rank=False)
    tol = _default_tol(model) if tol is None else tol
    d = model.d
    if d == 1:
        return CheckReport("pass", 0.0, None, {}, n_points, 0, tol, "sigma", {"note": "single noise column"})
    x, t = model.sample(n_points, seed=seed)

    def fn(xb, tt):
        S = np.asarray(model.sigma(xb, tt), dtype=float)
        R = commutator_residuals(model, xb, tt)
        return (R / (1.0 + inf_norm(S))[:, None, None],)

    results, ok = _per_point(model, x, t, fn)
    skipped = int(np.sum(~ok))
    table = {}
    best, worst = 0.0, None
    iu = np.triu_indices(d, 1)
    for i, res in enumerate(results):
        if res is None:
            continue
        R = res[0]
        for j, k in zip(*iu):
            key = f"{j},{k}"
            table[key] = max(table.get(key, 0.0), float(R[j, k]))
        m = float(np.max(R[iu]))
        if worst is None or m > best:
            best, worst = m, (x[i].copy(), float(t[i]))
    verdict = _verdict(best, tol, skipped, n_points)
    return CheckReport(verdict, best, worst, table, n_points, skipped, tol, "sigma")


@dataclass
class GeneratorResult:
    """Pointwise generator matrices and their consistency summary."""

    x: np.ndarray
    t: np.ndarray
    A: np.ndarray  # (n, d, d)
    residual: float
    constancy: float
    report: CheckReport

    @property
    def B(self) -> np.ndarray:
        """Time-invariant alias ``B = -A``."""
        return -self.A

    def mean_A(self) -> np.ndarray:
        return np.mean(self.A, axis=0)


def _rank_pinv(S: np.ndarray, r: int) -> np.ndarray:
    U, sv, Vt = np.linalg.svd(S, full_matrices=False)
    keep = sv > PINV_RCOND * sv[..., :1]
    keep[..., r:] = False
    inv = np.where(keep, 1.0 / np.where(keep, sv, 1.0), 0.0)
    return np.einsum("...ji,...j,...kj->...ik", Vt, inv, U)


def infer_generator(
    model: SdeModel,
    h: Optional[StratonovichDrift] = None,
    n_points: int = 64,
    tol: Optional[float] = None,
    seed: int = 0,
) -> GeneratorResult:
    """Solve the drift condition for ``A`` at sampled points.

    Raises ``NoSolution`` when ``sigma A = R`` leaves a residual above ``tol``
    (relative to ``1 + ||R||``) anywhere. The constancy summary is the
    largest deviation of ``A`` from its mean over points sharing a time.
    """
    h = ito_to_stratonovich(model) if h is None else h
    if tol is None:
        tol = ANALYTIC_TOL * 100 if (model.sigma_jac is not None and model.h_strat is not None) else GENERATOR_TOL
    x, t = model.sample(n_points, seed=seed)
    h_spec = NESTED_SPEC if model.h_strat is None else JacobianSpec()

    def fn(xb, tt):
        S = np.asarray(model.sigma(xb, tt), dtype=float)
        dS = model.dsigma(xb, tt, box=model.box)
        hv = np.asarray(h(xb, tt), dtype=float)
        dh = jacobian(h.h, xb, tt, h_spec, box=model.box)
        if model.time_homogeneous:
            St = np.zeros_like(S)
        else:
            St = time_derivative(model.sigma, xb, tt)
        R = np.einsum("...ijk,...k->...ij", dS, hv) + St - np.einsum("...ik,...kj->...ij", dh, S)
        A = np.einsum("...ij,...jk->...ik", _rank_pinv(S, model.r), R)
        res = np.max(np.abs(np.einsum("...ij,...jk->...ik", S, A) - R), axis=(-1, -2))
        return A, res / (1.0 + np.max(np.abs(R), axis=(-1, -2)))

    results, ok = _per_point(model, x, t, fn)
    skipped = int(np.sum(~ok))
    keep = np.flatnonzero(ok)
    A = np.stack([results[i][0] for i in keep]) if len(keep) else np.zeros((0, model.d, model.d))
    res = np.array([results[i][1] for i in keep])
    xs, ts = x[keep], t[keep]
    max_res = float(res.max()) if len(res) else 0.0
    worst = (xs[int(np.argmax(res))], float(ts[int(np.argmax(res))])) if len(res) else None

    constancy = 0.0
    for tt in np.unique(ts):
        group = A[ts == tt]
        constancy = max(constancy, float(np.max(np.abs(group - group.mean(axis=0)))))
    verdict = _verdict(max_res, tol, skipped, n_points)
    report = CheckReport(
        verdict,
        max_res,
        worst,
        {"lsq": max_res},
        n_points,
        skipped,
        tol,
        "generator",
        {"constancy": constancy, "mean_A": A.mean(axis=0) if len(A) else None},
    )
    if verdict == "fail":
        raise NoSolution(
            f"generator equation has least-squares residual {max_res:.3g} > {tol:g}",
            point=worst,
            residual=max_res,
        )
    return GeneratorResult(xs, ts, A, max_res, constancy, report)


@dataclass
class ExtractedParams:
    """Canonical drift parameters recovered from a chart drift.

    Callables take ``(z_tilde, t)`` with ``z_tilde`` of shape ``(..., p - r)``.
    """

    beta: Callable
    theta: Callable
    htilde: Callable
    report: CheckReport


def classify_canonical_drift(
    p: int,
    d: int,
    r: int,
    kappa: Optional[Callable],
    h: StratonovichDrift,
    box: Box,
    n_points: int = 64,
    tol: float = 1e-6,
    seed: int = 0,
    t_range: Optional[tuple] = None,
    region: Optional[Callable] = None,
) -> ExtractedParams:
    """Check that a chart drift has the affine canonical form and extract it.

    In the straightened chart ``z = (z_bar, z_tilde)`` the drift must read
    ``h_bar = theta(z_tilde, t) + beta(z_tilde, t) z_bar`` and
    ``h_tilde = h_tilde(z_tilde, t)``, with ``kappa`` free of ``z_bar``.
    Points are taken in pairs that differ only in ``z_bar``: ``beta`` must
    agree across each pair and ``d h_tilde / d z_bar`` must vanish.
    Tolerances are relative to ``1 + |value|``. ``t_range=None`` declares
    the drift time-homogeneous.
    """
    hf = h.h if isinstance(h, StratonovichDrift) else h
    x, t = sample_interior(box, 2 * n_points, seed=seed, t_range=t_range, margin=0.02, region=region)
    a, b = x[:n_points].copy(), x[n_points:].copy()
    b[:, r:] = a[:, r:]
    tb = t[:n_points]
    if region is not None:
        good = eval_region(region, b, tb)
        a, b, tb = a[good], b[good], tb[good]
    spec = JacobianSpec()
    worst = {"beta": (0.0, None), "htilde": (0.0, None), "kappa": (0.0, None)}

    def bump(key, val, pt):
        if val > worst[key][0]:
            worst[key] = (float(val), pt)

    skipped = 0
    for za, zb, tt in zip(a, b, tb):
        try:
            Ja = jacobian(hf, za, tt, spec, box=box)
            Jb = jacobian(hf, zb, tt, spec, box=box)
        except DomainExit:
            skipped += 1
            continue
        beta_a, beta_b = Ja[:r, :r], Jb[:r, :r]
        scale = 1.0 + max(np.max(np.abs(beta_a)), np.max(np.abs(beta_b)))
        bump("beta", np.max(np.abs(beta_a - beta_b)) / scale, (za, tt))
        if p > r:
            bump("htilde", np.max(np.abs(Ja[r:, :r])) / (1.0 + np.max(np.abs(Ja[r:]))), (za, tt))
        if kappa is not None and d > r:
            try:
                dk = jacobian(kappa, za, tt, spec, box=box)[..., :r]
            except DomainExit:
                continue
            kv = np.asarray(kappa(za, tt))
            bump("kappa", np.max(np.abs(dk)) / (1.0 + np.max(np.abs(kv))), (za, tt))

    table = {k: v[0] for k, v in worst.items()}
    max_res = max(table.values())
    worst_key = max(table, key=table.get)
    wp = worst[worst_key][1]
    verdict = _verdict(max_res, tol, skipped, len(a))
    report = CheckReport(verdict, max_res, wp, table, len(a), skipped, tol, "drift")
    if table["kappa"] > tol:
        raise KappaDependsOnBar(
            f"kappa varies with the bar coordinates (residual {table['kappa']:.3g})",
            point=worst["kappa"][1],
            residual=table["kappa"],
        )
    if table["beta"] > tol or table["htilde"] > tol:
        which = "beta" if table["beta"] >= table["htilde"] else "htilde"
        raise NotAffine(
            f"drift is not affine in the bar coordinates ({which} residual {table[which]:.3g})",
            point=worst[which][1],
            residual=table[which],
        )

    ref_bar = box.center[:r]

    def full(zt):
        zt = np.asarray(zt, dtype=float)
        lead = zt.shape[:-1]
        return np.concatenate([np.broadcast_to(ref_bar, lead + (r,)), zt], axis=-1)

    # beta, theta and htilde are requested together at the same point by the
    # transport ODE; one Jacobian serves all three. Without a time range the
    # drift is time-homogeneous and the time is dropped from the key.
    memo: dict = {}

    def parts(zt, tt):
        zt = np.asarray(zt, dtype=float)
        key = (zt.shape, zt.tobytes(), None if t_range is None else float(tt))
        hit = memo.get(key)
        if hit is None:
            z = full(zt)
            J = jacobian(hf, z, tt, spec)[..., :r, :r]
            hz = np.asarray(hf(z, tt))
            hit = (J, hz[..., :r] - np.einsum("...ij,...j->...i", J, z[..., :r]), hz[..., r:])
            if len(memo) >= 4096:
                memo.clear()
            memo[key] = hit
        return hit

    def beta(zt, tt):
        return parts(zt, tt)[0].copy()

    def theta(zt, tt):
        return parts(zt, tt)[1].copy()

    def htilde(zt, tt):
        return parts(zt, tt)[2].copy()

    return ExtractedParams(beta, theta, htilde, report)
