"""Representability decision and end-to-end construction.

The decision runs three stages and stops at the first definite answer:

* ``sigma``: the noise columns commute;
* ``generator``: ``sigma A = (grad sigma) h + d_t sigma - (grad h) sigma``
  is solvable pointwise;
* ``drift``: in a straightening chart the drift is affine in the Gaussian
  coordinates (or, without a chart and with square invertible noise, ``A``
  does not depend on the state).

Exit codes: 0 representable, 2 not representable, 3 inconclusive.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .commutator import CheckReport, _jsonable, check_sigma_commutator, classify_canonical_drift, infer_generator
from .diffeo import NumericDiffeo, flow_straighten, identity_diffeo, verify_p3
from .errors import ExactSdeError, KappaDependsOnBar, NoSolution, NotAffine
from .model import SdeModel
from .numerics import Grid
from .representation import CanonicalParams, build_representation, validate_representation

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_REPRESENTABLE = 2
EXIT_INCONCLUSIVE = 3

CONSTANCY_TOL = 1e-4
# drift-affinity tolerance: closed-form charts versus numerical flow charts,
# whose chart drift carries nested finite-difference noise
DRIFT_TOL = 1e-6
FLOW_DRIFT_TOL = 1e-4
# square noise: the column flows are global coordinates, so the chart may
# cover the model box; otherwise charts stay local around the anchor
SQUARE_HALF_WIDTH = 0.5
VERDICTS = {EXIT_OK: "representable", EXIT_NOT_REPRESENTABLE: "not_representable", EXIT_INCONCLUSIVE: "inconclusive"}


@dataclass
class PipelineReport:
    model: str
    exit_code: int
    stage: str
    message: str
    reports: dict = field(default_factory=dict)
    witness: Optional[dict] = None
    generator: Optional[np.ndarray] = None
    params: Optional[CanonicalParams] = field(default=None, repr=False)
    diffeo: object = field(default=None, repr=False)

    @property
    def verdict(self) -> str:
        return VERDICTS[self.exit_code]

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "verdict": self.verdict,
            "exit_code": self.exit_code,
            "stage": self.stage,
            "message": self.message,
            "witness": _jsonable(self.witness),
            "generator_mean": None if self.generator is None else _jsonable(self.generator),
            "reports": {k: v.to_dict() for k, v in self.reports.items()},
        }


def _witness(point, chart_point=None) -> Optional[dict]:
    if point is None:
        return None
    x, t = point
    out = {"x": [float(v) for v in np.ravel(x)], "t": float(t)}
    if chart_point is not None:
        out["chart"] = [float(v) for v in np.ravel(chart_point)]
    return out


def _chart_params(model: SdeModel, extracted, kappa, chart_box) -> CanonicalParams:
    """Canonical parameters in the form the representation builder expects."""
    p, d, r = model.p, model.d, model.r
    ref = chart_box.center[:r]

    def full(zt):
        zt = np.asarray(zt, dtype=float)
        return np.concatenate([np.broadcast_to(ref, zt.shape[:-1] + (r,)), zt], axis=-1)

    if kappa is None:

        def kap(zt, t):
            return np.zeros(np.shape(zt)[:-1] + (r, d - r))

    else:

        def kap(zt, t):
            return np.asarray(kappa(full(zt), t), dtype=float)

    return CanonicalParams(p, d, r, extracted.beta, extracted.theta, kap, extracted.htilde)


def _choose_chart(model: SdeModel, diffeo, anchor, seed: int):
    """Given chart, else identity if it already straightens, else a flow chart at ``anchor``."""
    if diffeo is not None:
        # numerical charts carry integration error whoever supplies them
        return diffeo, "flow" if isinstance(diffeo, NumericDiffeo) else "given"
    ident = identity_diffeo(model.p, model.d, model.box)
    if verify_p3(ident, model, n_points=40, seed=seed).report.passed:
        return ident, "identity"
    if anchor is None:
        return None, "none"
    return flow_straighten(model, anchor), "flow"


def check_pipeline(
    model: SdeModel,
    diffeo=None,
    anchor=None,
    n_points: int = 128,
    tol: Optional[float] = None,
    seed: int = 0,
) -> PipelineReport:
    """Decide representability; the report carries per-stage evidence.

    ``diffeo`` is a straightening chart when one is known. Without it, square
    full-rank noise is decided from the generator alone; otherwise the
    identity chart is tried and then a numerical flow chart at ``anchor``.
    """
    rep = PipelineReport(model.name, EXIT_OK, "sigma", "")
    sig = check_sigma_commutator(model, n_points=max(n_points, 100), tol=tol, seed=seed)
    rep.reports["sigma"] = sig
    if sig.verdict == "fail":
        rep.exit_code, rep.witness = EXIT_NOT_REPRESENTABLE, _witness(sig.worst_point)
        rep.message = f"noise columns do not commute (residual {sig.max_residual:.3g})"
        return rep
    if sig.verdict == "inconclusive":
        rep.exit_code, rep.message = EXIT_INCONCLUSIVE, "too many sample points left the domain"
        return rep

    rep.stage = "generator"
    try:
        gen = infer_generator(model, n_points=min(n_points, 64), seed=seed)
    except NoSolution as exc:
        rep.exit_code, rep.witness = EXIT_NOT_REPRESENTABLE, _witness(exc.point)
        rep.message = str(exc)
        return rep
    rep.reports["generator"] = gen.report
    rep.generator = gen.mean_A()
    if gen.report.verdict == "inconclusive":
        rep.exit_code, rep.message = EXIT_INCONCLUSIVE, "generator check skipped too many points"
        return rep

    rep.stage = "drift"
    square = model.p == model.d == model.r
    if diffeo is None and square:
        dev = np.abs(gen.A - gen.A.mean(axis=0)).max(axis=(1, 2))
        for tt in np.unique(gen.t):
            m = gen.t == tt
            dev[m] = np.abs(gen.A[m] - gen.A[m].mean(axis=0)).max(axis=(1, 2))
        scale = 1.0 + float(np.abs(gen.A).max())
        k = int(np.argmax(dev))
        rep.reports["drift"] = CheckReport(
            "pass" if dev[k] <= CONSTANCY_TOL * scale else "fail",
            float(dev[k] / scale), (gen.x[k], float(gen.t[k])), {"constancy": float(dev[k] / scale)},
            len(dev), 0, CONSTANCY_TOL, "drift",
        )
        if dev[k] > CONSTANCY_TOL * scale:
            rep.exit_code, rep.witness = EXIT_NOT_REPRESENTABLE, _witness((gen.x[k], gen.t[k]))
            rep.message = f"generator varies with the state (deviation {dev[k]:.3g})"
            return rep
        rep.message = "square commuting noise with a state-independent generator"
        return rep

    try:
        chart, how = _choose_chart(model, diffeo, anchor, seed)
    except ExactSdeError as exc:
        rep.exit_code, rep.message = EXIT_INCONCLUSIVE, f"could not build a straightening chart: {exc}"
        return rep
    if chart is None:
        rep.exit_code, rep.message = EXIT_INCONCLUSIVE, "no straightening chart (give a chart or an anchor)"
        return rep
    p3 = verify_p3(chart, model, n_points=min(n_points, 100), seed=seed)
    rep.reports["chart"] = p3.report
    if not p3.report.passed:
        rep.exit_code, rep.stage = EXIT_INCONCLUSIVE, "chart"
        rep.message = f"{how} chart does not straighten the noise (residual {p3.report.max_residual:.3g})"
        return rep
    cm = p3.transformed
    t_range = None if cm.time_homogeneous else (0.0, model.T)
    if tol is None:
        tol = FLOW_DRIFT_TOL if how == "flow" else DRIFT_TOL
    try:
        ext = classify_canonical_drift(
            model.p, model.d, model.r, p3.kappa, cm.h_strat, cm.box, n_points=min(n_points, 64),
            tol=tol, seed=seed, t_range=t_range, region=cm.region,
        )
    except (NotAffine, KappaDependsOnBar) as exc:
        rep.exit_code = EXIT_NOT_REPRESENTABLE
        z = None if exc.point is None else exc.point[0]
        x = None
        if z is not None:
            try:
                x = chart.inverse(z, exc.point[1])
            except ExactSdeError:
                x = None
        rep.witness = _witness((x if x is not None else z, exc.point[1]), z) if z is not None else None
        rep.message = str(exc)
        return rep
    rep.reports["drift"] = ext.report
    if ext.report.verdict == "inconclusive":
        rep.exit_code, rep.message = EXIT_INCONCLUSIVE, "drift classification skipped too many points"
        return rep
    rep.params = _chart_params(model, ext, p3.kappa, cm.box)
    rep.diffeo = chart
    rep.message = f"affine drift in the {how} chart"
    return rep


@dataclass
class BuildResult:
    representation: object
    validation: CheckReport
    pipeline: Optional[PipelineReport] = None


def full_pipeline(
    model: SdeModel,
    x,
    s: float,
    grid: Grid,
    diffeo=None,
    params: Optional[CanonicalParams] = None,
    anchor=None,
    seed: int = 0,
    n_validate: int = 200,
    tol: float = 1e-5,
) -> BuildResult:
    """Check, extract (unless ``params`` is given), build and validate.

    Raises ``NotRepresentable`` style errors through ``ExactSdeError`` when
    the check does not end with exit code 0.
    """
    report = None
    if params is None or diffeo is None:
        report = check_pipeline(model, diffeo=diffeo, anchor=x if anchor is None else anchor, seed=seed)
        if report.exit_code != EXIT_OK:
            raise NotRepresentable(report)
        if report.params is None:
            # square case decided without a chart: build one at the start point
            report = check_pipeline(
                model,
                diffeo=flow_straighten(
                    model, x if anchor is None else anchor, t_anchor=s, half_width_frac=SQUARE_HALF_WIDTH
                ),
                seed=seed,
            )
            if report.exit_code != EXIT_OK:
                raise NotRepresentable(report)
        diffeo = report.diffeo if diffeo is None else diffeo
        params = report.params if params is None else params
    rep = build_representation(params, diffeo, x, s, grid)
    val = validate_representation(rep, model, n_points=n_validate, tol=tol, seed=seed)
    return BuildResult(rep, val, report)


class NotRepresentable(ExactSdeError):
    def __init__(self, report: PipelineReport):
        super().__init__(f"{report.model}: {report.verdict} at stage {report.stage}: {report.message}")
        self.report = report
