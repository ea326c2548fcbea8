import json

import numpy as np
import pytest

from exactsde import catalog
from exactsde.numerics import Box, Grid
from exactsde.model import SdeModel
from exactsde.pipeline import (
    EXIT_INCONCLUSIVE,
    EXIT_NOT_REPRESENTABLE,
    EXIT_OK,
    NotRepresentable,
    check_pipeline,
    full_pipeline,
)


@pytest.mark.parametrize("mid", catalog.POSITIVE)
def test_positive_entries_are_representable(mid):
    e = catalog.get(mid)
    rep = check_pipeline(e.model, diffeo=e.diffeo)
    assert rep.exit_code == EXIT_OK and rep.verdict == "representable"
    assert rep.witness is None
    assert rep.params is not None


def test_asymmetric_heisenberg_has_witness():
    e = catalog.get("heisenberg_asym")
    rep = check_pipeline(e.model)
    assert rep.exit_code == EXIT_NOT_REPRESENTABLE and rep.stage == "sigma"
    x = np.array(rep.witness["x"])
    assert x.shape == (3,) and e.model.box.contains(x)


def test_nonaffine_drift_fails_at_drift_stage():
    e = catalog.get("nonaffine_drift")
    for diffeo in (e.diffeo, None):
        rep = check_pipeline(e.model, diffeo=diffeo)
        assert rep.exit_code == EXIT_NOT_REPRESENTABLE and rep.stage == "drift"
        assert rep.witness is not None


def test_square_noise_decided_by_generator():
    rep = check_pipeline(catalog.get("ou").model)
    assert rep.exit_code == EXIT_OK
    np.testing.assert_allclose(rep.generator, [[0.8]], atol=1e-8)
    assert "drift" in rep.reports and rep.reports["drift"].passed


def test_example1_passes_as_checker_fixture():
    e = catalog.get("example1_fgmn")
    rep = check_pipeline(e.model)
    assert rep.exit_code == EXIT_OK
    np.testing.assert_allclose(rep.generator, -e.expected["B"], atol=1e-6)


def test_flow_chart_heisenberg():
    e = catalog.get("heisenberg")
    rep = check_pipeline(e.model, anchor=e.anchor)
    assert rep.exit_code == EXIT_OK and "flow" in rep.message
    # the flow chart is the closed form shifted by a constant (the anchor gauge)
    shift = rep.diffeo.forward(e.anchor, 0.0) - e.diffeo.forward(e.anchor, 0.0)
    w = np.array([[-0.5], [0.0], [0.7]])
    for name in ("beta", "theta", "htilde"):
        got = getattr(rep.params, name)(w + shift[2:], 0.0)
        np.testing.assert_allclose(got, getattr(e.params, name)(w, 0.0), atol=1e-4)


def test_rank_deficient_without_anchor_is_inconclusive():
    rep = check_pipeline(catalog.get("heisenberg").model)
    assert rep.exit_code == EXIT_INCONCLUSIVE and rep.verdict == "inconclusive"


def test_report_json_field_order():
    rep = check_pipeline(catalog.get("heisenberg_asym").model)
    d = json.loads(json.dumps(rep.to_dict()))
    assert list(d) == ["model", "verdict", "exit_code", "stage", "message", "witness", "generator_mean", "reports"]


def test_full_pipeline_square_case_builds_flow_chart():
    e = catalog.get("ou")
    res = full_pipeline(e.model, e.x0, 0.0, Grid.uniform(0.0, 1.0, 6))
    assert res.validation.passed, res.validation.to_dict()
    np.testing.assert_allclose(res.representation.phi(np.zeros(1), 1.0), e.expected["mean"](1.0), atol=1e-6)


def test_full_pipeline_refuses_negative_fixture():
    e = catalog.get("heisenberg_asym")
    with pytest.raises(NotRepresentable) as exc:
        full_pipeline(e.model, e.x0, 0.0, Grid.uniform(0.0, 1.0, 3))
    assert exc.value.report.exit_code == EXIT_NOT_REPRESENTABLE


@pytest.mark.filterwarnings("ignore:invalid value encountered in sqrt:RuntimeWarning")
def test_time_varying_noise_needs_a_chart():
    # flow charts are built at a frozen time, so the build is inconclusive without the closed form
    e = catalog.get("cir_timevar")
    with pytest.raises(NotRepresentable) as exc:
        full_pipeline(e.model, e.x0, 0.0, Grid.uniform(0.0, 1.0, 3))
    assert exc.value.report.exit_code == EXIT_INCONCLUSIVE


def test_state_dependent_generator_is_rejected():
    # scalar unit noise with drift sin(x): the generator -cos(x) varies with the state
    model = SdeModel("sine", 1, 1, 1, Box([-1.0], [1.0]), lambda x, t: np.ones(np.shape(x) + (1,)),
                     lambda x, t: np.sin(x))
    rep = check_pipeline(model)
    assert rep.exit_code == EXIT_NOT_REPRESENTABLE and rep.stage == "drift"
