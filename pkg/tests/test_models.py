import json
import math

import numpy as np
import pytest

from collider_lab.models import (ColliderModel, Dataset, ExposureSpec, OutcomeModel, Scenario,
                                 ValidationError, logadditive_support_max, validate_scenario)


def test_reference_scenario_is_valid():
    sc = validate_scenario(ExposureSpec.bernoulli(0.3), OutcomeModel.logistic(0.0, 0.2),
                           ColliderModel.logistic(-0.2, 0.3, 0.3, 0.1))
    assert sc.outcome.slope == 0.2


def test_negative_sd_rejected():
    with pytest.raises(ValidationError, match="invalid sd"):
        ExposureSpec.normal(0.0, -1.0)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_bernoulli_p_open_interval(p):
    with pytest.raises(ValidationError):
        ExposureSpec.bernoulli(p)


def test_logadditive_probability_one_is_allowed():
    # exp(0) = 1 sits on the boundary of the non-strict constraint
    validate_scenario(ExposureSpec.bernoulli(0.5), OutcomeModel.logistic(0.0, 0.0),
                      ColliderModel.log_additive(0.0, 0.0, 0.0, 0.0))


def test_logadditive_violation_names_point():
    with pytest.raises(ValidationError, match=r"x=1.0, y=1.0"):
        validate_scenario(ExposureSpec.bernoulli(0.3), OutcomeModel.logistic(0.0, 0.2),
                          ColliderModel.log_additive(-0.5, 0.3, 0.3, 0.1))


def test_logadditive_unbounded_support_rejected():
    # Normal exposure makes delta1*x unbounded above
    with pytest.raises(ValidationError):
        validate_scenario(ExposureSpec.normal(), OutcomeModel.logistic(0.0, 0.2),
                          ColliderModel.log_additive(-1.0, 0.3, 0.0, 0.0))
    # with no x terms the support is bounded again
    validate_scenario(ExposureSpec.normal(), OutcomeModel.logistic(0.0, 0.2),
                      ColliderModel.log_additive(-1.0, 0.0, 0.3, 0.0))


def test_support_max_is_attained_at_corner():
    c = ColliderModel.log_additive(-2.0, 0.5, -0.3, 0.4)
    top, (x, y) = logadditive_support_max(c, (0.0, 1.0), (0.0, 1.0))
    grid = [c.index(a, b) for a in (0, 1) for b in (0, 1)]
    assert top == pytest.approx(max(grid))
    assert c.index(x, y) == pytest.approx(top)


def test_dimension_mismatch():
    with pytest.raises(ValidationError, match="dimension mismatch"):
        validate_scenario(ExposureSpec.bernoulli(0.3), OutcomeModel.logistic(0.0, (0.2, 0.1)),
                          ColliderModel.logistic(0.0, 0.3, 0.3, 0.0))


@pytest.mark.parametrize("kwargs", [
    dict(kind="linear", beta0=0.0, beta1=0.2, sigma=0.0),
    dict(kind="linear", beta0=0.0, beta1=0.2),
    dict(kind="logistic", beta0=0.0, beta1=0.2, sigma=1.0),
    dict(kind="gamma", beta0=0.0, beta1=0.2),
])
def test_outcome_invariants(kwargs):
    with pytest.raises(ValidationError):
        OutcomeModel(**kwargs)


def test_collider_invariants():
    with pytest.raises(ValidationError):
        ColliderModel.double_threshold(0, 0, 0, 0, 1.0, -1.0)
    with pytest.raises(ValidationError):
        ColliderModel.probit(0, 0, 0, 0, latent_sd=0.0)


@pytest.mark.parametrize("collider", [
    ColliderModel.logistic(-0.1, 0.3, 0.3, -0.5),
    ColliderModel.probit(0.2, 0.3, 0.3, 0.5, 1.6),
    ColliderModel.double_threshold(0.0, 0.3, 0.3, 0.1, -1.0791, 1.0791, 1.6),
    ColliderModel.log_additive(-1.2, 0.3, 0.3, 0.1),
])
@pytest.mark.parametrize("outcome", [
    OutcomeModel.logistic(0.0, 0.2), OutcomeModel.linear(0.0, 0.2, 0.5), OutcomeModel.poisson(-0.3, 0.2)])
def test_config_round_trip(collider, outcome):
    exposure = ExposureSpec.bernoulli(0.3)
    if collider.kind == "log_additive" and outcome.kind != "logistic":
        pytest.skip("unbounded outcome support is invalid for a log-additive collider with delta2 > 0")
    sc = validate_scenario(exposure, outcome, collider)
    text = json.dumps(sc.to_config())
    assert Scenario.from_config(json.loads(text)) == sc


def test_config_missing_field():
    cfg = Scenario(ExposureSpec.bernoulli(0.3), OutcomeModel.logistic(0, 0.2),
                   ColliderModel.logistic(0, 0.3, 0.3, 0)).to_config()
    del cfg["collider"]["delta3"]
    with pytest.raises(ValidationError, match="collider.delta3"):
        Scenario.from_config(cfg)


def test_selection_probability_double_threshold_matches_quartiles():
    q = 1.6 * 0.6744897501960817
    c = ColliderModel.double_threshold(0.0, 0.0, 0.0, 0.0, -q, q, 1.6)
    assert c.selection_probability(0.0, 0.0) == pytest.approx(0.5, abs=1e-12)


class TestDataset:
    def test_roles_and_selection_domain(self):
        with pytest.raises(ValidationError, match="role column"):
            Dataset({"x": [0, 1], "y": [0, 1]})
        with pytest.raises(ValidationError, match="only 0 and 1"):
            Dataset({"x": [0, 1], "y": [0, 1], "s": [0, 2]})
        with pytest.raises(ValidationError, match="length"):
            Dataset({"x": [0, 1], "y": [0, 1, 1], "s": [0, 1]})

    def test_read_only_and_subset(self):
        d = Dataset({"x": [0, 1, 1], "y": [1.5, 2.5, 3.5], "s": [1, 0, 1]})
        with pytest.raises(ValueError):
            d["x"][0] = 5
        sel = d.selected()
        assert sel.n == 2 and list(sel["y"]) == [1.5, 3.5]

    def test_outcome_domain(self):
        d = Dataset({"x": [0, 1], "y": [0.5, 2.0], "s": [1, 0]})
        d.check_outcome_domain("real")
        with pytest.raises(ValidationError):
            d.check_outcome_domain("binary")
        with pytest.raises(ValidationError):
            d.check_outcome_domain("count")
        Dataset({"x": [0, 1], "y": [0, 3], "s": [1, 0]}).check_outcome_domain("count")
