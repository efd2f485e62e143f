import math

import numpy as np
import pytest
from scipy import special

from collider_lab import glm
from collider_lab.datagen import SeedSpec, gen_collider, gen_exposure, normals, simulate, uniforms
from collider_lab.glm import DesignSpec, FitControl, fit_glm, fit_logadditive_selection, fit_matrix
from collider_lab.models import (ColliderModel, Dataset, ExposureSpec, NumericalError, OutcomeModel,
                                 ValidationError)


def two_by_two(a, b, c, d):
    """x=1: a events, b non-events; x=0: c events, d non-events."""
    x = np.repeat([1.0, 1.0, 0.0, 0.0], [a, b, c, d])
    y = np.repeat([1.0, 0.0, 1.0, 0.0], [a, b, c, d])
    return Dataset({"x": x, "y": y, "s": np.ones_like(x)})


def test_saturated_two_by_two_logistic():
    f = fit_glm(two_by_two(30, 70, 50, 50), DesignSpec.of("1", "x"), "binomial_logit")
    assert f.converged
    assert abs(f.coef("x") - math.log(3 / 7)) < 1e-8
    assert abs(f.coef(glm.INTERCEPT)) < 1e-8


def test_gaussian_equals_normal_equations():
    rng = np.random.default_rng(1)
    X = np.column_stack([np.ones(500), rng.normal(size=500), rng.uniform(size=500)])
    y = X @ [0.5, -1.0, 2.0] + rng.normal(size=500)
    f = fit_matrix(X, y, "gaussian_identity")
    ols = np.linalg.solve(X.T @ X, X.T @ y)
    assert np.max(np.abs(f.coefficients - ols)) < 1e-10
    rss = float(np.sum((y - X @ ols) ** 2))
    assert f.deviance == pytest.approx(rss, rel=1e-12)
    sigma2 = rss / (500 - 3)
    assert f.dispersion == pytest.approx(sigma2, rel=1e-12)
    assert np.allclose(f.std_errors, np.sqrt(np.diag(np.linalg.inv(X.T @ X)) * sigma2), rtol=1e-10)


def test_poisson_intercept_only():
    y = np.array([0, 1, 1, 2, 3, 5, 0, 0, 4.0])
    f = fit_matrix(np.ones((y.size, 1)), y, "poisson_log", ["(Intercept)"])
    assert abs(f.coefficients[0] - math.log(y.mean())) < 1e-10


def _recovery_data(family, n=10**6, seed=11):
    seed = SeedSpec(seed, family)
    x = gen_exposure(ExposureSpec.bernoulli(0.3), n, seed.child("x"))
    beta = (-1.5, 0.2) if family == "binomial_log" else (0.0, 0.2)
    eta = beta[0] + beta[1] * x
    u = uniforms(seed.child("y"), n)
    if family == "gaussian_identity":
        y = eta + 0.5 * normals(seed.child("y"), n)
    elif family == "binomial_logit":
        y = (u < special.expit(eta)).astype(float)
    elif family == "binomial_probit":
        y = (u < special.ndtr(eta)).astype(float)
    elif family == "binomial_log":
        y = (u < np.exp(eta)).astype(float)
    else:
        from collider_lab.datagen import poisson_inverse_cdf
        y = poisson_inverse_cdf(u, np.exp(eta))
    return Dataset({"x": x, "y": y, "s": np.ones(n)}), beta


@pytest.mark.parametrize("family", glm.FAMILIES)
def test_generative_recovery(family):
    data, beta = _recovery_data(family)
    f = fit_glm(data, DesignSpec.of("1", "x"), family)
    assert f.converged
    for term, b in zip(f.terms, beta):
        assert abs(f.coef(term) - b) < 3 * f.se(term), (term, f.coef(term), f.se(term))
    if family == "binomial_log":
        assert not f.boundary_flag


@pytest.mark.parametrize("family", glm.FAMILIES)
def test_score_equations_and_finite_differences(family):
    data, _ = _recovery_data(family, n=20_000, seed=3)
    design = DesignSpec.of("1", "x")
    X = design.matrix(data.columns)
    y = data["y"]
    f = fit_glm(data, design, family)
    assert f.converged
    g = glm.score(family, X, y, f.coefficients)
    assert np.max(np.abs(g)) < 1e-6 * data.n
    # away from the optimum the analytic score must match the numerical gradient
    beta = np.asarray(f.coefficients) + np.array([-0.05, 0.08])
    g = glm.score(family, X, y, beta)
    h = 1e-5
    fd = np.array([(glm.log_likelihood(family, y, X @ (beta + h * e))
                    - glm.log_likelihood(family, y, X @ (beta - h * e))) / (2 * h) for e in np.eye(2)])
    assert np.allclose(g, fd, rtol=1e-4, atol=1e-6 * data.n)


@pytest.mark.parametrize("family", glm.FAMILIES)
def test_deviance_trace_non_increasing(family):
    data, _ = _recovery_data(family, n=20_000, seed=4)
    f = fit_glm(data, DesignSpec.of("1", "x"), family)
    trace = np.array(f.deviance_trace)
    assert np.all(np.diff(trace) <= 1e-11 * (np.abs(trace[:-1]) + 1))


@pytest.mark.parametrize("family", ["binomial_logit", "poisson_log", "binomial_log"])
def test_row_permutation_invariance(family):
    data, _ = _recovery_data(family, n=30_000, seed=5)
    perm = np.random.default_rng(0).permutation(data.n)
    shuffled = Dataset({k: v[perm] for k, v in data.columns.items()})
    a = fit_glm(data, DesignSpec.of("1", "x"), family)
    b = fit_glm(shuffled, DesignSpec.of("1", "x"), family)
    assert np.max(np.abs(a.coefficients - b.coefficients)) < 1e-12


@pytest.fixture(scope="module")
def logadd_data():
    return simulate(ExposureSpec.bernoulli(0.3), OutcomeModel.logistic(0.0, 0.2),
                    ColliderModel.log_additive(-1.5, 0.3, 0.3, 0.2), 10**6, SeedSpec(21))


class TestLogAdditiveSelection:
    @pytest.fixture
    def data(self, logadd_data):
        return logadd_data

    def test_interaction_recovered(self, data):
        f = fit_logadditive_selection(data)
        assert f.terms == ("(Intercept)", "x", "y", "x:y")
        for term, d in zip(f.terms, (-1.5, 0.3, 0.3, 0.2)):
            assert abs(f.coef(term) - d) < 3 * f.se(term)

    def test_without_interactions(self, data):
        f = fit_logadditive_selection(data, with_interactions=False)
        assert f.terms == ("(Intercept)", "x", "y")
        with pytest.raises(KeyError):
            f.coef("x:y")

    def test_all_selected_hits_boundary(self, data):
        ones = Dataset({**data.columns, "s": np.ones(data.n)})
        f = fit_logadditive_selection(ones)
        assert f.boundary_flag
        assert abs(f.coef("(Intercept)")) < 1e-8

    def test_several_exposures_no_exposure_products(self):
        rng = np.random.default_rng(2)
        n = 5000
        cols = {"a": rng.binomial(1, 0.4, n), "b": rng.binomial(1, 0.5, n), "y": rng.binomial(1, 0.5, n),
                "s": rng.binomial(1, 0.3, n)}
        f = fit_logadditive_selection(Dataset(cols, ("a", "b")))
        assert f.terms == ("(Intercept)", "a", "b", "y", "a:y", "b:y")


def test_non_convergence_reported():
    data, _ = _recovery_data("binomial_logit", n=5000, seed=6)
    f = fit_glm(data, DesignSpec.of("1", "x"), "binomial_logit", FitControl(max_iter=1))
    assert not f.converged and f.iterations == 1


def test_collinear_design_is_singular():
    x = np.arange(20.0) % 3
    X = np.column_stack([np.ones(20), x, 2 * x])
    with pytest.raises(NumericalError, match="singular"):
        fit_matrix(X, x + 1.0, "gaussian_identity")


@pytest.mark.parametrize("family,y", [("binomial_logit", [0, 1, 2]), ("poisson_log", [0, 1.5, 2]),
                                      ("poisson_log", [0, -1, 2]), ("gaussian_identity", [0, np.nan, 1])])
def test_response_domain(family, y):
    X = np.column_stack([np.ones(3), [0, 1, 0]])
    with pytest.raises(ValidationError):
        fit_matrix(X, np.array(y, dtype=float), family)


def test_more_terms_than_rows():
    with pytest.raises(ValidationError, match="more rows"):
        fit_matrix(np.ones((2, 2)), np.array([0.0, 1.0]), "gaussian_identity")


def test_design_spec():
    d = DesignSpec.of("1", "x", "x:y")
    assert d.names == ["(Intercept)", "x", "x:y"]
    M = d.matrix({"x": np.array([1.0, 2.0]), "y": np.array([3.0, 4.0])})
    assert M.tolist() == [[1, 1, 3], [1, 2, 8]]
    with pytest.raises(ValidationError, match="duplicate"):
        DesignSpec.of("x", "x")
    with pytest.raises(ValidationError, match="missing column"):
        d.matrix({"x": np.ones(2)})


def test_fit_control_positive():
    with pytest.raises(ValidationError):
        FitControl(max_iter=0)


def test_summary_csv():
    f = fit_glm(two_by_two(30, 70, 50, 50), DesignSpec.of("1", "x"), "binomial_logit")
    lines = f.summary_csv().splitlines()
    assert lines[0] == "term,estimate,std_error"
    term, est, se = lines[2].split(",")
    assert term == "x" and float(est) == f.coef("x") and float(se) == f.se("x")
    assert lines[-1].startswith("# family=binomial_logit,deviance=") and "converged=true" in lines[-1]
