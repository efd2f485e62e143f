"""Maximum-likelihood GLM fitting by iteratively reweighted least squares.

Five family/link pairs are supported:

==================  ==========================================================
gaussian_identity   ordinary least squares, sigma^2 estimated from residuals
binomial_logit      logistic regression
binomial_probit     probit regression
binomial_log        log link on a 0/1 response with Poisson working weights
                    (the usual way of fitting log-additive selection models)
poisson_log         Poisson regression
==================  ==========================================================

IRLS uses expected information. Each Newton step is halved while it raises
the deviance, so the deviance trace is non-increasing up to rounding.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy import linalg, special

from .models import Dataset, NumericalError, ValidationError, check_domain

log = logging.getLogger(__name__)

FAMILIES = ("gaussian_identity", "binomial_logit", "binomial_probit", "binomial_log", "poisson_log")
INTERCEPT = "(Intercept)"
RIDGE = 1e-12
# squared Cholesky pivot of the unit-diagonal information matrix below which the
# design is treated as collinear; sits well above the ridge
SINGULAR_PIVOT = 1e-10
# relative slack when comparing deviances of successive iterates
DEVIANCE_SLACK = 1e-11
_PROB_EPS = 1e-300

Term = Union[str, tuple]


def term_name(term: Term) -> str:
    if isinstance(term, tuple):
        return ":".join(term)
    return term


@dataclass(frozen=True)
class DesignSpec:
    """Ordered model terms.

    A term is :data:`INTERCEPT` (or ``"1"``), a column name, or a tuple of
    column names whose elementwise product forms an interaction; ``"a:b"`` in
    string form is parsed as the tuple ``("a", "b")``.
    """

    terms: tuple

    def __post_init__(self):
        parsed = []
        for t in self.terms:
            if t in ("1", INTERCEPT):
                parsed.append(INTERCEPT)
            elif isinstance(t, str) and ":" in t:
                parsed.append(tuple(t.split(":")))
            elif isinstance(t, (tuple, list)):
                parsed.append(tuple(t))
            else:
                parsed.append(t)
        object.__setattr__(self, "terms", tuple(parsed))
        names = self.names
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate terms in design: {names}")

    @classmethod
    def of(cls, *terms: Term) -> "DesignSpec":
        return cls(tuple(terms))

    @property
    def names(self) -> list[str]:
        return [term_name(t) for t in self.terms]

    def matrix(self, columns) -> np.ndarray:
        n = len(next(iter(columns.values()))) if hasattr(columns, "values") else columns.n
        X = np.empty((n, len(self.terms)))
        for j, t in enumerate(self.terms):
            if t == INTERCEPT:
                X[:, j] = 1.0
            elif isinstance(t, tuple):
                X[:, j] = np.prod([_column(columns, c) for c in t], axis=0)
            else:
                X[:, j] = _column(columns, t)
        return X


def _column(columns, name: str) -> np.ndarray:
    try:
        return np.asarray(columns[name], dtype=float)
    except KeyError:
        raise ValidationError(f"design references missing column {name!r}") from None


@dataclass(frozen=True)
class FitControl:
    max_iter: int = 100
    coef_tol: float = 1e-10
    step_halving_max: int = 30

    def __post_init__(self):
        if self.max_iter <= 0 or self.coef_tol <= 0 or self.step_halving_max <= 0:
            raise ValidationError("FitControl fields must all be positive")


@dataclass(frozen=True)
class GlmFit:
    family: str
    terms: tuple[str, ...]
    coefficients: np.ndarray
    std_errors: np.ndarray
    converged: bool
    iterations: int
    deviance: float
    boundary_flag: bool
    n: int
    dispersion: float = 1.0
    deviance_trace: tuple[float, ...] = field(default=(), repr=False)
    last_step: float = math.nan

    def __post_init__(self):
        for name in ("coefficients", "std_errors"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if not (len(self.terms) == self.coefficients.size == self.std_errors.size):
            raise ValidationError("terms, coefficients and std_errors must align")

    def _index(self, term: str) -> int:
        try:
            return self.terms.index(term)
        except ValueError:
            raise KeyError(f"term {term!r} not in fit {self.terms}") from None

    def coef(self, term: str) -> float:
        return float(self.coefficients[self._index(term)])

    def se(self, term: str) -> float:
        return float(self.std_errors[self._index(term)])

    def as_dict(self) -> dict[str, tuple[float, float]]:
        return {t: (float(b), float(s)) for t, b, s in zip(self.terms, self.coefficients, self.std_errors)}

    def summary_csv(self) -> str:
        """``term,estimate,std_error`` rows followed by a metadata line."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["term", "estimate", "std_error"])
        for t, b, s in zip(self.terms, self.coefficients, self.std_errors):
            w.writerow([t, f"{b:.17g}", f"{s:.17g}"])
        buf.write(f"# family={self.family},deviance={self.deviance:.17g},iterations={self.iterations},"
                  f"converged={str(self.converged).lower()},boundary_flag={str(self.boundary_flag).lower()}\n")
        return buf.getvalue()


# --- family pieces -----------------------------------------------------------

_DOMAINS = {"gaussian_identity": "real", "binomial_logit": "binary", "binomial_probit": "binary",
            "binomial_log": "binary", "poisson_log": "count"}


def _mean(family: str, eta: np.ndarray) -> np.ndarray:
    if family == "gaussian_identity":
        return eta
    if family == "binomial_logit":
        return special.expit(eta)
    if family == "binomial_probit":
        return special.ndtr(eta)
    return np.exp(eta)


def _score_weights(family: str, y: np.ndarray, eta: np.ndarray):
    """Return (u, w): score contributions (y - mu) mu'/V and IRLS weights mu'^2/V."""
    if family == "gaussian_identity":
        return y - eta, np.ones_like(eta)
    if family == "binomial_logit":
        mu = special.expit(eta)
        return y - mu, mu * (1.0 - mu)
    if family == "binomial_probit":
        log_phi = -0.5 * eta**2 - 0.5 * math.log(2 * math.pi)
        log_p, log_q = special.log_ndtr(eta), special.log_ndtr(-eta)
        # y=1: phi/Phi(eta); y=0: -phi/Phi(-eta); both stable in the tails
        u = np.where(y == 1, np.exp(log_phi - log_p), -np.exp(log_phi - log_q))
        w = np.exp(2 * log_phi - log_p - log_q)
        return u, w
    mu = np.exp(eta)
    return y - mu, mu


def log_likelihood(family: str, y, eta) -> float:
    """Log-likelihood up to terms free of the coefficients (unit scale for Gaussian)."""
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if family == "gaussian_identity":
        return float(-0.5 * np.sum((y - eta) ** 2))
    if family == "binomial_logit":
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    if family == "binomial_probit":
        return float(np.sum(np.where(y == 1, special.log_ndtr(eta), special.log_ndtr(-eta))))
    return float(np.sum(y * eta - np.exp(eta)))


def deviance(family: str, y, eta) -> float:
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if family == "gaussian_identity":
        return float(np.sum((y - eta) ** 2))
    if family in ("binomial_logit", "binomial_probit"):
        # saturated binary log-likelihood is 0
        return -2.0 * log_likelihood(family, y, eta)
    mu = np.exp(eta)
    ylogy = special.xlogy(y, y)
    return float(2.0 * np.sum(ylogy - y * eta - (y - mu)))


def score(family: str, X, y, beta) -> np.ndarray:
    """Gradient of :func:`log_likelihood` with respect to the coefficients."""
    X = np.asarray(X, dtype=float)
    u, _ = _score_weights(family, np.asarray(y, dtype=float), X @ np.asarray(beta, dtype=float))
    return X.T @ u


def _start(family: str, X: np.ndarray, y: np.ndarray, names: Sequence[str]) -> np.ndarray:
    beta = np.zeros(X.shape[1])
    if INTERCEPT not in names:
        return beta
    m = float(np.mean(y))
    if family == "gaussian_identity":
        b0 = m
    elif family == "binomial_logit":
        m = min(max(m, 1e-10), 1 - 1e-10)
        b0 = math.log(m / (1 - m))
    elif family == "binomial_probit":
        b0 = float(special.ndtri(min(max(m, 1e-10), 1 - 1e-10)))
    else:
        b0 = math.log(max(m, 1e-10))
    beta[list(names).index(INTERCEPT)] = b0
    return beta


def _solve(info: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    scale = np.sqrt(np.diag(info))
    if not np.all(np.isfinite(info)) or np.any(scale <= 0):
        raise NumericalError("singular information matrix: a design column has zero weight")
    scaled = info / np.outer(scale, scale)
    try:
        c = linalg.cho_factor(scaled, check_finite=False)
    except linalg.LinAlgError:
        try:
            c = linalg.cho_factor(scaled + RIDGE * np.eye(len(scale)), check_finite=False)
        except linalg.LinAlgError:
            raise NumericalError("singular information matrix (collinear design)") from None
    # ridge rescue must not hide exact collinearity
    if np.min(np.abs(np.diag(c[0]))) ** 2 < SINGULAR_PIVOT:
        raise NumericalError("singular information matrix (collinear design)")
    return linalg.cho_solve(c, rhs / scale[:, None] if rhs.ndim == 2 else rhs / scale,
                            check_finite=False) / (scale[:, None] if rhs.ndim == 2 else scale)


def fit_matrix(X, y, family: str, names: Sequence[str] | None = None,
               control: FitControl | None = None) -> GlmFit:
    """Fit a GLM given an explicit design matrix."""
    if family not in FAMILIES:
        raise ValidationError(f"unknown family {family!r}; expected one of {FAMILIES}")
    control = control or FitControl()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(p))
    if y.shape != (n,):
        raise ValidationError(f"response has shape {y.shape}, expected ({n},)")
    if n <= p:
        raise ValidationError(f"need more rows than terms: n={n}, terms={p}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("design matrix contains non-finite values")
    check_domain(y, _DOMAINS[family])

    beta = _start(family, X, y, names)
    eta = X @ beta
    dev = deviance(family, y, eta)
    trace = [dev]
    converged = False
    it = 0
    rel_step = math.inf
    for it in range(1, control.max_iter + 1):
        u, w = _score_weights(family, y, eta)
        info = (X * w[:, None]).T @ X
        step = _solve(info, X.T @ u)
        rel_step = float(np.max(np.abs(step) / np.maximum(np.abs(beta), 1.0)))
        accepted = False
        for _ in range(control.step_halving_max + 1):
            new_eta = X @ (beta + step)
            new_dev = deviance(family, y, new_eta)
            if math.isfinite(new_dev) and new_dev <= dev + DEVIANCE_SLACK * (abs(dev) + 1.0):
                accepted = True
                break
            step = step / 2
        if not accepted:
            # stalled: fine if the proposed move was already below tolerance
            converged = rel_step < control.coef_tol
            if not converged:
                log.warning("IRLS stalled after %d iterations (step %.3g)", it, rel_step)
            break
        beta = beta + step
        eta = new_eta
        dev = new_dev
        trace.append(dev)
        rel_step = float(np.max(np.abs(step) / np.maximum(np.abs(beta), 1.0)))
        if rel_step < control.coef_tol:
            converged = True
            break
    if not converged:
        log.warning("IRLS did not converge in %d iterations (%s)", it, family)

    _, w = _score_weights(family, y, eta)
    info = (X * w[:, None]).T @ X
    cov = _solve(info, np.eye(p))
    dispersion = 1.0
    if family == "gaussian_identity":
        dispersion = dev / (n - p)
    se = np.sqrt(np.maximum(np.diag(cov), 0.0) * dispersion)
    boundary = bool(family == "binomial_log" and np.max(eta) >= -1e-8)
    return GlmFit(family, names, beta, se, converged, it, dev, boundary, n, dispersion,
                  tuple(trace), rel_step)


def fit_glm(data: Dataset, design: DesignSpec, family: str, control: FitControl | None = None,
            response: str | None = None) -> GlmFit:
    """Fit ``response ~ design`` on ``data`` (response defaults to the outcome role).

    Non-convergence is reported through ``converged=False``; a singular
    information matrix raises :class:`NumericalError`.
    """
    X = design.matrix(data.columns)
    y = data[response or data.outcome]
    return fit_matrix(X, y, family, design.names, control)


def logadditive_design(exposure_cols: Sequence[str], outcome_col: str,
                       with_interactions: bool = True) -> DesignSpec:
    terms: list[Term] = [INTERCEPT, *exposure_cols, outcome_col]
    if with_interactions:
        terms += [(c, outcome_col) for c in exposure_cols]
    return DesignSpec(tuple(terms))


def fit_logadditive_selection(data: Dataset, exposure_cols: Sequence[str] | None = None,
                              outcome_col: str | None = None, with_interactions: bool = True,
                              control: FitControl | None = None) -> GlmFit:
    """Fit ``log P(S=1) = d0 + sum d1j Xj + d2 Y + sum d3j Xj Y`` on all rows.

    Interactions are only formed between each exposure and the outcome.
    """
    exposure_cols = tuple(exposure_cols or data.exposure)
    outcome_col = outcome_col or data.outcome
    design = logadditive_design(exposure_cols, outcome_col, with_interactions)
    return fit_glm(data, design, "binomial_log", control, response=data.selection)
