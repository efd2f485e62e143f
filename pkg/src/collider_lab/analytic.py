"""Closed-form collider-bias formulas and exact numerical oracles.

Formulas (log-additive collider unless stated otherwise):

* odds ratio:      OR_{XY|S=1}(x) = OR_{XY}(x) * exp(delta3)
* logistic slope:  beta1^S = beta1 + delta3
* risk ratio:      conditional RR for log-binomial or logistic outcomes
* linear slope:    beta1^S = beta1 + delta3 * sigma^2, beta0^S = beta0 + delta2 * sigma^2
* Poisson slope:   beta1^S = beta1 + delta3, beta0^S = beta0 + delta2
* logistic collider: log-OR bias as a function of all four deltas

The oracles compute the same quantities from the definitions (enumerating the
joint law of binary X, Y, S; summing a tilted Poisson pmf; integrating a
tilted normal density) and share no algebra with the closed forms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np
from scipy import integrate, special, stats

from .models import ColliderModel, NumericalError, OutcomeModel, ValidationError

SCALES = ("log_odds", "odds_ratio", "risk_ratio", "risk_ratio_difference", "linear_coef", "log_rate")
ENUMERATION_TOL = 1e-12
QUADRATURE_TOL = 1e-10
POISSON_TAIL_TOL = 1e-14
POISSON_MAX_TERMS = 10**7


@dataclass(frozen=True)
class BiasPrediction:
    scale: str
    value: float
    at_x: float | None = None

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ValidationError(f"unknown scale {self.scale!r}")
        if self.scale == "odds_ratio" and not self.value > 0:
            raise ValidationError("odds ratio must be positive")


def _softplus(t: float) -> float:
    """log(1 + e^t) without overflow."""
    return float(np.logaddexp(0.0, t))


# --- closed forms ------------------------------------------------------------

def or_bias_logadditive(delta3: float) -> float:
    """Multiplicative factor taking the unconditional OR to the conditional OR."""
    return math.exp(delta3)


def logistic_coef_bias(delta3: float) -> float:
    """Additive bias on the logistic slope: beta1^S - beta1."""
    return float(delta3)


def linear_coef_bias(delta2: float, delta3: float, sigma: float) -> tuple[float, float]:
    """(intercept bias, slope bias) of a linear outcome model under selection."""
    if not sigma > 0:
        raise ValidationError(f"sigma must be > 0, got {sigma}")
    s2 = sigma * sigma
    return delta2 * s2, delta3 * s2


def poisson_coef_bias(delta2: float, delta3: float) -> tuple[float, float]:
    """(intercept bias, slope bias) of a Poisson outcome model under selection."""
    return float(delta2), float(delta3)


def logistic_collider_or_bias(delta, x: float = 0.0) -> float:
    """log OR_{XY|S=1}(x) - log OR_{XY}(x) when ``logit P(S=1)`` is linear in X, Y, XY."""
    d0, d1, d2, d3 = (float(v) for v in delta)
    a0, a1 = d0 + d1 * x, d0 + d1 * (x + 1)
    # paired so that each difference is exactly 0 when d2 = d3 = 0
    return (d3
            + (_softplus(a1) - _softplus(a1 + d2 + d3 * (x + 1)))
            + (_softplus(a0 + d2 + d3 * x) - _softplus(a0)))


def _rr_parts(beta, delta, family: str, x: float):
    """Shared pieces of the risk-ratio closed forms.

    Returns ``(rr, rr_conditional, bias)`` where bias = rr - rr_conditional is
    assembled from expm1 terms so that the null cases give exactly 0.
    """
    b0, b1 = (float(v) for v in beta)
    _, _, d2, d3 = (float(v) for v in delta)
    eta0 = b0 + b1 * x
    eta1 = b0 + b1 * (x + 1)
    tilt = d2 + d3 * (x + 1)
    a = math.exp(tilt)
    a_m1 = math.expm1(tilt)
    one_minus_e3 = -math.expm1(d3)
    if family == "log_binomial":
        if eta0 > 0 or eta1 > 0:
            raise ValidationError(
                f"log-binomial probabilities exceed 1: beta0+beta1*x={eta0}, beta0+beta1*(x+1)={eta1}")
        p0, p1 = math.exp(eta0), math.exp(eta1)
        rr = math.exp(b1)
        num = a * p1 + math.exp(d3 + b1) * (1.0 - p0)
        den = a * p1 + (1.0 - p1)
        # den - (a p0 + e^{d3}(1 - p0)) rearranged
        diff = a_m1 * p0 * math.expm1(b1) + one_minus_e3 * (1.0 - p0)
        bias = rr * diff / den
        return rr, num / den, bias
    if family == "logistic":
        e0, e1 = math.exp(eta0), math.exp(eta1)
        rr = (math.exp(b1) + e1) / (1.0 + e1)
        ratio = ((1.0 + e1) / (1.0 + e0)) * ((a * e0 + math.exp(d3)) / (a * e1 + 1.0))
        rr_cond = rr * ratio
        # (1+e0)(a e1 + 1) - (1+e1)(a e0 + e^{d3}) rearranged
        diff = a_m1 * e0 * math.expm1(b1) + one_minus_e3 * (1.0 + e1)
        bias = rr * diff / ((1.0 + e0) * (a * e1 + 1.0))
        return rr, rr_cond, bias
    raise ValidationError(f"unknown outcome family {family!r}; expected 'log_binomial' or 'logistic'")


def rr_conditional(beta, delta, outcome_family: str, x: float = 0.0) -> float:
    """RR_{XY|S=1}(x) for a log-binomial or logistic outcome model."""
    return _rr_parts(beta, delta, outcome_family, x)[1]


def rr_unconditional(beta, outcome_family: str, x: float = 0.0) -> float:
    return _rr_parts(beta, (0.0, 0.0, 0.0, 0.0), outcome_family, x)[0]


def rr_bias(beta, delta, outcome_family: str, x: float = 0.0) -> float:
    """RR_{XY}(x) - RR_{XY|S=1}(x)."""
    return _rr_parts(beta, delta, outcome_family, x)[2]


def rr_relative_bias(beta, delta, outcome_family: str, x: float = 0.0) -> float:
    """1 - RR_{XY|S=1}(x) / RR_{XY}(x), the bias as a fraction of the unconditional RR."""
    rr, _, bias = _rr_parts(beta, delta, outcome_family, x)
    return bias / rr


# --- oracles -------------------------------------------------------------------

@dataclass(frozen=True)
class EnumerationResult:
    """Exact contrasts between x and x+1 from the enumerated joint law."""

    x: float
    or_unconditional: float
    or_conditional: float
    rr_unconditional: float
    rr_conditional: float

    @property
    def or_ratio(self) -> float:
        return self.or_conditional / self.or_unconditional

    @property
    def log_or_bias(self) -> float:
        return math.log(self.or_conditional) - math.log(self.or_unconditional)

    @property
    def rr_bias(self) -> float:
        return self.rr_unconditional - self.rr_conditional


def _p_outcome(beta0: float, beta1: float, family: str, x: float) -> float:
    eta = beta0 + beta1 * x
    if family == "logistic":
        return 1.0 / (1.0 + math.exp(-eta))
    if family == "log_binomial":
        return math.exp(eta)
    raise ValidationError(f"enumeration needs a binary outcome family, got {family!r}")


def enumerate_binary_oracle(outcome, collider: ColliderModel, x: float = 0.0,
                            family: str | None = None) -> EnumerationResult:
    """Compute OR and RR contrasts at ``x`` from P(Y=y | X) * P(S=1 | X, Y).

    ``outcome`` is an :class:`OutcomeModel` (logistic) or a ``(beta0, beta1)``
    pair together with ``family`` in {"logistic", "log_binomial"}.
    """
    if isinstance(outcome, OutcomeModel):
        if outcome.kind != "logistic":
            raise ValidationError("enumeration needs a binary (logistic) outcome model")
        beta0, beta1, family = outcome.beta0, outcome.slope, "logistic"
    else:
        beta0, beta1 = (float(v) for v in outcome)
        family = family or "logistic"

    # cell[(x', y)] = P(Y=y | X=x') and P(S=1 | X=x', Y=y)
    p_y1, p_s = {}, {}
    for xv in (x, x + 1.0):
        p = _p_outcome(beta0, beta1, family, xv)
        if not 0.0 <= p <= 1.0:
            raise ValidationError(f"P(Y=1 | X={xv}) = {p} is not a probability")
        p_y1[xv] = p
        for yv in (0.0, 1.0):
            ps = float(collider.selection_probability(xv, yv))
            if not 0.0 <= ps <= 1.0:
                raise ValidationError(f"P(S=1 | X={xv}, Y={yv}) = {ps} is not a probability")
            p_s[xv, yv] = ps

    def cond_p1(xv: float) -> float:
        j1 = p_y1[xv] * p_s[xv, 1.0]
        j0 = (1.0 - p_y1[xv]) * p_s[xv, 0.0]
        return j1 / (j1 + j0)

    def odds(p: float) -> float:
        return p / (1.0 - p)

    x1 = x + 1.0
    or_u = odds(p_y1[x1]) / odds(p_y1[x])
    q0, q1 = cond_p1(x), cond_p1(x1)
    or_c = odds(q1) / odds(q0)
    return EnumerationResult(x, or_u, or_c, p_y1[x1] / p_y1[x], q1 / q0)


def _check_logadditive(collider: ColliderModel):
    if collider.kind != "log_additive":
        raise ValidationError("oracle requires a log-additive collider")


def tilted_poisson_moments(outcome: OutcomeModel, collider: ColliderModel, x: float) -> tuple[float, float]:
    """First two moments of Y | X=x, S=1 by direct summation over y = 0..K."""
    if outcome.kind != "poisson":
        raise ValidationError("poisson_oracle requires a Poisson outcome model")
    _check_logadditive(collider)
    lam = math.exp(outcome.beta0 + outcome.slope * x)
    theta = lam * math.exp(collider.delta2 + collider.delta3 * x)
    lam_star = max(lam, theta)
    K = math.ceil(lam_star + 40.0 * math.sqrt(lam_star) + 50.0)
    if K > POISSON_MAX_TERMS:
        raise NumericalError(f"rate {lam_star:.3g} needs {K} terms, above the summation limit {POISSON_MAX_TERMS}")
    y = np.arange(K + 1, dtype=float)
    log_w = (collider.delta0 + collider.delta1 * x + collider.delta2 * y + collider.delta3 * x * y
             + stats.poisson.logpmf(y, lam))
    top = np.max(log_w)
    w = np.exp(log_w - top)
    total = math.fsum(w)
    # term ratios w(y+1)/w(y) = theta/(y+1) decrease, so the tail is geometric-bounded
    ratio = theta / (K + 2)
    next_term = math.exp(collider.delta0 + collider.delta1 * x
                         + (collider.delta2 + collider.delta3 * x) * (K + 1)
                         + float(stats.poisson.logpmf(K + 1, lam)) - top)
    tail = next_term / (1.0 - ratio) if ratio < 1 else math.inf
    if not tail <= POISSON_TAIL_TOL * total:
        raise NumericalError(f"truncation at K={K} leaves tail mass {tail / total:.3g}")
    m1 = math.fsum(y * w) / total
    m2 = math.fsum(y * y * w) / total
    return m1, m2


def poisson_oracle(outcome: OutcomeModel, collider: ColliderModel, x: float = 0.0) -> float:
    """E[Y | X=x, S=1] under a Poisson outcome and log-additive collider."""
    return tilted_poisson_moments(outcome, collider, x)[0]


def gauss_oracle(outcome: OutcomeModel, collider: ColliderModel, x: float = 0.0) -> float:
    """E[Y | X=x, S=1] under a linear-normal outcome and log-additive collider.

    Integrates y * P(S=1|x,y) * f(y|x) and P(S=1|x,y) * f(y|x) with adaptive
    quadrature; the window covers 12 sd around both the unconditional mean and
    the tilted one.
    """
    if outcome.kind != "linear":
        raise ValidationError("gauss_oracle requires a linear outcome model")
    _check_logadditive(collider)
    sigma = outcome.sigma
    m = outcome.beta0 + outcome.slope * x
    t = collider.delta2 + collider.delta3 * x
    shift = abs(t) * sigma * sigma
    lo, hi = -12.0 * sigma - shift, 12.0 * sigma + shift
    # constants exp(d0 + d1 x + t m) cancel between numerator and denominator
    def w(u: float) -> float:
        return math.exp(t * u - 0.5 * (u / sigma) ** 2)

    opts = dict(epsabs=1e-13, epsrel=1e-13, limit=500, full_output=1)
    num, _, *info_n = integrate.quad(lambda u: u * w(u), lo, hi, points=[0.0], **opts)
    den, _, *info_d = integrate.quad(w, lo, hi, points=[0.0], **opts)
    for info in (info_n, info_d):
        if len(info) > 1:
            raise NumericalError(f"quadrature did not converge: {info[1]}")
    return m + num / den


# --- equivalence grid -------------------------------------------------------

def _grid(values):
    return [round(v, 10) for v in values]


def oracle_grid() -> list[dict[str, Any]]:
    """Compare every closed form with its oracle over a parameter grid.

    Returns one row per check family with the number of points, the maximum
    absolute deviation and its tolerance.
    """
    rows = []

    def record(name, devs, tol):
        worst = max(devs) if devs else math.nan
        rows.append({"check": name, "points": len(devs), "max_abs_deviation": worst,
                     "tolerance": tol, "status": "PASS" if devs and worst < tol else "FAIL"})

    d_small = _grid(np.arange(-0.5, 0.51, 0.25))
    b0s, b1s = [-2.0, -1.0], _grid(np.arange(-0.3, 0.31, 0.15))

    or_devs, rr_lb, rr_lg = [], [], []
    for b0 in b0s:
        for b1 in b1s:
            for d2 in d_small:
                for d3 in d_small:
                    coll = ColliderModel.log_additive(-1.5, 0.3, d2, d3)
                    for fam, store in (("log_binomial", rr_lb), ("logistic", rr_lg)):
                        e = enumerate_binary_oracle((b0, b1), coll, 0.0, fam)
                        if fam == "logistic":
                            or_devs.append(abs(e.or_ratio - or_bias_logadditive(d3)))
                        store.append(abs(rr_conditional((b0, b1), coll.deltas, fam) - e.rr_conditional))
                        store.append(abs(rr_bias((b0, b1), coll.deltas, fam) - e.rr_bias))
    record("odds_ratio_factor", or_devs, ENUMERATION_TOL)
    record("risk_ratio_log_binomial", rr_lb, ENUMERATION_TOL)
    record("risk_ratio_logistic", rr_lg, ENUMERATION_TOL)

    lc = []
    for d0 in (-1.0, 0.0, 1.0):
        for d1 in (-0.3, 0.3):
            for d2 in d_small:
                for d3 in d_small:
                    coll = ColliderModel.logistic(d0, d1, d2, d3)
                    e = enumerate_binary_oracle((-0.5, 0.2), coll, 0.0, "logistic")
                    lc.append(abs(logistic_collider_or_bias(coll.deltas) - e.log_or_bias))
    record("logistic_collider_log_or", lc, ENUMERATION_TOL)

    lin, poi = [], []
    for b1 in (-0.2, -0.1, 0.0, 0.1, 0.2):
        for sigma in (0.5, 1.0):
            for d3 in d_small:
                out = OutcomeModel.linear(0.1, b1, sigma)
                coll = ColliderModel.log_additive(-1.0, 0.3, 0.3, d3)
                slope = gauss_oracle(out, coll, 1.0) - gauss_oracle(out, coll, 0.0)
                lin.append(abs(slope - (b1 + linear_coef_bias(0.3, d3, sigma)[1])))
        for d3 in d_small:
            out = OutcomeModel.poisson(0.0, b1)
            coll = ColliderModel.log_additive(-2.0, 0.3, 0.3, d3)
            for x in (0.0, 1.0):
                b0s_, b1s_ = poisson_coef_bias(0.3, d3)
                kappa = math.exp((0.0 + b0s_) + (b1 + b1s_) * x)
                poi.append(abs(poisson_oracle(out, coll, x) / kappa - 1.0))
    record("linear_slope", lin, QUADRATURE_TOL)
    record("poisson_mean_relative", poi, QUADRATURE_TOL)
    return rows


FORMULAS = ("or_bias", "logistic_coef_bias", "rr_conditional", "rr_bias", "linear_coef_bias",
            "poisson_coef_bias", "logistic_collider_or_bias")


def evaluate(params: Mapping[str, Any]) -> list[BiasPrediction]:
    """Evaluate a named formula from a parameter mapping (the ``analytic`` CLI)."""
    p = dict(params)
    name = p.get("formula")
    x = float(p.get("x", 0.0))

    def get(key):
        if key not in p:
            raise ValidationError(f"formula {name!r} requires parameter {key!r}")
        return p[key]

    def delta():
        d = get("delta")
        if len(d) != 4:
            raise ValidationError("delta must have four entries (delta0..delta3)")
        return [float(v) for v in d]

    if name == "or_bias":
        return [BiasPrediction("odds_ratio", or_bias_logadditive(float(get("delta3"))))]
    if name == "logistic_coef_bias":
        return [BiasPrediction("log_odds", logistic_coef_bias(float(get("delta3"))))]
    if name in ("rr_conditional", "rr_bias"):
        fn = rr_conditional if name == "rr_conditional" else rr_bias
        scale = "risk_ratio" if name == "rr_conditional" else "risk_ratio_difference"
        value = fn([float(v) for v in get("beta")], delta(), p.get("outcome_family", "log_binomial"), x)
        return [BiasPrediction(scale, value, x)]
    if name == "linear_coef_bias":
        b0, b1 = linear_coef_bias(float(get("delta2")), float(get("delta3")), float(get("sigma")))
        return [BiasPrediction("linear_coef", b0), BiasPrediction("linear_coef", b1)]
    if name == "poisson_coef_bias":
        b0, b1 = poisson_coef_bias(float(get("delta2")), float(get("delta3")))
        return [BiasPrediction("log_rate", b0), BiasPrediction("log_rate", b1)]
    if name == "logistic_collider_or_bias":
        return [BiasPrediction("log_odds", logistic_collider_or_bias(delta(), x), x)]
    raise ValidationError(f"unknown formula {name!r}; expected one of {FORMULAS}")
