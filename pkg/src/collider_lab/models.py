"""Domain types shared by generation, fitting, analytics and the study harness.

The three generative pieces are

* :class:`ExposureSpec`  -- distribution of the exposure ``X``;
* :class:`OutcomeModel`  -- law of ``Y | X`` (logistic, linear or Poisson);
* :class:`ColliderModel` -- law of the selection indicator ``S | X, Y``.

All of them are frozen dataclasses and can be round-tripped through plain
dicts (the scenario config file format).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from scipy import special

CONFIG_VERSION = 1

EXPOSURE_KINDS = ("bernoulli", "normal")
OUTCOME_KINDS = ("logistic", "linear", "poisson")
COLLIDER_KINDS = ("log_additive", "logistic", "probit", "double_threshold")


class ValidationError(ValueError):
    """Invalid parameters, inputs or configuration."""


class NumericalError(RuntimeError):
    """A numerical procedure failed (overflow, singular system, bracket failure)."""


@dataclass(frozen=True)
class ExposureSpec:
    kind: str
    p: float | None = None
    mean: float = 0.0
    sd: float = 1.0

    def __post_init__(self):
        if self.kind not in EXPOSURE_KINDS:
            raise ValidationError(f"unknown exposure kind {self.kind!r}")
        if self.kind == "bernoulli":
            if self.p is None or not 0.0 < self.p < 1.0:
                raise ValidationError(f"Bernoulli p must lie in (0, 1), got {self.p}")
        else:
            if not (math.isfinite(self.mean) and math.isfinite(self.sd)) or self.sd <= 0:
                raise ValidationError(f"invalid sd {self.sd}: Normal sd must be > 0")

    @classmethod
    def bernoulli(cls, p: float) -> "ExposureSpec":
        return cls("bernoulli", p=p)

    @classmethod
    def normal(cls, mean: float = 0.0, sd: float = 1.0) -> "ExposureSpec":
        return cls("normal", mean=mean, sd=sd)

    @property
    def support(self) -> tuple[float, float]:
        """Closed hull of the support, possibly infinite."""
        if self.kind == "bernoulli":
            return (0.0, 1.0)
        return (-math.inf, math.inf)

    def to_dict(self) -> dict[str, Any]:
        if self.kind == "bernoulli":
            return {"kind": "bernoulli", "p": self.p}
        return {"kind": "normal", "mean": self.mean, "sd": self.sd}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExposureSpec":
        d = dict(d)
        kind = d.pop("kind", None)
        if kind == "bernoulli":
            return cls.bernoulli(float(_require(d, "p", "exposure")))
        if kind == "normal":
            return cls.normal(float(d.get("mean", 0.0)), float(d.get("sd", 1.0)))
        raise ValidationError(f"exposure.kind must be one of {EXPOSURE_KINDS}, got {kind!r}")


@dataclass(frozen=True)
class OutcomeModel:
    """Generative law of ``Y | X``.

    ``beta1`` holds one slope per exposure column; a scalar is accepted and
    stored as a 1-tuple.
    """

    kind: str
    beta0: float
    beta1: tuple[float, ...]
    sigma: float | None = None

    def __post_init__(self):
        if self.kind not in OUTCOME_KINDS:
            raise ValidationError(f"unknown outcome kind {self.kind!r}")
        b1 = self.beta1
        if np.isscalar(b1):
            b1 = (float(b1),)
        b1 = tuple(float(b) for b in b1)
        if not b1:
            raise ValidationError("beta1 must have at least one slope")
        object.__setattr__(self, "beta1", b1)
        if self.kind == "linear":
            if self.sigma is None or not self.sigma > 0 or not math.isfinite(self.sigma):
                raise ValidationError(f"Linear outcome requires sigma > 0, got {self.sigma}")
        elif self.sigma is not None:
            raise ValidationError(f"sigma is only meaningful for a linear outcome, got {self.sigma}")

    @classmethod
    def logistic(cls, beta0: float, beta1) -> "OutcomeModel":
        return cls("logistic", beta0, beta1)

    @classmethod
    def linear(cls, beta0: float, beta1, sigma: float) -> "OutcomeModel":
        return cls("linear", beta0, beta1, sigma)

    @classmethod
    def poisson(cls, beta0: float, beta1) -> "OutcomeModel":
        return cls("poisson", beta0, beta1)

    @property
    def slope(self) -> float:
        """The single slope of a univariate model."""
        if len(self.beta1) != 1:
            raise ValidationError("model has more than one slope")
        return self.beta1[0]

    @property
    def support(self) -> tuple[float, float]:
        if self.kind == "logistic":
            return (0.0, 1.0)
        if self.kind == "poisson":
            return (0.0, math.inf)
        return (-math.inf, math.inf)

    def linear_predictor(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        b = np.asarray(self.beta1)
        if x.ndim == 1:
            if b.size != 1:
                raise ValidationError(f"beta1 has {b.size} slopes but x is one column")
            return self.beta0 + b[0] * x
        if x.shape[1] != b.size:
            raise ValidationError(f"beta1 has {b.size} slopes but x has {x.shape[1]} columns")
        return self.beta0 + x @ b

    def mean(self, x) -> np.ndarray:
        eta = self.linear_predictor(x)
        if self.kind == "logistic":
            return special.expit(eta)
        if self.kind == "poisson":
            return np.exp(eta)
        return eta

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind, "beta0": self.beta0, "beta1": list(self.beta1)}
        if self.kind == "linear":
            d["sigma"] = self.sigma
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "OutcomeModel":
        kind = d.get("kind")
        if kind not in OUTCOME_KINDS:
            raise ValidationError(f"outcome.kind must be one of {OUTCOME_KINDS}, got {kind!r}")
        beta1 = _require(d, "beta1", "outcome")
        sigma = d.get("sigma")
        return cls(kind, float(_require(d, "beta0", "outcome")),
                   beta1 if isinstance(beta1, (list, tuple)) else float(beta1),
                   None if sigma is None else float(sigma))


@dataclass(frozen=True)
class ColliderModel:
    """Generative law of the selection indicator ``S``.

    The linear index is ``delta0 + delta1*x + delta2*y + delta3*x*y``; ``kind``
    decides how it maps to ``P(S = 1 | x, y)``:

    ``log_additive``      exp(index)
    ``logistic``          expit(index)
    ``probit``            S = 1{S' > 0},  S' ~ N(index, latent_sd**2)
    ``double_threshold``  S = 1{S' < r_lower or S' > r_upper}
    """

    kind: str
    delta0: float
    delta1: float
    delta2: float
    delta3: float
    latent_sd: float | None = None
    r_lower: float | None = None
    r_upper: float | None = None

    def __post_init__(self):
        if self.kind not in COLLIDER_KINDS:
            raise ValidationError(f"unknown collider kind {self.kind!r}")
        for name in ("delta0", "delta1", "delta2", "delta3"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"{name} must be finite")
        if self.kind in ("probit", "double_threshold"):
            if self.latent_sd is None or not self.latent_sd > 0:
                raise ValidationError(f"latent_sd must be > 0, got {self.latent_sd}")
        if self.kind == "double_threshold":
            if self.r_lower is None or self.r_upper is None or not self.r_lower < self.r_upper:
                raise ValidationError(
                    f"double threshold requires r_lower < r_upper, got {self.r_lower}, {self.r_upper}")

    @classmethod
    def log_additive(cls, d0, d1, d2, d3) -> "ColliderModel":
        return cls("log_additive", d0, d1, d2, d3)

    @classmethod
    def logistic(cls, d0, d1, d2, d3) -> "ColliderModel":
        return cls("logistic", d0, d1, d2, d3)

    @classmethod
    def probit(cls, d0, d1, d2, d3, latent_sd=1.6) -> "ColliderModel":
        return cls("probit", d0, d1, d2, d3, latent_sd=latent_sd)

    @classmethod
    def double_threshold(cls, d0, d1, d2, d3, r_lower, r_upper, latent_sd=1.6) -> "ColliderModel":
        return cls("double_threshold", d0, d1, d2, d3, latent_sd=latent_sd,
                   r_lower=r_lower, r_upper=r_upper)

    @property
    def deltas(self) -> tuple[float, float, float, float]:
        return (self.delta0, self.delta1, self.delta2, self.delta3)

    def replace(self, **changes) -> "ColliderModel":
        d = {k: getattr(self, k) for k in
             ("kind", "delta0", "delta1", "delta2", "delta3", "latent_sd", "r_lower", "r_upper")}
        d.update(changes)
        return ColliderModel(**d)

    def index(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return self.delta0 + self.delta1 * x + self.delta2 * y + self.delta3 * x * y

    def selection_probability(self, x, y) -> np.ndarray:
        """``P(S = 1 | x, y)``; log-additive values above 1 are returned as-is."""
        eta = self.index(x, y)
        if self.kind == "log_additive":
            return np.exp(eta)
        if self.kind == "logistic":
            return special.expit(eta)
        if self.kind == "probit":
            return special.ndtr(eta / self.latent_sd)
        lo = special.ndtr((self.r_lower - eta) / self.latent_sd)
        hi = special.ndtr((eta - self.r_upper) / self.latent_sd)
        return lo + hi

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind, "delta0": self.delta0, "delta1": self.delta1,
                             "delta2": self.delta2, "delta3": self.delta3}
        if self.kind in ("probit", "double_threshold"):
            d["latent_sd"] = self.latent_sd
        if self.kind == "double_threshold":
            d["r_lower"] = self.r_lower
            d["r_upper"] = self.r_upper
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ColliderModel":
        kind = d.get("kind")
        if kind not in COLLIDER_KINDS:
            raise ValidationError(f"collider.kind must be one of {COLLIDER_KINDS}, got {kind!r}")
        kw = {k: float(_require(d, k, "collider")) for k in ("delta0", "delta1", "delta2", "delta3")}
        for k in ("latent_sd", "r_lower", "r_upper"):
            if d.get(k) is not None:
                kw[k] = float(d[k])
        return cls(kind, **kw)


def _require(d: Mapping[str, Any], key: str, where: str):
    if key not in d:
        raise ValidationError(f"missing field {where}.{key}")
    return d[key]


def _linear_sup(a: float, b: float, lo: float, hi: float) -> tuple[float, float]:
    """sup of ``a + b*t`` over ``t`` in ``[lo, hi]``; returns (value, argmax)."""
    if b > 0:
        return (math.inf, hi) if math.isinf(hi) else (a + b * hi, hi)
    if b < 0:
        return (math.inf, lo) if math.isinf(lo) else (a + b * lo, lo)
    t = lo if math.isfinite(lo) else (hi if math.isfinite(hi) else 0.0)
    return a, t


def logadditive_support_max(collider: ColliderModel, x_support, y_support) -> tuple[float, tuple[float, float]]:
    """Supremum of the log-additive index over a rectangular support.

    The index is bilinear in (x, y), so for a bounded x-range the supremum sits
    at an x endpoint; unbounded x-ranges force the x-coefficient to vanish.
    Returns the supremum and the (x, y) point attaining it (coordinates may be
    infinite when the index is unbounded).
    """
    d0, d1, d2, d3 = collider.deltas
    xl, xu = x_support
    yl, yu = y_support
    best = (-math.inf, (xl, yl))
    if math.isinf(xl) or math.isinf(xu):
        # coefficient of x is d1 + d3*y; it must be 0 for every y in the support
        if yl == yu:
            slope_zero = d1 + d3 * yl == 0
        else:
            slope_zero = d1 == 0 and d3 == 0
        if not slope_zero:
            bad_y = yl if math.isfinite(yl) else (yu if math.isfinite(yu) else 0.0)
            for y in (yl, yu):
                if math.isfinite(y) and d1 + d3 * y != 0:
                    bad_y = y
                    break
            c = d1 + d3 * bad_y
            return math.inf, ((math.inf if c > 0 else -math.inf), bad_y)
        value, y = _linear_sup(d0, d2, yl, yu)
        return value, (0.0, y)
    for x in (xl, xu):
        value, y = _linear_sup(d0 + d1 * x, d2 + d3 * x, yl, yu)
        if value > best[0]:
            best = (value, (x, y))
    return best


@dataclass(frozen=True)
class Scenario:
    exposure: ExposureSpec
    outcome: OutcomeModel
    collider: ColliderModel

    def to_config(self) -> dict[str, Any]:
        return {"version": CONFIG_VERSION, "exposure": self.exposure.to_dict(),
                "outcome": self.outcome.to_dict(), "collider": self.collider.to_dict()}

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any]) -> "Scenario":
        if not isinstance(cfg, Mapping):
            raise ValidationError("scenario config must be a JSON object")
        version = cfg.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ValidationError(f"unsupported config version {version!r}")
        for key in ("exposure", "outcome", "collider"):
            if not isinstance(cfg.get(key), Mapping):
                raise ValidationError(f"missing or malformed field {key!r}")
        return validate_scenario(ExposureSpec.from_dict(cfg["exposure"]),
                                 OutcomeModel.from_dict(cfg["outcome"]),
                                 ColliderModel.from_dict(cfg["collider"]))


def validate_scenario(exposure: ExposureSpec, outcome: OutcomeModel, collider: ColliderModel) -> Scenario:
    """Check cross-type constraints and return an immutable :class:`Scenario`.

    Per-type invariants are enforced by the constructors; here we check that
    the single generated exposure column matches the outcome slopes and that a
    log-additive collider keeps ``P(S = 1) <= 1`` over the declared support.
    """
    if len(outcome.beta1) != 1:
        raise ValidationError(
            f"dimension mismatch: one exposure column but {len(outcome.beta1)} outcome slopes")
    if collider.kind == "log_additive":
        top, (x, y) = logadditive_support_max(collider, exposure.support, outcome.support)
        if top > 0:
            raise ValidationError(
                f"log-additive selection probability exceeds 1 at (x={x}, y={y}): "
                f"log P(S=1) = {top}")
    return Scenario(exposure, outcome, collider)


@dataclass(frozen=True)
class Dataset:
    """Columnar table with exposure/outcome/selection roles.

    Columns are stored as read-only float arrays.
    """

    columns: Mapping[str, np.ndarray]
    exposure: tuple[str, ...] = ("x",)
    outcome: str = "y"
    selection: str = "s"

    def __post_init__(self):
        cols = {}
        n = None
        for name, v in self.columns.items():
            a = np.array(v, dtype=float)
            if a.ndim != 1:
                raise ValidationError(f"column {name!r} is not one-dimensional")
            if n is None:
                n = a.size
            elif a.size != n:
                raise ValidationError(f"column {name!r} has length {a.size}, expected {n}")
            a.setflags(write=False)
            cols[name] = a
        object.__setattr__(self, "columns", cols)
        exposure = (self.exposure,) if isinstance(self.exposure, str) else tuple(self.exposure)
        object.__setattr__(self, "exposure", exposure)
        for role in (*exposure, self.outcome, self.selection):
            if role not in cols:
                raise ValidationError(f"role column {role!r} not in dataset")
        s = cols[self.selection]
        if not np.all((s == 0) | (s == 1)):
            raise ValidationError(f"selection column {self.selection!r} must contain only 0 and 1")

    @property
    def n(self) -> int:
        return next(iter(self.columns.values())).size

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise ValidationError(f"column {name!r} not in dataset") from None

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        return Dataset({k: v[mask] for k, v in self.columns.items()},
                       self.exposure, self.outcome, self.selection)

    def selected(self) -> "Dataset":
        return self.subset(self.columns[self.selection] == 1)

    def check_outcome_domain(self, family_domain: str, column: str | None = None) -> None:
        """``family_domain`` is one of ``binary``, ``count``, ``real``."""
        check_domain(self[column or self.outcome], family_domain, column or self.outcome)


def check_domain(y: np.ndarray, domain: str, name: str = "response") -> None:
    if not np.all(np.isfinite(y)):
        raise ValidationError(f"{name} contains non-finite values")
    if domain == "binary" and not np.all((y == 0) | (y == 1)):
        raise ValidationError(f"{name} must contain only 0 and 1")
    if domain == "count" and not np.all((y >= 0) & (y == np.floor(y))):
        raise ValidationError(f"{name} must contain only non-negative integers")


@dataclass(frozen=True)
class BiasReport:
    """Outcome of one simulated scenario cell."""

    scenario_id: str
    experiment: str
    outcome_kind: str
    collider_kind: str
    delta3_true: float
    selection_target: float
    selection_fraction: float
    beta1_full: float
    beta1_selected: float
    observed_bias: float
    bias_mc_se: float
    delta3_hat_logadd: float
    delta3_hat_se: float
    analytic_prediction: float | None
    deviation: float | None
    metadata: Mapping[str, Any] = field(default_factory=dict)
