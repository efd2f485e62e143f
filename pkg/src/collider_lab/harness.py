"""Asymptotic selection-bias experiments.

A cell of an experiment is (outcome model, collider model, delta3, selection
target). For each cell we simulate one large dataset, fit the outcome model on
the selected rows, fit the log-additive selection model on all rows, and
compare the slope bias with the fitted interaction.

Experiments:

``exp1``  binary exposure, 50% selected
``exp2``  binary exposure, 10/30/50/70/90% selected
``expC``  N(0, 1) exposure, 50% selected
``expN``  as ``expC`` with beta1 = delta2 = 0
"""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import glm
from .datagen import SeedSpec, calibrate_selection, gen_collider, gen_exposure, gen_outcome, quartile_thresholds
from .models import (BiasReport, ColliderModel, Dataset, ExposureSpec, NumericalError, OutcomeModel,
                     ValidationError, validate_scenario)

log = logging.getLogger(__name__)

EXPERIMENTS = ("exp1", "exp2", "expC", "expN")
DEFAULT_DELTA3_GRID = (-0.5, -0.4, -0.3, -0.2, -0.1, 0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
DEFAULT_TARGETS = {"exp1": (0.5,), "exp2": (0.1, 0.3, 0.5, 0.7, 0.9), "expC": (0.5,), "expN": (0.5,)}
OUTCOME_ORDER = ("logistic", "linear", "poisson")
COLLIDER_ORDER = ("logistic", "probit", "double_threshold")
OUTCOME_FAMILY = {"logistic": "binomial_logit", "linear": "gaussian_identity", "poisson": "poisson_log"}
MIN_SELECTED = 100

BETA0, BETA1, SIGMA = 0.0, 0.2, 0.5
DELTA1, DELTA2, LATENT_SD = 0.3, 0.3, 1.6


@dataclass(frozen=True)
class ScenarioParams:
    """Fixed parameters of the simulation design (reference defaults)."""

    beta0: float = BETA0
    beta1: float = BETA1
    sigma: float = SIGMA
    delta1: float = DELTA1
    delta2: float = DELTA2
    latent_sd: float = LATENT_SD

    def outcome(self, kind: str) -> OutcomeModel:
        if kind == "linear":
            return OutcomeModel.linear(self.beta0, self.beta1, self.sigma)
        if kind in ("logistic", "poisson"):
            return OutcomeModel(kind, self.beta0, self.beta1)
        raise ValidationError(f"unknown outcome kind {kind!r}")

    def collider(self, kind: str, delta3: float) -> ColliderModel:
        if kind == "logistic":
            return ColliderModel.logistic(0.0, self.delta1, self.delta2, delta3)
        if kind == "probit":
            return ColliderModel.probit(0.0, self.delta1, self.delta2, delta3, self.latent_sd)
        if kind == "double_threshold":
            lo, hi = quartile_thresholds(self.latent_sd)
            return ColliderModel.double_threshold(0.0, self.delta1, self.delta2, delta3, lo, hi, self.latent_sd)
        if kind == "log_additive":
            return ColliderModel.log_additive(-1.0, self.delta1, self.delta2, delta3)
        raise ValidationError(f"unknown collider kind {kind!r}")


@dataclass(frozen=True)
class ExperimentPlan:
    experiment: str
    n: int = 10**7
    delta3_grid: tuple[float, ...] = DEFAULT_DELTA3_GRID
    selection_targets: tuple[float, ...] | None = None
    seed: SeedSpec = SeedSpec(1)
    outcomes: tuple[str, ...] = OUTCOME_ORDER
    colliders: tuple[str, ...] = COLLIDER_ORDER

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValidationError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        if self.n < 10**4:
            raise ValidationError(f"n must be at least 10^4, got {self.n}")
        object.__setattr__(self, "delta3_grid", tuple(float(d) for d in self.delta3_grid))
        targets = self.selection_targets or DEFAULT_TARGETS[self.experiment]
        object.__setattr__(self, "selection_targets", tuple(float(t) for t in targets))
        if not self.delta3_grid or not self.selection_targets or not self.outcomes or not self.colliders:
            raise ValidationError("experiment grids must be non-empty")
        object.__setattr__(self, "outcomes", tuple(self.outcomes))
        object.__setattr__(self, "colliders", tuple(self.colliders))
        for kind in self.outcomes:
            if kind not in OUTCOME_FAMILY:
                raise ValidationError(f"unknown outcome kind {kind!r}; expected one of {OUTCOME_ORDER}")
        for kind in self.colliders:
            if kind not in (*COLLIDER_ORDER, "log_additive"):
                raise ValidationError(f"unknown collider kind {kind!r}; expected one of {COLLIDER_ORDER}")

    @property
    def exposure(self) -> ExposureSpec:
        if self.experiment in ("exp1", "exp2"):
            return ExposureSpec.bernoulli(0.3)
        return ExposureSpec.normal(0.0, 1.0)

    @property
    def params(self) -> ScenarioParams:
        if self.experiment == "expN":
            return ScenarioParams(beta1=0.0, delta2=0.0)
        return ScenarioParams()

    def cells(self) -> list[tuple[str, str, float, float]]:
        return [(o, c, d3, t) for o in self.outcomes for c in self.colliders
                for t in self.selection_targets for d3 in self.delta3_grid]

    def to_config(self) -> dict[str, Any]:
        return {"version": 1, "experiment": self.experiment, "n": self.n,
                "delta3_grid": list(self.delta3_grid), "selection_targets": list(self.selection_targets),
                "seed": self.seed.master_seed, "outcomes": list(self.outcomes),
                "colliders": list(self.colliders)}

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any]) -> "ExperimentPlan":
        if cfg.get("version", 1) != 1:
            raise ValidationError(f"unsupported config version {cfg.get('version')!r}")
        if "experiment" not in cfg:
            raise ValidationError("missing field 'experiment'")
        kw: dict[str, Any] = {"experiment": cfg["experiment"]}
        if "n" in cfg:
            kw["n"] = int(cfg["n"])
        for key in ("delta3_grid", "selection_targets", "outcomes", "colliders"):
            if cfg.get(key) is not None:
                kw[key] = tuple(cfg[key])
        if "seed" in cfg:
            kw["seed"] = SeedSpec(int(cfg["seed"]))
        return cls(**kw)


def scenario_id(experiment: str, outcome_kind: str, collider_kind: str, delta3: float, target: float) -> str:
    return f"{experiment}|{outcome_kind}|{collider_kind}|d3={delta3:+.3f}|p={target:.3f}"


def run_scenario(outcome_kind: str, collider_kind: str, delta3: float, selection_target: float,
                 exposure: ExposureSpec, n: int, seed: SeedSpec, *,
                 params: ScenarioParams | None = None, experiment: str = "custom",
                 control: glm.FitControl | None = None) -> BiasReport:
    """Simulate one cell and compare the observed slope bias with the fitted interaction."""
    params = params or ScenarioParams()
    outcome = params.outcome(outcome_kind)
    collider = params.collider(collider_kind, delta3)
    collider = calibrate_selection(collider, exposure, outcome, selection_target,
                                   master_seed=seed.master_seed)
    validate_scenario(exposure, outcome, collider)

    sid = scenario_id(experiment, outcome_kind, collider_kind, delta3, selection_target)
    cell_seed = seed.child(sid)
    x = gen_exposure(exposure, n, cell_seed.child("x"))
    y = gen_outcome(outcome, x, cell_seed.child("y"))
    s = gen_collider(collider, x, y, cell_seed.child("s"))
    data = Dataset({"x": x, "y": y, "s": s})
    n_selected = int(s.sum())
    if n_selected < MIN_SELECTED:
        raise NumericalError(f"{sid}: only {n_selected} selected rows")

    sel = data.selected()
    out_fit = glm.fit_glm(sel, glm.DesignSpec.of("1", "x"), OUTCOME_FAMILY[outcome_kind], control)
    la_fit = glm.fit_logadditive_selection(data, ["x"], "y", True, control)
    for name, f in (("outcome", out_fit), ("log-additive", la_fit)):
        if not f.converged:
            raise NumericalError(f"{sid}: {name} fit did not converge after {f.iterations} iterations")

    beta1_sel = out_fit.coef("x")
    bias = beta1_sel - params.beta1
    d3_hat = la_fit.coef("x:y")
    scale = params.sigma**2 if outcome_kind == "linear" else 1.0
    prediction = scale * d3_hat
    meta = {"n": n, "n_selected": n_selected, "delta0": collider.delta0}
    if collider.kind == "double_threshold":
        meta.update(r_lower=collider.r_lower, r_upper=collider.r_upper, tail_split="symmetric")
    return BiasReport(
        scenario_id=sid, experiment=experiment, outcome_kind=outcome_kind, collider_kind=collider_kind,
        delta3_true=float(delta3), selection_target=float(selection_target),
        selection_fraction=n_selected / n, beta1_full=params.beta1, beta1_selected=beta1_sel,
        observed_bias=bias, bias_mc_se=out_fit.se("x"), delta3_hat_logadd=d3_hat,
        delta3_hat_se=la_fit.se("x:y"), analytic_prediction=prediction, deviation=bias - prediction,
        metadata=meta)


@dataclass
class ExperimentResult:
    plan: ExperimentPlan
    reports: list[BiasReport]
    failures: list[tuple[str, str]] = field(default_factory=list)

    def summary(self) -> list[dict[str, Any]]:
        """Per (outcome, collider) block: cell counts and max |bias - prediction|."""
        rows = []
        failed = {sid for sid, _ in self.failures}
        for o in self.plan.outcomes:
            for c in self.plan.colliders:
                block = [r for r in self.reports if r.outcome_kind == o and r.collider_kind == c]
                n_fail = sum(1 for sid in failed if f"|{o}|{c}|" in sid)
                devs = [abs(r.deviation) for r in block]
                rows.append({"experiment": self.plan.experiment, "outcome": o, "collider": c,
                             "cells": len(block), "failures": n_fail,
                             "max_abs_deviation": max(devs) if devs else math.nan,
                             "max_abs_bias": max((abs(r.observed_bias) for r in block), default=math.nan)})
        return rows

    def max_abs_deviation(self) -> float:
        return max(abs(r.deviation) for r in self.reports)


def run_experiment(plan: ExperimentPlan, threads: int = 1,
                   control: glm.FitControl | None = None) -> ExperimentResult:
    """Run every cell of ``plan``; failures are recorded, not raised."""
    exposure, params = plan.exposure, plan.params

    def work(cell):
        o, c, d3, t = cell
        try:
            return run_scenario(o, c, d3, t, exposure, plan.n, plan.seed, params=params,
                                experiment=plan.experiment, control=control)
        except (NumericalError, ValidationError) as exc:
            sid = scenario_id(plan.experiment, o, c, d3, t)
            log.warning("cell %s failed: %s", sid, exc)
            return (sid, str(exc))

    cells = plan.cells()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(work, cells))
    else:
        outputs = [work(cell) for cell in cells]
    reports = [o for o in outputs if isinstance(o, BiasReport)]
    failures = [o for o in outputs if not isinstance(o, BiasReport)]
    return ExperimentResult(plan, reports, failures)


def bias_linearity(reports: Iterable[BiasReport]) -> tuple[float, float]:
    """OLS of observed bias on analytic prediction; returns (slope, intercept)."""
    pairs = np.array([(r.analytic_prediction, r.observed_bias) for r in reports])
    slope, intercept = np.polyfit(pairs[:, 0], pairs[:, 1], 1)
    return float(slope), float(intercept)


# --- CSV output ---------------------------------------------------------------

TRUE_COLUMNS = ["experiment", "outcome", "collider", "delta3_true", "selection_target",
                "realized_selection", "bias", "bias_mc_se"]
FITTED_COLUMNS = TRUE_COLUMNS + ["delta3_hat", "delta3_hat_se", "analytic_prediction", "deviation"]
SUMMARY_COLUMNS = ["experiment", "outcome", "collider", "cells", "failures", "max_abs_deviation", "max_abs_bias"]


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(v).lower()
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return "" if v is None else str(v)


def _table(columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def experiment_csvs(result: ExperimentResult) -> dict[str, str]:
    """Render ``bias_vs_true_delta3.csv``, ``bias_vs_fitted_delta3.csv`` and ``summary.csv``."""
    base = [[r.experiment, r.outcome_kind, r.collider_kind, r.delta3_true, r.selection_target,
             r.selection_fraction, r.observed_bias, r.bias_mc_se] for r in result.reports]
    fitted = [b + [r.delta3_hat_logadd, r.delta3_hat_se, r.analytic_prediction, r.deviation]
              for b, r in zip(base, result.reports)]
    summary = [[row[c] for c in SUMMARY_COLUMNS] for row in result.summary()]
    return {"bias_vs_true_delta3.csv": _table(TRUE_COLUMNS, base),
            "bias_vs_fitted_delta3.csv": _table(FITTED_COLUMNS, fitted),
            "summary.csv": _table(SUMMARY_COLUMNS, summary)}
