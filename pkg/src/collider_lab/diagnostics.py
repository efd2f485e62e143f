"""Selection-bias diagnostic for user-supplied tabular data.

For each exposure the outcome model is fitted on all rows and on the selected
rows; the difference of the exposure slopes is the observed bias. A
log-additive selection model with exposure-by-outcome interactions is fitted
on all rows and its interaction estimates are reported as predictors of that
bias (scaled by the residual variance for Gaussian outcomes). A logistic
selection model without interactions is fitted for comparison.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import glm
from .models import CONFIG_VERSION, Dataset, NumericalError, ValidationError, check_domain

MODES = ("marginal", "joint")
COVERAGE_Z = 1.96
DROP_NOTE = ("incomplete rows were dropped; missingness related to exposure and outcome "
             "is itself a possible source of selection bias")


@dataclass(frozen=True)
class DiagnosticConfig:
    outcome_col: str
    outcome_family: str
    exposure_cols: tuple[str, ...]
    selection_col: str
    mode: str = "marginal"
    drop_incomplete_rows: bool = False

    def __post_init__(self):
        cols = (self.exposure_cols,) if isinstance(self.exposure_cols, str) else tuple(self.exposure_cols)
        object.__setattr__(self, "exposure_cols", cols)
        if not cols:
            raise ValidationError("at least one exposure column is required")
        if len(set(cols)) != len(cols):
            raise ValidationError(f"duplicate exposure columns: {cols}")
        if self.outcome_family not in glm.FAMILIES:
            raise ValidationError(f"unknown outcome_family {self.outcome_family!r}; expected one of {glm.FAMILIES}")
        if self.mode not in MODES:
            raise ValidationError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        roles = {self.outcome_col, self.selection_col}
        if len(roles) < 2 or roles & set(cols):
            raise ValidationError("outcome, selection and exposure columns must be distinct")

    @property
    def used_columns(self) -> tuple[str, ...]:
        return (*self.exposure_cols, self.outcome_col, self.selection_col)

    def to_config(self) -> dict[str, Any]:
        d = asdict(self)
        d["exposure_cols"] = list(self.exposure_cols)
        return {"version": CONFIG_VERSION, **d}

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any]) -> "DiagnosticConfig":
        if cfg.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ValidationError(f"unsupported config version {cfg.get('version')!r}")
        names = {f.name for f in fields(cls)}
        unknown = set(cfg) - names - {"version"}
        if unknown:
            raise ValidationError(f"unknown diagnostic config fields: {sorted(unknown)}")
        for key in ("outcome_col", "outcome_family", "exposure_cols", "selection_col"):
            if key not in cfg:
                raise ValidationError(f"missing field {key!r}")
        kw = {k: v for k, v in cfg.items() if k in names}
        kw["exposure_cols"] = tuple(kw["exposure_cols"]) if not isinstance(kw["exposure_cols"], str) \
            else (kw["exposure_cols"],)
        return cls(**kw)


@dataclass(frozen=True)
class TermDiagnostic:
    """Bias and its log-additive predictor for one exposure.

    Unavailable quantities are NaN; ``covered`` is None when it cannot be
    evaluated. ``error`` holds the message of any fit that failed.
    """

    exposure: str
    beta_full: float = math.nan
    se_full: float = math.nan
    beta_selected: float = math.nan
    se_selected: float = math.nan
    observed_bias: float = math.nan
    delta3_hat: float = math.nan
    delta3_hat_se: float = math.nan
    prediction_scale_factor: float = 1.0
    covered: bool | None = None
    error: str = ""

    @property
    def prediction(self) -> float:
        return self.prediction_scale_factor * self.delta3_hat

    @property
    def combined_se(self) -> float:
        return math.hypot(self.se_selected, self.se_full)

    def recompute_covered(self) -> bool | None:
        return coverage(self.observed_bias, self.prediction, self.combined_se)


def coverage(bias: float, prediction: float, combined_se: float) -> bool | None:
    if not all(math.isfinite(v) for v in (bias, prediction, combined_se)):
        return None
    return abs(bias - prediction) <= COVERAGE_Z * combined_se


@dataclass(frozen=True)
class CoefRow:
    model: str
    term: str
    estimate: float
    std_error: float


@dataclass(frozen=True)
class DiagnosticReport:
    config: DiagnosticConfig
    terms: tuple[TermDiagnostic, ...]
    participation: tuple[CoefRow, ...]
    n_rows: int
    n_selected: int
    rows_dropped: int = 0
    notes: tuple[str, ...] = field(default_factory=tuple)

    def term(self, exposure: str) -> TermDiagnostic:
        for t in self.terms:
            if t.exposure == exposure:
                return t
        raise KeyError(exposure)

    # -- serialization --------------------------------------------------------

    def to_json(self) -> str:
        d = {"config": self.config.to_config(),
             "terms": [asdict(t) for t in self.terms],
             "participation": [asdict(r) for r in self.participation],
             "n_rows": self.n_rows, "n_selected": self.n_selected, "rows_dropped": self.rows_dropped,
             "notes": list(self.notes)}
        return json.dumps(_json_safe(d), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DiagnosticReport":
        d = _json_restore(json.loads(text))
        return cls(DiagnosticConfig.from_config(d["config"]),
                   tuple(TermDiagnostic(**t) for t in d["terms"]),
                   tuple(CoefRow(**r) for r in d["participation"]),
                   d["n_rows"], d["n_selected"], d["rows_dropped"], tuple(d["notes"]))

    def terms_csv(self) -> str:
        return _csv([f.name for f in fields(TermDiagnostic)], [astuple_row(t) for t in self.terms])

    def participation_csv(self) -> str:
        return _csv([f.name for f in fields(CoefRow)], [astuple_row(r) for r in self.participation])

    def to_text(self) -> str:
        """Human-readable summary table."""
        head = (f"{'exposure':<16}{'beta_full':>11}{'beta_sel':>11}{'bias':>11}"
                f"{'pred':>11}{'d3_hat':>11}{'d3_se':>10}  covered")
        lines = [f"rows: {self.n_rows}  selected: {self.n_selected}  dropped: {self.rows_dropped}  "
                 f"mode: {self.config.mode}  family: {self.config.outcome_family}", head]
        for t in self.terms:
            cov = "n/a" if t.covered is None else ("yes" if t.covered else "no")
            lines.append(f"{t.exposure:<16}{t.beta_full:>11.4f}{t.beta_selected:>11.4f}{t.observed_bias:>11.4f}"
                         f"{t.prediction:>11.4f}{t.delta3_hat:>11.4f}{t.delta3_hat_se:>10.4f}  {cov}"
                         + (f"  [{t.error}]" if t.error else ""))
        if self.participation:
            lines.append("")
            lines.append("logistic selection model (no interactions)")
            for r in self.participation:
                lines.append(f"  {r.model:<14}{r.term:<16}{r.estimate:>11.4f}{r.std_error:>10.4f}")
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines) + "\n"


def astuple_row(obj) -> list[Any]:
    return [getattr(obj, f.name) for f in fields(obj)]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.17g}"
    return str(v)


def _csv(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def terms_from_csv(text: str) -> tuple[TermDiagnostic, ...]:
    """Inverse of :meth:`DiagnosticReport.terms_csv`."""
    types = {f.name: f.type for f in fields(TermDiagnostic)}
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        kw: dict[str, Any] = {}
        for k, v in row.items():
            if k in ("exposure", "error"):
                kw[k] = v
            elif k == "covered":
                kw[k] = None if v == "" else v == "true"
            elif k in types:
                kw[k] = math.nan if v == "" else float(v)
        out.append(TermDiagnostic(**kw))
    return tuple(out)


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return {"__float__": repr(obj)}
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _json_restore(obj):
    if isinstance(obj, dict):
        if set(obj) == {"__float__"}:
            return float(obj["__float__"])
        return {k: _json_restore(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_restore(v) for v in obj]
    return obj


# --- input -------------------------------------------------------------------

def read_csv_columns(source: str | Path | io.TextIOBase) -> dict[str, np.ndarray]:
    """Read a headed numeric CSV; empty fields become NaN."""
    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            return read_csv_columns(fh)
    reader = csv.reader(source)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ValidationError("CSV input is empty") from None
    if len(set(header)) != len(header):
        raise ValidationError(f"duplicate column names in CSV header: {header}")
    values: list[list[float]] = [[] for _ in header]
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ValidationError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        for j, cell in enumerate(row):
            cell = cell.strip()
            try:
                values[j].append(float(cell) if cell else math.nan)
            except ValueError:
                raise ValidationError(f"line {lineno}, column {header[j]!r}: not a number: {cell!r}") from None
    return {h: np.array(v, dtype=float) for h, v in zip(header, values)}


# --- the diagnostic ----------------------------------------------------------

_DOMAIN = {"gaussian_identity": "real", "binomial_logit": "binary", "binomial_probit": "binary",
           "binomial_log": "binary", "poisson_log": "count"}


def _prepare(data, config: DiagnosticConfig) -> tuple[Dataset, int]:
    columns = data.columns if isinstance(data, Dataset) else data
    missing = [c for c in config.used_columns if c not in columns]
    if missing:
        raise ValidationError(f"columns not in data: {missing}")
    cols = {c: np.asarray(columns[c], dtype=float) for c in config.used_columns}
    complete = np.all([np.isfinite(v) for v in cols.values()], axis=0)
    dropped = int(complete.size - complete.sum())
    if dropped:
        if not config.drop_incomplete_rows:
            bad = [c for c, v in cols.items() if not np.all(np.isfinite(v))]
            raise ValidationError(f"{dropped} incomplete rows (columns {bad}); set drop_incomplete_rows to drop them")
        cols = {c: v[complete] for c, v in cols.items()}
    ds = Dataset(cols, config.exposure_cols, config.outcome_col, config.selection_col)
    check_domain(ds[config.outcome_col], _DOMAIN[config.outcome_family], config.outcome_col)
    return ds, dropped


def _fit(data: Dataset, design: glm.DesignSpec, family: str, response: str,
         control: glm.FitControl | None) -> glm.GlmFit:
    fit = glm.fit_glm(data, design, family, control, response=response)
    if not fit.converged:
        raise NumericalError(f"{family} fit of {response} ~ {' + '.join(design.names)} "
                             f"did not converge in {fit.iterations} iterations")
    return fit


def _try_fit(*args):
    try:
        return _fit(*args), ""
    except (NumericalError, ValidationError) as exc:
        return None, str(exc)


def run_diagnostic(data: Dataset | Mapping[str, Any], config: DiagnosticConfig,
                   control: glm.FitControl | None = None) -> DiagnosticReport:
    """Compare full-sample and selected-sample fits against log-additive interactions.

    Fit failures are reported per term rather than raised.
    """
    ds, dropped = _prepare(data, config)
    s = ds[config.selection_col]
    n_sel = int(s.sum())
    if n_sel == 0:
        raise ValidationError("no selected rows: the selected-sample fit cannot run")
    all_selected = n_sel == ds.n
    sel = ds if all_selected else ds.selected()
    y, fam = config.outcome_col, config.outcome_family
    notes = [DROP_NOTE] if dropped else []
    if all_selected:
        notes.append("every row is selected: full and selected samples coincide")

    groups = ([(e,) for e in config.exposure_cols] if config.mode == "marginal"
              else [config.exposure_cols])
    terms: list[TermDiagnostic] = []
    participation: list[CoefRow] = []
    for exposures in groups:
        label = exposures[0] if config.mode == "marginal" else "joint"
        design = glm.DesignSpec((glm.INTERCEPT, *exposures))
        full_fit, full_err = _try_fit(ds, design, fam, y, control)
        if all_selected:
            sel_fit, sel_err = full_fit, full_err
        else:
            sel_fit, sel_err = _try_fit(sel, design, fam, y, control)
        la_design = glm.logadditive_design(exposures, y, True)
        la_fit, la_err = _try_fit(ds, la_design, "binomial_log", config.selection_col, control)
        scale = sel_fit.dispersion if (sel_fit is not None and fam == "gaussian_identity") else 1.0

        for e in exposures:
            kw: dict[str, Any] = {"exposure": e, "prediction_scale_factor": float(scale)}
            if full_fit is not None:
                kw.update(beta_full=full_fit.coef(e), se_full=full_fit.se(e))
            if sel_fit is not None:
                kw.update(beta_selected=sel_fit.coef(e), se_selected=sel_fit.se(e))
            if full_fit is not None and sel_fit is not None:
                kw["observed_bias"] = 0.0 if all_selected else kw["beta_selected"] - kw["beta_full"]
            if la_fit is not None:
                kw.update(delta3_hat=la_fit.coef(f"{e}:{y}"), delta3_hat_se=la_fit.se(f"{e}:{y}"))
            errors = [f"{what}: {msg}" for what, msg in
                      (("full-sample fit", full_err), ("selected-sample fit", sel_err),
                       ("log-additive selection fit", la_err)) if msg]
            kw["error"] = "; ".join(dict.fromkeys(errors))
            t = TermDiagnostic(**kw)
            terms.append(TermDiagnostic(**{**kw, "covered": t.recompute_covered()}))

        lg_design = glm.DesignSpec((glm.INTERCEPT, *exposures, y))
        lg_fit, lg_err = _try_fit(ds, lg_design, "binomial_logit", config.selection_col, control)
        if lg_fit is None:
            notes.append(f"logistic selection model ({label}) failed: {lg_err}")
        else:
            participation.extend(CoefRow(label, t, b, se)
                                 for t, (b, se) in lg_fit.as_dict().items())
    return DiagnosticReport(config, tuple(terms), tuple(participation), ds.n, n_sel, dropped, tuple(notes))
