"""Command-line front end.

Subcommands::

    simulate    draw a dataset from a scenario config        -> dataset.csv
    fit         fit a GLM to a CSV file                      -> fit_summary.csv
    analytic    evaluate a closed-form bias formula          -> analytic.csv
    experiment  run a simulation experiment                  -> bias_vs_*.csv, summary.csv
    oracle      closed forms vs exact oracles                -> oracle.csv
    diagnose    selection-bias diagnostic on a CSV file      -> diagnostic_*.csv, .json, .txt

Exit status: 0 on success, 1 on invalid input, 2 on numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Any, Callable, Mapping

from . import analytic, diagnostics, glm, harness
from .datagen import SeedSpec, calibrate_selection, simulate
from .harness import fmt
from .models import CONFIG_VERSION, NumericalError, Scenario, ValidationError, validate_scenario

log = logging.getLogger("collider_lab")

THREADS_ENV = "COLLIDER_LAB_THREADS"
EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2
DEFAULT_SIM_N = 10**5


class CliError(Exception):
    def __init__(self, message: str, status: int):
        super().__init__(message)
        self.status = status


# --- io helpers --------------------------------------------------------------

def load_config(path: str | None) -> dict[str, Any]:
    if path is None:
        raise ValidationError("--config is required for this subcommand")
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    version = cfg.get("version")
    if version is None:
        raise ValidationError(f"{path}: missing field 'version'")
    if version != CONFIG_VERSION:
        raise ValidationError(f"{path}: unsupported version {version!r} (expected {CONFIG_VERSION})")
    return cfg


def write_outputs(out_dir: str | Path, files: Mapping[str, str]) -> list[Path]:
    """Write every file to a temporary name first, then rename all of them."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    staged = []
    try:
        for name, text in files.items():
            fd, tmp = tempfile.mkstemp(dir=out, prefix=f".{name}.", suffix=".tmp")
            staged.append((Path(tmp), out / name))
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
    except BaseException:
        for tmp, _ in staged:
            tmp.unlink(missing_ok=True)
        raise
    for tmp, final in staged:
        os.replace(tmp, final)
    return [final for _, final in staged]


def _resolve(path: str, config_path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else Path(config_path).parent / p


def _csv_lines(header, rows) -> str:
    return harness._table(header, rows)


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ValidationError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ValidationError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return value


def _control(cfg: Mapping[str, Any]) -> glm.FitControl | None:
    c = cfg.get("control")
    if c is None:
        return None
    if not isinstance(c, Mapping):
        raise ValidationError("field 'control' must be an object")
    return glm.FitControl(**{k: c[k] for k in ("max_iter", "coef_tol", "step_halving_max") if k in c})


# --- subcommands -------------------------------------------------------------
# Each command validates its config completely and returns a zero-argument
# runner, so no work starts on invalid input.

def cmd_simulate(args) -> Callable[[], dict[str, str]]:
    """Config: a scenario (``exposure``, ``outcome``, ``collider``) plus
    optional ``n``, ``seed`` and ``selection_target`` (recalibrates the collider)."""
    cfg = load_config(args.config)
    scenario = Scenario.from_config(cfg)
    n = args.n or int(cfg.get("n", DEFAULT_SIM_N))
    seed = SeedSpec(args.seed if args.seed is not None else int(cfg.get("seed", 0)))
    target = cfg.get("selection_target")

    def run():
        collider = scenario.collider
        if target is not None:
            collider = calibrate_selection(collider, scenario.exposure, scenario.outcome, float(target),
                                           master_seed=seed.master_seed)
            validate_scenario(scenario.exposure, scenario.outcome, collider)
        data = simulate(scenario.exposure, scenario.outcome, collider, n, seed)
        names = list(data.columns)
        rows = zip(*(data[c] for c in names))
        return {"dataset.csv": _csv_lines(names, ([float(v) for v in r] for r in rows))}
    return run


def cmd_fit(args) -> Callable[[], dict[str, str]]:
    """Config: ``data`` (CSV path, relative to the config), ``family``,
    ``response``, ``terms`` (e.g. ``["1", "x", "x:y"]``), optional ``control``."""
    cfg = load_config(args.config)
    for key in ("data", "family", "response", "terms"):
        if key not in cfg:
            raise ValidationError(f"missing field {key!r}")
    if cfg["family"] not in glm.FAMILIES:
        raise ValidationError(f"field 'family': unknown family {cfg['family']!r}; expected one of {glm.FAMILIES}")
    columns = diagnostics.read_csv_columns(_resolve(cfg["data"], args.config))
    design = glm.DesignSpec(tuple(cfg["terms"]))
    X = design.matrix(columns)
    if cfg["response"] not in columns:
        raise ValidationError(f"field 'response': column {cfg['response']!r} not in data")
    y = columns[cfg["response"]]
    control = _control(cfg)

    def run():
        f = glm.fit_matrix(X, y, cfg["family"], design.names, control)
        if not f.converged:
            raise NumericalError(f"{cfg['family']} fit of {cfg['response']} did not converge "
                                 f"after {f.iterations} iterations")
        return {"fit_summary.csv": f.summary_csv()}
    return run


def cmd_analytic(args) -> Callable[[], dict[str, str]]:
    """Config: ``formula`` plus its parameters, see :data:`analytic.FORMULAS`."""
    cfg = load_config(args.config)
    preds = analytic.evaluate(cfg)

    def run():
        formula = cfg["formula"]
        at_x = preds[0].at_x
        if len(preds) == 1:
            header = ["formula", "scale", "at_x", "value"]
            row = [formula, preds[0].scale, at_x, preds[0].value]
        else:
            header = ["formula", "scale", "at_x", "intercept_bias", "slope_bias"]
            row = [formula, preds[0].scale, at_x, preds[0].value, preds[1].value]
        return {"analytic.csv": _csv_lines(header, [row])}
    return run


def cmd_experiment(args) -> Callable[[], dict[str, str]]:
    """Config: an experiment plan (``experiment``, optional ``n``, ``seed``,
    ``delta3_grid``, ``selection_targets``, ``outcomes``, ``colliders``)."""
    cfg = dict(load_config(args.config))
    if args.n is not None:
        cfg["n"] = args.n
    if args.seed is not None:
        cfg["seed"] = args.seed
    plan = harness.ExperimentPlan.from_config(cfg)
    threads = _threads(args)
    control = _control(cfg)

    def run():
        result = harness.run_experiment(plan, threads=threads, control=control)
        files = harness.experiment_csvs(result)
        files["plan.json"] = json.dumps(plan.to_config(), indent=2) + "\n"
        if result.failures:
            files["failures.csv"] = _csv_lines(["scenario_id", "error"], result.failures)
        return files, result
    return run


def cmd_oracle(args) -> Callable[[], dict[str, str]]:
    def run():
        rows = analytic.oracle_grid()
        header = ["check", "points", "max_abs_deviation", "tolerance", "status"]
        return {"oracle.csv": _csv_lines(header, ([r[h] for h in header] for r in rows))}, rows
    return run


def cmd_diagnose(args) -> Callable[[], dict[str, str]]:
    """Config: ``data`` (CSV path) plus the diagnostic fields (``outcome_col``,
    ``outcome_family``, ``exposure_cols``, ``selection_col``, ``mode``,
    ``drop_incomplete_rows``) and optional ``control``."""
    cfg = load_config(args.config)
    if "data" not in cfg:
        raise ValidationError("missing field 'data'")
    dcfg = diagnostics.DiagnosticConfig.from_config(
        {k: v for k, v in cfg.items() if k not in ("data", "control")})
    columns = diagnostics.read_csv_columns(_resolve(cfg["data"], args.config))
    control = _control(cfg)

    def run():
        report = diagnostics.run_diagnostic(columns, dcfg, control)
        return {"diagnostic_terms.csv": report.terms_csv(),
                "diagnostic_selection_logistic.csv": report.participation_csv(),
                "diagnostic.json": report.to_json(),
                "diagnostic.txt": report.to_text()}, report
    return run


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "analytic": cmd_analytic,
            "experiment": cmd_experiment, "oracle": cmd_oracle, "diagnose": cmd_diagnose}


def _positive(kind: str):
    def parse(text: str) -> int:
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{kind} must be an integer, got {text!r}") from None
        if v < (0 if kind == "seed" else 1):
            raise argparse.ArgumentTypeError(f"{kind} out of range: {v}")
        return v
    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="collider-lab", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).split("\n")[0])
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", default=".", help="output directory (default: current)")
        p.add_argument("--seed", type=_positive("seed"), help="master seed override")
        p.add_argument("--n", type=_positive("n"), help="sample size override")
        p.add_argument("--threads", type=_positive("threads"),
                       help=f"worker threads (default: ${THREADS_ENV} or 1)")
    return parser


def dispatch(args) -> int:
    try:
        runner = COMMANDS[args.command](args)
    except (ValidationError, ValueError, TypeError, KeyError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        produced = runner()
    except ValidationError as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    files, extra = produced if isinstance(produced, tuple) else (produced, None)
    written = write_outputs(args.out, files)
    for path in written:
        log.info("wrote %s", path)

    status = EXIT_OK
    if args.command == "analytic":
        sys.stdout.write(files["analytic.csv"])
    elif args.command == "oracle":
        sys.stdout.write(files["oracle.csv"])
        worst = max(r["max_abs_deviation"] for r in extra)
        ok = all(r["status"] == "PASS" for r in extra)
        print(f"max abs deviation {worst:.3g}: {'all PASS' if ok else 'FAIL'}")
        status = EXIT_OK if ok else EXIT_NUMERICAL
    elif args.command == "experiment":
        sys.stdout.write(files["summary.csv"])
        if extra.failures:
            for sid, msg in extra.failures:
                print(f"error: scenario {sid} failed: {msg}", file=sys.stderr)
            status = EXIT_NUMERICAL
    elif args.command == "diagnose":
        sys.stdout.write(files["diagnostic.txt"])
    return status


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return dispatch(args)


if __name__ == "__main__":
    sys.exit(main())
