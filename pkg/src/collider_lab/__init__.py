"""Collider (selection) bias: closed forms, exact oracles, a GLM engine,
simulation experiments and a dataset diagnostic."""
from .models import (BiasReport, ColliderModel, Dataset, ExposureSpec, NumericalError, OutcomeModel,
                     Scenario, ValidationError, validate_scenario)
from .datagen import SeedSpec, calibrate_selection, gen_collider, gen_exposure, gen_outcome, simulate
from .glm import DesignSpec, FitControl, GlmFit, fit_glm, fit_logadditive_selection
from .harness import ExperimentPlan, run_experiment, run_scenario
from .diagnostics import DiagnosticConfig, DiagnosticReport, run_diagnostic

__version__ = "0.1.0"
