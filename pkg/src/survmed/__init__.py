"""Mediation analysis for a censored failure-time outcome with an error-prone exposure.

The main entry points are :func:`load_study`, :func:`fit_method`,
:func:`approx_measures` / :func:`exact_measures`, :func:`sandwich_variance`,
:func:`bootstrap_ci` and :func:`run_scenario`.
"""

from .calibrate import METHODS, fit_method, orc1_fit, orc2_predictor, rrc_fit
from .coxfit import BACKEND, breslow_cumhaz, cox_fit
from .dataio import Schema, Study, load_study, validate_study, write_study
from .infer import bootstrap_ci, delta_method_se, sandwich_variance
from .mediate import (
    Contrast,
    Theta,
    approx_measures,
    exact_measures,
    reliability_index,
    reliability_index_nocov,
    theorem1_relbias,
)
from .simulate import Scenario, generate_study, run_scenario

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "METHODS",
    "Contrast",
    "Scenario",
    "Schema",
    "Study",
    "Theta",
    "approx_measures",
    "bootstrap_ci",
    "breslow_cumhaz",
    "cox_fit",
    "delta_method_se",
    "exact_measures",
    "fit_method",
    "generate_study",
    "load_study",
    "orc1_fit",
    "orc2_predictor",
    "reliability_index",
    "reliability_index_nocov",
    "rrc_fit",
    "run_scenario",
    "sandwich_variance",
    "theorem1_relbias",
    "validate_study",
    "write_study",
]
