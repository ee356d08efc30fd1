"""Generalized entropy calibration weighting for voluntary samples."""

from __future__ import annotations

__version__ = "0.1.0"

from entrocal.calibrate import (
    GecEstimate,
    closed_form_greg,
    gamma_hat,
    gec_estimate,
    select_trim_bound,
    trimmed_calibrate,
    variance_estimate,
)
from entrocal.dual_solver import (
    CalibrationProblem,
    CalibrationSolution,
    SolverControls,
    solve_dual,
)
from entrocal.entropy import (
    EntropyFamily,
    LinkFunction,
    LinkKind,
    Orientation,
    link_induced_entropy,
    parse_entropy,
    parse_link,
)
from entrocal.twostep import (
    ExactDebias,
    ReferenceDebias,
    TwoStepResult,
    TwoStepSpec,
    debias_regressor,
    step1_weights,
    two_step_variance,
    two_step_estimate,
)

__all__ = [
    "CalibrationProblem",
    "CalibrationSolution",
    "EntropyFamily",
    "ExactDebias",
    "GecEstimate",
    "LinkFunction",
    "LinkKind",
    "Orientation",
    "ReferenceDebias",
    "SolverControls",
    "TwoStepResult",
    "TwoStepSpec",
    "closed_form_greg",
    "debias_regressor",
    "gamma_hat",
    "gec_estimate",
    "link_induced_entropy",
    "parse_entropy",
    "parse_link",
    "select_trim_bound",
    "solve_dual",
    "step1_weights",
    "two_step_variance",
    "trimmed_calibrate",
    "two_step_estimate",
    "variance_estimate",
]
