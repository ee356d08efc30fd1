"""Two-step debiased calibration.

Step 1 calibrates propensity weights ``w1 = rho1'(x1' phi)`` to the totals of
the propensity covariates ``x1`` under the entropy induced by a link.  Step 2
calibrates final weights on ``z = (x2, g2(w1))`` where ``g2`` is the gradient
of the Step-2 entropy.  The extra constraint on ``g2(w1)`` is what makes the
estimator consistent when the propensity model is right even if the outcome
is not linear in ``x2``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from entrocal.calibrate import Z95
from entrocal.dual_solver import (
    CalibrationProblem,
    CalibrationSolution,
    SolverControls,
    solve_dual,
)
from entrocal.entropy import (
    EntropyFamily,
    EntropyKind,
    LinkFunction,
    link_induced_entropy,
)
from entrocal.errors import (
    ConfigError,
    DebiasTotalUnavailable,
    DomainError,
    EntrocalWarning,
    IllConditioned,
    NegativeVariance,
    PropensityAboveOne,
)

__all__ = [
    "GivenDebias",
    "ExactDebias",
    "ReferenceDebias",
    "TwoStepSpec",
    "TwoStepResult",
    "DebiasedResult",
    "step1_weights",
    "debias_regressor",
    "debiased_calibration",
    "two_step_estimate",
    "two_step_variance",
]

_SPAN_TOL = 1e-10
_LSTSQ_RCOND = 1e-10


# Population total of the debiasing regressor ---------------------------------


@dataclass(frozen=True)
class GivenDebias:
    """A debiasing total supplied directly by the caller."""

    value: float
    mode = "given"

    def evaluate(self, phi, step1_entropy, entropy2) -> float:
        return float(self.value)


@dataclass(frozen=True, eq=False)
class ExactDebias:
    """Evaluate ``sum_U g2(rho1'(x1' phi))`` over unit-level population ``x1``."""

    population_x1: np.ndarray
    mode = "exact"

    def evaluate(self, phi, step1_entropy, entropy2) -> float:
        X = np.asarray(self.population_x1, dtype=float)
        w1 = step1_entropy.weight_map(X @ phi)
        return float(np.sum(debias_regressor(w1, entropy2, what="population")))


@dataclass(frozen=True, eq=False)
class ReferenceDebias:
    """Estimate the debiasing total from a design-weighted reference sample."""

    reference_x1: np.ndarray
    weights: np.ndarray
    mode = "reference"

    def evaluate(self, phi, step1_entropy, entropy2) -> float:
        X = np.asarray(self.reference_x1, dtype=float)
        d = np.asarray(self.weights, dtype=float)
        w1 = step1_entropy.weight_map(X @ phi)
        return float(d @ debias_regressor(w1, entropy2, what="reference"))


def _as_debias(value):
    if value is None:
        return None
    if isinstance(value, (GivenDebias, ExactDebias, ReferenceDebias)):
        return value
    return GivenDebias(float(value))


@dataclass(frozen=True, eq=False)
class TwoStepSpec:
    """Configuration of a two-step estimate.

    ``ps_covariates`` and ``or_covariates`` index columns of the sample design
    and may overlap; each set should span a constant.  ``debias_total`` is a
    number, an :class:`ExactDebias` or a :class:`ReferenceDebias`.
    """

    ps_covariates: tuple
    or_covariates: tuple
    totals1: np.ndarray
    totals2: np.ndarray
    debias_total: object = None
    link: LinkFunction = field(default_factory=LinkFunction.logistic)
    entropy2: EntropyFamily = field(default_factory=EntropyFamily.shifted_kl)

    def __post_init__(self):
        ps = tuple(int(i) for i in self.ps_covariates)
        orc = tuple(int(i) for i in self.or_covariates)
        if not ps or not orc:
            raise ConfigError("both covariate sets must be non-empty")
        t1 = np.asarray(self.totals1, dtype=float).ravel()
        t2 = np.asarray(self.totals2, dtype=float).ravel()
        if t1.size != len(ps) or t2.size != len(orc):
            raise ConfigError("totals do not match the covariate sets")
        object.__setattr__(self, "ps_covariates", ps)
        object.__setattr__(self, "or_covariates", orc)
        object.__setattr__(self, "totals1", t1)
        object.__setattr__(self, "totals2", t2)
        object.__setattr__(self, "debias_total", _as_debias(self.debias_total))


@dataclass(frozen=True, eq=False)
class DebiasedResult:
    step2_weights: np.ndarray
    z: np.ndarray
    kept: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    total: float
    variance: float
    population_size: float
    debias_total: float
    solution: CalibrationSolution


@dataclass(frozen=True, eq=False)
class TwoStepResult:
    phi: np.ndarray
    step1_weights: np.ndarray
    step2_weights: np.ndarray
    z: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    total: float
    variance: float
    mean: float
    population_size: float
    debias_total: float
    debias_mode: str
    solution: CalibrationSolution
    step1_solution: CalibrationSolution
    entropy2: EntropyFamily
    link: LinkFunction

    @property
    def std_error(self) -> float:
        return math.sqrt(self.variance)

    se_total = std_error

    @property
    def se_mean(self) -> float:
        return self.std_error / self.population_size

    @property
    def weights(self) -> np.ndarray:
        return self.step2_weights

    def report(self) -> dict:
        w1 = self.step1_weights
        return {
            "entropy": self.entropy2.token,
            "link": self.link.token,
            "total": self.total,
            "mean": self.mean,
            "variance": self.variance,
            "se_total": self.se_total,
            "se_mean": self.se_mean,
            "ci95_low": self.total - Z95 * self.se_total,
            "ci95_high": self.total + Z95 * self.se_total,
            "n": int(w1.size),
            "N": self.population_size,
            "phi": [float(v) for v in self.phi],
            "step1_summary": {
                "min": float(w1.min()),
                "max": float(w1.max()),
                "mean": float(w1.mean()),
            },
            "debias_mode": self.debias_mode,
            "debias_total": self.debias_total,
            "solver": self.solution.diagnostics(),
        }


# Steps -----------------------------------------------------------------------


def step1_weights(design1, totals1, link: LinkFunction, controls=None):
    """Propensity weights calibrated to the totals of ``x1``.

    Returns ``(phi, weights, solution)``.  Weights below one mean estimated
    propensities above one and trigger a :class:`PropensityAboveOne` warning.
    """
    entropy = link_induced_entropy(link)
    problem = CalibrationProblem(design1, totals1, entropy, controls or SolverControls())
    sol = solve_dual(problem)
    low = sol.weights < 1.0
    if np.any(low):
        warnings.warn(
            f"{int(low.sum())} step-1 weights are below one "
            "(estimated propensities above one)",
            PropensityAboveOne,
            stacklevel=2,
        )
    return sol.lam, sol.weights, sol


def debias_regressor(step1_weights, entropy2, what: str = "sample") -> np.ndarray:
    """``g2(w1)``, the debiasing regressor for Step 2."""
    w = np.atleast_1d(np.asarray(step1_weights, dtype=float))
    dom = entropy2.weight_domain()
    bad = np.flatnonzero(~dom.contains(w))
    if bad.size:
        head = ", ".join(str(int(i)) for i in bad[:10])
        more = "" if bad.size <= 10 else f" and {bad.size - 10} more"
        raise DomainError(
            f"step-1 weights of {what} units [{head}{more}] lie outside the "
            f"weight domain {dom} of {entropy2.token}"
        )
    return np.asarray(entropy2.gradient(w), dtype=float).reshape(w.shape)


def _in_span(X, v) -> tuple[bool, np.ndarray]:
    coef, *_ = np.linalg.lstsq(X, v, rcond=None)
    resid = v - X @ coef
    scale = max(1.0, float(np.linalg.norm(v)))
    return float(np.linalg.norm(resid)) <= _SPAN_TOL * scale, coef


def two_step_variance(design1, z, y, solution: CalibrationSolution, weights, entropy2,
                      kept=None):
    """Coefficients and variance of the two-step estimator.

    Regresses y on ``(x1, z)`` by weighted least squares with weights
    ``rho2''(z_k' lam)`` where ``z_k`` are the Step-2 columns actually
    calibrated.  Overlap between ``x1`` and ``x2`` makes the stacked system
    singular, so the minimum-norm solution is used; only the fitted values
    enter the variance.

    Returns ``(gamma1, gamma2, variance)``.
    """
    Z = np.asarray(z, dtype=float)
    X1 = np.empty((Z.shape[0], 0)) if design1 is None else np.asarray(design1, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(weights, dtype=float)
    zk = Z if kept is None else Z[:, kept]
    q = np.asarray(entropy2.curvature(zk @ solution.lam), dtype=float)
    A = np.hstack([X1, Z])
    r = np.sqrt(q)
    coef, *_ = np.linalg.lstsq(r[:, None] * A, r * y, rcond=_LSTSQ_RCOND)
    e = y - A @ coef
    variance = float(np.sum(w * (w - 1.0) * e * e))
    p1 = X1.shape[1]
    return coef[:p1], coef[p1:], variance


def debiased_calibration(design2, y, step1_weights, totals2, debias_total, entropy2,
                         design1=None, controls=None) -> DebiasedResult:
    """Step 2: calibrate on ``(x2, g2(w1))`` given initial weights ``w1``.

    ``design1`` enters only the variance; pass ``None`` when ``w1`` are known
    design weights rather than estimated propensity weights.  When ``g2(w1)``
    lies in the span of ``x2`` its constraint is implied by the others and is
    dropped with a warning.
    """
    X2 = np.asarray(design2, dtype=float)
    y = np.asarray(y, dtype=float)
    t2 = np.asarray(totals2, dtype=float)
    if entropy2.kind is EntropyKind.SQUARED_LOSS:
        warnings.warn(
            "squared-loss step-2 weights may fall below one or zero",
            EntrocalWarning,
            stacklevel=2,
        )
    g = debias_regressor(step1_weights, entropy2)
    Z = np.column_stack([X2, g])
    kept = np.ones(Z.shape[1], dtype=bool)
    redundant, coef = _in_span(X2, g)
    if redundant:
        kept[-1] = False
        implied = float(t2 @ coef)
        if abs(implied - debias_total) > 1e-6 * max(1.0, abs(debias_total)):
            warnings.warn(
                f"debiasing regressor lies in the span of x2; its total "
                f"{debias_total:.10g} disagrees with the implied {implied:.10g} "
                "and is ignored",
                IllConditioned,
                stacklevel=2,
            )
        else:
            warnings.warn(
                "debiasing regressor lies in the span of x2; constraint dropped",
                EntrocalWarning,
                stacklevel=2,
            )
        totals = t2
    else:
        totals = np.append(t2, debias_total)
    problem = CalibrationProblem(Z[:, kept], totals, entropy2, controls or SolverControls())
    sol = solve_dual(problem)
    w2 = sol.weights
    gamma1, gamma2, variance = two_step_variance(design1, Z, y, sol, w2, entropy2, kept)
    if variance < 0:
        warnings.warn(
            f"variance estimate {variance:.4g} is negative; reporting 0",
            NegativeVariance,
            stacklevel=2,
        )
        variance = 0.0
    return DebiasedResult(
        step2_weights=w2,
        z=Z,
        kept=kept,
        gamma1=gamma1,
        gamma2=gamma2,
        total=float(w2 @ y),
        variance=variance,
        population_size=problem.population_size,
        debias_total=float(debias_total),
        solution=sol,
    )


def two_step_estimate(design, y, spec: TwoStepSpec, controls=None) -> TwoStepResult:
    """Two-step debiased calibration estimate of the total of ``y``."""
    X = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError("design must be n x p and y of length n")
    p = X.shape[1]
    if max(spec.ps_covariates + spec.or_covariates) >= p:
        raise ConfigError(f"covariate index out of range for a design with {p} columns")
    X1 = X[:, list(spec.ps_covariates)]
    X2 = X[:, list(spec.or_covariates)]
    phi, w1, sol1 = step1_weights(X1, spec.totals1, spec.link, controls)
    if spec.debias_total is None:
        raise DebiasTotalUnavailable(
            "the debiasing total needs population x1 or a reference sample"
        )
    step1_entropy = link_induced_entropy(spec.link)
    debias = spec.debias_total.evaluate(phi, step1_entropy, spec.entropy2)
    res = debiased_calibration(
        X2, y, w1, spec.totals2, debias, spec.entropy2, design1=X1, controls=controls
    )
    return TwoStepResult(
        phi=phi,
        step1_weights=w1,
        step2_weights=res.step2_weights,
        z=res.z,
        gamma1=res.gamma1,
        gamma2=res.gamma2,
        total=res.total,
        variance=res.variance,
        mean=res.total / res.population_size,
        population_size=res.population_size,
        debias_total=debias,
        debias_mode=spec.debias_total.mode,
        solution=res.solution,
        step1_solution=sol1,
        entropy2=spec.entropy2,
        link=spec.link,
    )
