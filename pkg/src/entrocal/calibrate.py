"""One-step generalized entropy calibration (GEC) estimation.

The GEC total ``sum_S w_i y_i`` equals, by covariate balancing,

    T' gamma + sum_S w_i (y_i - x_i' gamma)

where ``gamma`` is the weighted least-squares fit of y on x with weights
``q_i = rho''(x_i' lam)``.  The variance estimator plugs the residuals of that
fit into ``sum_S w_i (w_i - 1) e_i^2``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from entrocal.dual_solver import (
    CalibrationProblem,
    CalibrationSolution,
    SolverControls,
    solve_dual,
)
from entrocal.entropy import EntropyFamily, EntropyKind
from entrocal.errors import (
    AllInfeasible,
    EntrocalError,
    IllConditioned,
    NegativeVariance,
    SingularGram,
    TrimBoundWarning,
)

__all__ = [
    "GecEstimate",
    "gec_estimate",
    "closed_form_greg",
    "gamma_hat",
    "weighted_normal_solve",
    "variance_estimate",
    "trimmed_calibrate",
    "trim_cv_errors",
    "select_trim_bound",
]

Z95 = 1.96
_PINV_RCOND = 1e-12


@dataclass(frozen=True, eq=False)
class GecEstimate:
    total: float
    mean: float
    gamma: np.ndarray
    variance: float
    std_error: float
    solution: CalibrationSolution
    entropy: object
    population_size: float
    n: int

    @property
    def se_total(self) -> float:
        return self.std_error

    @property
    def se_mean(self) -> float:
        return self.std_error / self.population_size

    @property
    def weights(self) -> np.ndarray:
        return self.solution.weights

    def report(self) -> dict:
        return {
            "entropy": getattr(self.entropy, "token", str(self.entropy)),
            "total": self.total,
            "mean": self.mean,
            "variance": self.variance,
            "se_total": self.se_total,
            "se_mean": self.se_mean,
            "ci95_low": self.total - Z95 * self.se_total,
            "ci95_high": self.total + Z95 * self.se_total,
            "n": self.n,
            "N": self.population_size,
            "solver": self.solution.diagnostics(),
        }


def weighted_normal_solve(design, y, q, what: str = "gamma") -> np.ndarray:
    """Solve ``(X' Q X) b = X' Q y``.

    Falls back to the pseudo-inverse (singular values below 1e-12 of the
    largest dropped) when the Gram matrix is numerically singular.
    """
    X = np.asarray(design, dtype=float)
    q = np.asarray(q, dtype=float)
    gram = X.T @ (q[:, None] * X)
    rhs = X.T @ (q * np.asarray(y, dtype=float))
    s = np.linalg.svd(gram, compute_uv=False)
    if not s[0] > 0:
        raise SingularGram(f"weighted Gram matrix for {what} is zero")
    if s[-1] <= _PINV_RCOND * s[0]:
        warnings.warn(
            f"weighted Gram matrix for {what} is singular; using the minimum-norm solution",
            IllConditioned,
            stacklevel=3,
        )
        return np.linalg.pinv(gram, rcond=_PINV_RCOND, hermitian=True) @ rhs
    return np.linalg.solve(gram, rhs)


def gamma_hat(design, y, solution: CalibrationSolution, entropy) -> np.ndarray:
    """Regression coefficients of the linearized GEC estimator.

    Weighted least squares of y on x with weights ``rho''(x' lam_hat)``; for a
    trimmed entropy the clipped units get weight zero.
    """
    X = np.asarray(design, dtype=float)
    q = np.asarray(entropy.curvature(X @ solution.lam), dtype=float)
    return weighted_normal_solve(X, y, q)


def variance_estimate(weights, design, y, gamma) -> float:
    """``sum_S w (w - 1) (y - x' gamma)^2`` for the estimated total."""
    w = np.asarray(weights, dtype=float)
    e = np.asarray(y, dtype=float) - np.asarray(design, dtype=float) @ np.asarray(gamma)
    return float(np.sum(w * (w - 1.0) * e * e))


def _floored(variance: float) -> float:
    if variance < 0:
        warnings.warn(
            f"variance estimate {variance:.4g} is negative (weights below one); "
            "reporting 0",
            NegativeVariance,
            stacklevel=3,
        )
        return 0.0
    return variance


def gec_estimate(problem: CalibrationProblem, y) -> GecEstimate:
    """Calibrate, then estimate the total, its regression coefficient and variance."""
    y = np.asarray(y, dtype=float)
    if y.shape != (problem.n,):
        raise ValueError(f"y has shape {y.shape}, expected ({problem.n},)")
    if not np.all(np.isfinite(y)):
        raise ValueError("y contains non-finite values")
    sol = solve_dual(problem)
    total = float(sol.weights @ y)
    gamma = gamma_hat(problem.design, y, sol, problem.entropy)
    variance = _floored(variance_estimate(sol.weights, problem.design, y, gamma))
    N = problem.population_size
    return GecEstimate(
        total=total,
        mean=total / N,
        gamma=gamma,
        variance=variance,
        std_error=math.sqrt(variance),
        solution=sol,
        entropy=problem.entropy,
        population_size=N,
        n=problem.n,
    )


def closed_form_greg(design, totals, y) -> float:
    """Regression estimator ``T' (X'X)^{-1} X'y``, the squared-loss GEC total."""
    X = np.asarray(design, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    gram = X.T @ X
    if np.linalg.cond(gram) > 1e12:
        raise SingularGram("X'X is singular")
    beta = np.linalg.solve(gram, X.T @ np.asarray(y, dtype=float))
    return float(np.asarray(totals, dtype=float) @ beta)


def _require_huber(entropy):
    if getattr(entropy, "kind", None) is not EntropyKind.HUBER_TRIMMED:
        raise ValueError(f"trimmed calibration needs a huber entropy, got {entropy}")


def trimmed_calibrate(problem: CalibrationProblem, y) -> GecEstimate:
    """GEC with weights capped at M through the Huber conjugate."""
    _require_huber(problem.entropy)
    M = problem.entropy.bound
    if problem.intercept is not None and M <= problem.population_size / problem.n:
        warnings.warn(
            f"trim bound M={M:g} does not exceed N/n={problem.population_size / problem.n:g}",
            TrimBoundWarning,
            stacklevel=2,
        )
    return gec_estimate(problem, y)


def trim_cv_errors(
    design, totals, y, candidate_Ms, folds: int = 5, seed: int = 0, controls=None
) -> dict:
    """K-fold prediction error of the trimmed regression fit for each bound.

    Each training fold is calibrated to the full population totals; the fitted
    coefficients predict the held-out fold.  Candidates for which any fold
    fails to calibrate map to ``inf``.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    if folds < 2 or folds > n:
        raise ValueError(f"folds must lie in [2, n={n}], got {folds}")
    Ms = [float(m) for m in candidate_Ms]
    if not Ms or any(not m > 0 for m in Ms):
        raise ValueError("candidate bounds must be positive")
    if any(b < a for a, b in zip(Ms, Ms[1:])):
        raise ValueError("candidate bounds must be sorted ascending")
    controls = controls or SolverControls()
    order = np.random.default_rng(seed).permutation(n)
    parts = np.array_split(order, folds)
    errors = {}
    for M in Ms:
        entropy = EntropyFamily.huber(M)
        sse = 0.0
        try:
            for k in range(folds):
                test = parts[k]
                train = np.concatenate([parts[j] for j in range(folds) if j != k])
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    problem = CalibrationProblem(X[train], totals, entropy, controls)
                    sol = solve_dual(problem)
                    beta = gamma_hat(X[train], y[train], sol, entropy)
                resid = y[test] - X[test] @ beta
                sse += float(resid @ resid)
        except EntrocalError:
            sse = math.inf
        errors[M] = sse
    return errors


def select_trim_bound(
    design, totals, y, candidate_Ms, folds: int = 5, seed: int = 0, controls=None
) -> float:
    """Bound with the smallest cross-validated prediction error.

    Ties (relative 1e-12) go to the largest bound, i.e. the least trimming.
    """
    errors = trim_cv_errors(design, totals, y, candidate_Ms, folds, seed, controls)
    finite = {m: e for m, e in errors.items() if math.isfinite(e)}
    if not finite:
        raise AllInfeasible("no candidate trim bound admits calibrated weights")
    best = min(finite.values())
    return max(m for m, e in finite.items() if e <= best + 1e-12 * max(1.0, abs(best)))
