"""Safeguarded Newton solver for the dual calibration problem.

The calibration weights minimizing ``sum_i G(w_i)`` subject to
``sum_i w_i x_i = T`` are ``w_i = rho'(x_i' lam)`` where ``lam`` minimizes

    F(lam) = sum_i rho(x_i' lam) - T' lam.

``F`` is convex, its gradient is the calibration residual and its Hessian is
``X' diag(rho''(X lam)) X``, so a damped Newton iteration that keeps every
``x_i' lam`` inside the dual domain converges from any interior start.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from entrocal.entropy import EntropyKind, Interval
from entrocal.errors import (
    ClippedMajority,
    DomainError,
    Infeasible,
    MissingIntercept,
    MissingInterceptWarning,
    NonConvergence,
    SingularHessian,
)

__all__ = [
    "SolverControls",
    "CalibrationProblem",
    "CalibrationSolution",
    "find_intercept",
    "default_init",
    "dual_objective",
    "solve_dual",
    "is_attainable",
]

_ARMIJO = 1e-4
_SINGULAR_RCOND = 1e-12
_HUBER_RIDGE = 1e-8
_POLISH_STEPS = 3


@dataclass(frozen=True)
class SolverControls:
    max_iter: int = 100
    grad_tol: float = 1e-8
    step_shrink: float = 0.5
    domain_margin: float = 0.995
    ridge: float = 0.0

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if not 0 < self.step_shrink < 1:
            raise ValueError("step_shrink must lie in (0, 1)")
        if not 0 < self.domain_margin < 1:
            raise ValueError("domain_margin must lie in (0, 1)")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")


def find_intercept(design: np.ndarray, tol: float = 1e-8) -> np.ndarray | None:
    """Return ``a`` with ``design @ a == 1`` (to ``tol``), or None."""
    design = np.asarray(design, dtype=float)
    ones = np.ones(design.shape[0])
    const = np.flatnonzero(np.all(design == 1.0, axis=0))
    if const.size:
        a = np.zeros(design.shape[1])
        a[const[0]] = 1.0
        return a
    a, *_ = np.linalg.lstsq(design, ones, rcond=None)
    if np.max(np.abs(design @ a - ones)) > tol:
        return None
    return a


@dataclass(frozen=True, eq=False)
class CalibrationProblem:
    """Sampled design rows, their population totals, and the entropy to use.

    ``entropy`` is an :class:`~entrocal.entropy.EntropyFamily` or any object
    with the same ``conjugate/weight_map/curvature/gradient/dual_domain``
    surface (e.g. a link-induced entropy).
    """

    design: np.ndarray
    totals: np.ndarray
    entropy: object
    controls: SolverControls = field(default_factory=SolverControls)
    intercept: np.ndarray | None = field(init=False, repr=False)

    def __post_init__(self):
        X = np.array(self.design, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        T = np.atleast_1d(np.array(self.totals, dtype=float))
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError(f"design must be a non-empty n x p matrix, got {X.shape}")
        if T.shape != (X.shape[1],):
            raise ValueError(f"totals has shape {T.shape}, expected ({X.shape[1]},)")
        if not np.all(np.isfinite(X)):
            raise ValueError("design contains non-finite entries")
        if not np.all(np.isfinite(T)):
            raise ValueError("totals contain non-finite entries")
        X.setflags(write=False)
        T.setflags(write=False)
        object.__setattr__(self, "design", X)
        object.__setattr__(self, "totals", T)
        a = find_intercept(X)
        if a is None:
            warnings.warn(
                "no constant direction in the design; calibration will not fix the "
                "population size",
                MissingInterceptWarning,
                stacklevel=3,
            )
        object.__setattr__(self, "intercept", a)

    @property
    def n(self) -> int:
        return self.design.shape[0]

    @property
    def p(self) -> int:
        return self.design.shape[1]

    @property
    def population_size(self) -> float:
        """N, read off the totals through the intercept direction."""
        if self.intercept is None:
            raise MissingIntercept("population size is undefined without an intercept")
        return float(self.totals @ self.intercept)

    def with_entropy(self, entropy) -> "CalibrationProblem":
        return CalibrationProblem(self.design, self.totals, entropy, self.controls)


@dataclass(frozen=True, eq=False)
class CalibrationSolution:
    lam: np.ndarray
    weights: np.ndarray
    residual: np.ndarray
    iterations: int
    converged: bool
    objective: float
    history: tuple = ()

    @property
    def residual_inf(self) -> float:
        return float(np.max(np.abs(self.residual)))

    def diagnostics(self) -> dict:
        return {
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "residual_inf": self.residual_inf,
            "objective": float(self.objective),
            "min_weight": float(np.min(self.weights)),
            "max_weight": float(np.max(self.weights)),
        }


def default_init(problem: CalibrationProblem) -> np.ndarray:
    """Dual point at which every weight equals N/n."""
    a = problem.intercept
    if a is None:
        raise MissingIntercept("default_init needs a constant direction in the design")
    w0 = problem.population_size / problem.n
    dom = problem.entropy.weight_domain()
    if not dom.contains(w0) or (dom.closed and abs(w0) == dom.high):
        if math.isfinite(dom.low) and w0 <= dom.low:
            w0 = dom.low + 1e-3
        elif math.isfinite(dom.high) and w0 >= dom.high:
            w0 = dom.high if dom.closed else dom.high - 1e-3
    return float(problem.entropy.gradient(w0)) * a


def dual_objective(problem: CalibrationProblem, lam) -> float:
    lam = np.asarray(lam, dtype=float)
    nu = problem.design @ lam
    return float(np.sum(problem.entropy.conjugate(nu)) - problem.totals @ lam)


def is_attainable(design, totals, domain: Interval) -> bool:
    """Whether some weights strictly inside ``domain`` satisfy ``X' w = T``.

    Closed domains only need a weight vector in the box.  Decides between a
    genuinely infeasible constraint set (dual objective unbounded below along a
    ray) and a numerical failure.
    """
    X = np.asarray(design, dtype=float)
    T = np.asarray(totals, dtype=float)
    n, _ = X.shape
    lo = domain.low if math.isfinite(domain.low) else None
    hi = domain.high if math.isfinite(domain.high) else None
    if lo is None and hi is None:
        w, *_ = np.linalg.lstsq(X.T, T, rcond=None)
        return bool(np.allclose(X.T @ w, T, rtol=1e-9, atol=1e-9))
    if domain.closed:
        res = optimize.linprog(
            np.zeros(n), A_eq=X.T, b_eq=T, bounds=[(lo, hi)] * n, method="highs"
        )
        return res.status == 0
    # maximize a common slack s from the open boundaries
    rows, rhs = [], []
    if lo is not None:
        rows.append(np.hstack([-np.eye(n), np.ones((n, 1))]))
        rhs.append(np.full(n, -lo))
    if hi is not None:
        rows.append(np.hstack([np.eye(n), np.ones((n, 1))]))
        rhs.append(np.full(n, hi))
    c = np.zeros(n + 1)
    c[-1] = -1.0
    res = optimize.linprog(
        c,
        A_ub=np.vstack(rows),
        b_ub=np.concatenate(rhs),
        A_eq=np.hstack([X.T, np.zeros((X.shape[1], 1))]),
        b_eq=T,
        bounds=[(None, None)] * n + [(None, 1.0)],
        method="highs",
    )
    return res.status == 0 and -res.fun > 1e-9


def _max_step(nu, dnu, domain: Interval, margin: float) -> float:
    t = math.inf
    if math.isfinite(domain.high):
        up = dnu > 0
        if np.any(up):
            t = min(t, float(np.min(margin * (domain.high - nu[up]) / dnu[up])))
    if math.isfinite(domain.low):
        down = dnu < 0
        if np.any(down):
            t = min(t, float(np.min(margin * (domain.low - nu[down]) / dnu[down])))
    return t


def _equilibrate(H: np.ndarray):
    """Jacobi scaling ``S H S`` with unit diagonal, so rank tests ignore column scale."""
    diag = np.diag(H)
    if not np.all(diag > 0):
        return None, H
    s = 1.0 / np.sqrt(diag)
    return s, H * s[:, None] * s[None, :]


def _is_singular(H: np.ndarray) -> bool:
    s, Hs = _equilibrate(H)
    if s is None:
        return True
    ev = np.linalg.eigvalsh(Hs)
    return not ev[-1] > 0 or ev[0] <= _SINGULAR_RCOND * ev[-1]


def _objective(entropy, nu, T, lam) -> float:
    with np.errstate(over="ignore", invalid="ignore"):
        val = float(np.sum(entropy.conjugate(nu)) - T @ lam)
    return val if math.isfinite(val) else math.inf


def solve_dual(problem: CalibrationProblem, init=None) -> CalibrationSolution:
    """Minimize the dual objective by damped Newton iteration.

    Steps are first cut back so every ``x_i' lam`` stays a fraction
    ``domain_margin`` of the way to the dual-domain boundary, then halved
    (``step_shrink``) until the Armijo decrease condition holds.  Convergence
    is declared on the calibration residual:
    ``max|sum w x - T| <= grad_tol * max(1, max|T|)``.

    Raises
    ------
    NonConvergence
        ``max_iter`` reached or the line search stalled on an attainable
        problem; ``exc.solution`` holds the last iterate.
    SingularHessian
        Rank-deficient Newton system (collinear calibration variables).
    Infeasible
        No weights in the entropy's weight domain meet the totals.
    """
    X, T, ent, ctl = problem.design, problem.totals, problem.entropy, problem.controls
    domain = ent.dual_domain()
    huber = getattr(ent, "kind", None) is EntropyKind.HUBER_TRIMMED
    tol = ctl.grad_tol * max(1.0, float(np.max(np.abs(T))))

    if huber and math.isfinite(ent.bound):
        if not is_attainable(X, T, ent.weight_domain()):
            raise Infeasible(
                f"no weights bounded by M={ent.bound:g} satisfy the calibration totals",
                diagnostics={"converged": False, "iterations": 0},
            )

    lam = default_init(problem) if init is None else np.array(init, dtype=float)
    if lam.shape != (problem.p,):
        raise ValueError(f"init has shape {lam.shape}, expected ({problem.p},)")
    nu = X @ lam
    if not np.all(domain.contains(nu)):
        raise DomainError(f"initial point leaves the dual domain {domain}")

    ridge = ctl.ridge
    F = _objective(ent, nu, T, lam)
    history = [F]
    stalled = False
    it = 0
    with np.errstate(over="ignore", invalid="ignore"):
        w = np.asarray(ent.weight_map(nu), dtype=float)
        resid = X.T @ w - T
        while True:
            gnorm = float(np.max(np.abs(resid)))
            if gnorm <= tol or it >= ctl.max_iter:
                break
            q = np.asarray(ent.curvature(nu), dtype=float)
            H = X.T @ (q[:, None] * X)
            if ridge > 0:
                H = H + ridge * np.eye(problem.p)
            if _is_singular(H):
                if huber and ridge == 0:
                    ridge = _HUBER_RIDGE * max(1.0, float(np.max(np.diag(H))))
                    warnings.warn(
                        "most units are trimmed; retrying Newton steps with a ridge",
                        ClippedMajority,
                        stacklevel=2,
                    )
                    H = H + ridge * np.eye(problem.p)
                elif not is_attainable(X, T, ent.weight_domain()):
                    # curvature underflow while running off along a ray
                    raise Infeasible(
                        "calibration totals cannot be met by weights in "
                        f"{ent.weight_domain()} (dual objective unbounded below)",
                        diagnostics=_diag(lam, w, resid, it, F),
                    )
                else:
                    raise SingularHessian(
                        "Newton system is singular: calibration variables are collinear",
                        diagnostics=_diag(lam, w, resid, it, F),
                    )
            sc, Hs = _equilibrate(H)
            d = sc * np.linalg.solve(Hs, -sc * resid)
            dnu = X @ d
            slope = float(resid @ d)
            t = min(1.0, _max_step(nu, dnu, domain, ctl.domain_margin))
            accepted = False
            while t > 1e-16:
                lam_new = lam + t * d
                nu_new = nu + t * dnu
                if np.all(domain.contains(nu_new)):
                    F_new = _objective(ent, nu_new, T, lam_new)
                    if F_new <= F + _ARMIJO * t * slope:
                        accepted = True
                    elif F_new <= F + 1e-13 * (1.0 + abs(F)):
                        # decrease is below rounding of F: fall back to the residual
                        w_try = np.asarray(ent.weight_map(nu_new), dtype=float)
                        accepted = np.max(np.abs(X.T @ w_try - T)) < gnorm
                    if accepted:
                        break
                t *= ctl.step_shrink
            it += 1
            if not accepted:
                stalled = True
                break
            lam, nu, F = lam_new, nu_new, F_new
            history.append(F)
            w = np.asarray(ent.weight_map(nu), dtype=float)
            resid = X.T @ w - T
        if np.max(np.abs(resid)) <= tol:
            lam, nu, w, resid, F = _polish(ent, X, T, lam, nu, w, resid, F, ridge, domain)

    converged = bool(np.max(np.abs(resid)) <= tol and np.all(np.isfinite(w)))
    solution = CalibrationSolution(
        lam=lam,
        weights=w,
        residual=resid,
        iterations=it,
        converged=converged,
        objective=F,
        history=tuple(history),
    )
    if converged:
        return solution
    if not is_attainable(X, T, ent.weight_domain()):
        raise Infeasible(
            "calibration totals cannot be met by weights in "
            f"{ent.weight_domain()} (dual objective unbounded below)",
            diagnostics=solution.diagnostics(),
            solution=solution,
        )
    reason = "line search stalled" if stalled else f"max_iter={ctl.max_iter} reached"
    raise NonConvergence(
        f"dual Newton did not converge ({reason}, residual {solution.residual_inf:.3g})",
        diagnostics=solution.diagnostics(),
        solution=solution,
    )


def _polish(ent, X, T, lam, nu, w, resid, F, ridge, domain, steps: int = _POLISH_STEPS):
    """Full Newton steps past the tolerance while they shrink the residual.

    Near the optimum each step squares the error, so a few steps bring the
    calibration residual to rounding level at negligible cost.
    """
    best = float(np.max(np.abs(resid)))
    for _ in range(steps):
        if best == 0.0:
            break
        q = np.asarray(ent.curvature(nu), dtype=float)
        H = X.T @ (q[:, None] * X)
        if ridge > 0:
            H = H + ridge * np.eye(X.shape[1])
        sc, Hs = _equilibrate(H)
        if sc is None or _is_singular(H):
            break
        try:
            d = sc * np.linalg.solve(Hs, -sc * resid)
        except np.linalg.LinAlgError:
            break
        lam_new = lam + d
        nu_new = X @ lam_new
        if not np.all(domain.contains(nu_new)):
            break
        w_new = np.asarray(ent.weight_map(nu_new), dtype=float)
        r_new = X.T @ w_new - T
        g_new = float(np.max(np.abs(r_new)))
        if not g_new < best:
            break
        lam, nu, w, resid, best = lam_new, nu_new, w_new, r_new, g_new
        F = _objective(ent, nu, T, lam)
    return lam, nu, w, resid, F


def _diag(lam, w, resid, it, F) -> dict:
    return {
        "converged": False,
        "iterations": int(it),
        "residual_inf": float(np.max(np.abs(resid))),
        "objective": float(F),
        "min_weight": float(np.min(w)),
        "max_weight": float(np.max(w)),
    }
