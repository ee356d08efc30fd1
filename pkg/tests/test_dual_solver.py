from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from entrocal.dual_solver import (
    CalibrationProblem,
    SolverControls,
    default_init,
    dual_objective,
    find_intercept,
    is_attainable,
    solve_dual,
)
from entrocal.entropy import EntropyFamily, Interval, LinkFunction, link_induced_entropy
from entrocal.errors import (
    ClippedMajority,
    DomainError,
    Infeasible,
    MissingIntercept,
    MissingInterceptWarning,
    NonConvergence,
    SingularHessian,
)
from oracle import primal_weights, random_instance

SL = EntropyFamily.squared_loss()
KL = EntropyFamily.kl()
SKL = EntropyFamily.shifted_kl()
EL = EntropyFamily.empirical_likelihood()
HD = EntropyFamily.hellinger()

ALL = [SL, KL, SKL, EL, HD, EntropyFamily.renyi(0.5), EntropyFamily.renyi(2.0),
       EntropyFamily.huber(10.0), link_induced_entropy(LinkFunction.logistic())]


def test_intercept_only_squared_loss():
    sol = solve_dual(CalibrationProblem([[1.0], [1.0]], [4.0], SL))
    assert sol.converged
    np.testing.assert_allclose(sol.lam, [2.0])
    np.testing.assert_allclose(sol.weights, [2.0, 2.0])


def test_intercept_only_empirical_likelihood():
    sol = solve_dual(CalibrationProblem([[1.0], [1.0]], [4.0], EL))
    np.testing.assert_allclose(sol.lam, [-0.5])
    np.testing.assert_allclose(sol.weights, [2.0, 2.0])


@pytest.mark.parametrize("ent", ALL, ids=lambda e: e.token)
def test_intercept_only_weights_are_N_over_n(ent):
    rng = np.random.default_rng(0)
    X = np.column_stack([np.ones(7)])
    sol = solve_dual(CalibrationProblem(X, [21.0], ent))
    assert np.ptp(sol.weights) <= 1e-10
    assert sol.weights[0] == pytest.approx(3.0, abs=1e-10)
    # a constant direction that is not a unit column
    Z = np.column_stack([2.0 * np.ones(7), rng.normal(size=7)])
    Z[:, 1] = Z[:, 0] * 0.5
    sol2 = solve_dual(CalibrationProblem(Z[:, :1], [42.0], ent))
    assert np.ptp(sol2.weights) <= 1e-10


def test_default_init_examples():
    X = np.array([[1.0, 0.3], [1.0, -0.2]])
    p_sl = CalibrationProblem(X, [4.0, 0.1], SL)
    np.testing.assert_allclose(default_init(p_sl), [2.0, 0.0])
    p_kl = CalibrationProblem(X, [4.0, 0.1], KL)
    assert default_init(p_kl)[0] == pytest.approx(1.0 + math.log(2.0))
    p_el = CalibrationProblem(X, [4.0, 0.1], EL)
    assert default_init(p_el)[0] == pytest.approx(-0.5)
    # N/n below one is outside the shifted-KL weight domain
    p_skl = CalibrationProblem(X, [1.0, 0.1], SKL)
    assert SKL.weight_map(default_init(p_skl)[0]) == pytest.approx(1.001)


def test_dual_objective_examples():
    p = CalibrationProblem([[1.0], [1.0]], [4.0], SL)
    assert dual_objective(p, [2.0]) == pytest.approx(-4.0)
    pe = CalibrationProblem([[1.0], [1.0]], [4.0], EL)
    with pytest.raises(DomainError):
        dual_objective(pe, [0.5])


def test_missing_intercept():
    X = np.array([[1.0], [2.0], [3.0]])
    with pytest.warns(MissingInterceptWarning):
        p = CalibrationProblem(X, [6.0], SL)
    with pytest.raises(MissingIntercept):
        default_init(p)
    # an explicit start still works
    sol = solve_dual(p, init=[0.3])
    assert sol.converged
    np.testing.assert_allclose(X.T @ sol.weights, [6.0])


def test_find_intercept_combination():
    X = np.array([[0.5, 0.5, 3.0], [0.2, 0.8, 1.0], [0.9, 0.1, 2.0]])
    a = find_intercept(X)
    np.testing.assert_allclose(X @ a, 1.0, atol=1e-12)
    assert find_intercept(np.array([[1.0], [2.0]])) is None


@pytest.mark.parametrize("ent", ALL, ids=lambda e: e.token)
def test_calibration_identity_and_monotone_descent(ent):
    rng = np.random.default_rng(5)
    for _ in range(5):
        X, T, _ = random_instance(rng, 20, 3)
        sol = solve_dual(CalibrationProblem(X, T, ent))
        assert sol.converged
        assert sol.residual_inf <= 1e-8 * max(1.0, np.max(np.abs(T)))
        np.testing.assert_allclose(X.T @ sol.weights - T, sol.residual, atol=1e-12)
        assert np.all(np.diff(sol.history) <= 1e-12 * (1 + np.abs(sol.history[:-1])))
        assert np.all(ent.dual_domain().contains(X @ sol.lam))


@pytest.mark.parametrize(
    "ent, kw",
    [(SL, {}), (KL, {}), (SKL, {}), (EL, {}), (HD, {}),
     (EntropyFamily.renyi(0.5), {"alpha": 0.5}), (EntropyFamily.renyi(2.0), {"alpha": 2.0})],
    ids=lambda x: getattr(x, "token", ""),
)
def test_primal_oracle(ent, kw):
    rng = np.random.default_rng(21)
    name = ent.kind.value
    for _ in range(5):
        X, T, _ = random_instance(rng, 20, 3)
        sol = solve_dual(CalibrationProblem(X, T, ent))
        w = primal_weights(X, T, name, **kw)
        assert np.max(np.abs(sol.weights - w)) <= 1e-6


def test_huber_matches_barrier_oracle_when_binding():
    rng = np.random.default_rng(8)
    for _ in range(5):
        X, T, w0 = random_instance(rng, 15, 3)
        M = float(w0.max())
        sol = solve_dual(CalibrationProblem(X, T, EntropyFamily.huber(M)))
        w = primal_weights(X, T, "huber", bound=M)
        assert np.max(np.abs(sol.weights - w)) <= 1e-6
        assert sol.weights.max() <= M + 1e-8


def test_scale_equivariance():
    rng = np.random.default_rng(2)
    X, T, _ = random_instance(rng, 20, 3)
    Xs, Ts = X.copy(), T.copy()
    Xs[:, 1] *= 1e3
    Ts[1] *= 1e3
    for ent in (EL, SKL, HD):
        a = solve_dual(CalibrationProblem(X, T, ent)).weights
        b = solve_dual(CalibrationProblem(Xs, Ts, ent)).weights
        np.testing.assert_allclose(a, b, atol=1e-8)


def test_badly_scaled_column_is_not_reported_singular():
    rng = np.random.default_rng(4)
    X, T, _ = random_instance(rng, 30, 3)
    X[:, 2] *= 1e-5
    T[2] *= 1e-5
    sol = solve_dual(CalibrationProblem(X, T, EL))
    assert sol.converged


def test_collinear_design_is_singular():
    X = np.array([[1, 0, 0], [1, 1, 2], [1, 2, 4], [1, 3, 6]], dtype=float)
    with pytest.raises(SingularHessian):
        solve_dual(CalibrationProblem(X, [5.0, 6.0, 12.0], SL))


def test_infeasible_shifted_kl():
    # N < n cannot be reached with weights above one
    X = np.ones((4, 1))
    with pytest.raises(Infeasible) as exc:
        solve_dual(CalibrationProblem(X, [3.0], SKL))
    assert exc.value.diagnostics["converged"] is False


def test_infeasible_kl_sign():
    X = np.array([[1.0, 1.0], [1.0, 2.0], [1.0, 3.0]])
    with pytest.raises(Infeasible):
        solve_dual(CalibrationProblem(X, [6.0, 20.0], KL))


def test_huber_infeasible_cap():
    X = np.ones((5, 1))
    with pytest.raises(Infeasible):
        solve_dual(CalibrationProblem(X, [60.0], EntropyFamily.huber(10.0)))


def test_huber_all_clipped_uses_ridge():
    X = np.ones((5, 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClippedMajority)
        sol = solve_dual(CalibrationProblem(X, [50.0], EntropyFamily.huber(10.0)))
    np.testing.assert_allclose(sol.weights, 10.0)


def test_nonconvergence_carries_partial_solution():
    rng = np.random.default_rng(1)
    X, T, _ = random_instance(rng, 20, 3)
    p = CalibrationProblem(X, T, EL, SolverControls(max_iter=1, grad_tol=1e-14))
    with pytest.raises(NonConvergence) as exc:
        solve_dual(p)
    assert exc.value.solution is not None
    assert exc.value.diagnostics["iterations"] == 1


def test_init_outside_domain():
    p = CalibrationProblem([[1.0], [1.0]], [4.0], EL)
    with pytest.raises(DomainError):
        solve_dual(p, init=[1.0])


def test_is_attainable():
    X = np.ones((3, 1))
    assert is_attainable(X, [6.0], Interval(1.0, math.inf))
    assert not is_attainable(X, [3.0], Interval(1.0, math.inf))
    assert is_attainable(X, [3.0], Interval(-1.0, 1.0, closed=True))
    assert not is_attainable(X, [3.1], Interval(-1.0, 1.0, closed=True))


def test_controls_validation():
    with pytest.raises(ValueError):
        SolverControls(step_shrink=1.0)
    with pytest.raises(ValueError):
        SolverControls(max_iter=0)
    with pytest.raises(ValueError):
        SolverControls(ridge=-1.0)


def test_problem_validation():
    with pytest.raises(ValueError):
        CalibrationProblem(np.ones((3, 2)), [1.0], SL)
    with pytest.raises(ValueError):
        CalibrationProblem([[1.0, np.nan]], [1.0, 2.0], SL)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(min_value=4, max_value=25),
    st.integers(min_value=1, max_value=3),
    st.integers(min_value=0, max_value=2**31 - 1),
)
def test_random_feasible_instances_converge(n, k, seed):
    rng = np.random.default_rng(seed)
    X, T, _ = random_instance(rng, n, min(k + 1, n - 1))
    for ent in (SKL, EL):
        sol = solve_dual(CalibrationProblem(X, T, ent))
        assert sol.converged
        assert np.all(sol.weights > ent.weight_domain().low)
