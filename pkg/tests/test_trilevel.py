import numpy as np
import pytest

from mlopt.errors import CapabilityError, ConvergenceBudget, StalePoint, StructuralError
from mlopt.experiments.stackelberg import StackelbergSpec, build_stackelberg
from mlopt.linsolve import SolveMode, SolveStats
from mlopt.problem import FiniteDifferenceOracle
from mlopt.trilevel import Z, grad_trilevel, jac_g, jac_h, resolve_deepest, solution_curvature
from mlopt.types import PointStack


@pytest.mark.parametrize("dim", [1, 5])
@pytest.mark.parametrize("x, expected", [(0.0, -0.25), (0.5, 0.0), (1.0, 0.25)])
def test_stackelberg_closed_form(dim, x, expected):
    problem = build_stackelberg(StackelbergSpec(dim=dim))
    point = problem.exact_response(np.full(dim, x))
    grad = grad_trilevel(*problem.objectives, point)
    np.testing.assert_allclose(grad, np.full(dim, expected), atol=1e-10)


def test_stackelberg_with_truncated_cg():
    problem = build_stackelberg(StackelbergSpec(dim=5))
    point = problem.exact_response(np.zeros(5))
    stats = SolveStats()
    grad = grad_trilevel(*problem.objectives, point, SolveMode("cg", cg_iters=3), stats=stats)
    np.testing.assert_allclose(grad, np.full(5, -0.25), atol=1e-10)
    assert stats.cg_solves > 0


def test_solution_map_jacobians(stackelberg):
    point = stackelberg.exact_response(np.array([0.2]))
    dg_dx, dg_dy = jac_g(stackelberg.objectives[2], point)
    np.testing.assert_allclose(dg_dx, [[-0.5]])
    np.testing.assert_allclose(dg_dy, [[-0.5]])
    dh_dx = jac_h(stackelberg.objectives[1], stackelberg.objectives[2], point, (dg_dx, dg_dy))
    np.testing.assert_allclose(dh_dx, [[-0.5]])


@pytest.mark.parametrize("x", [-0.7, 0.0, 0.5, 1.3])
def test_curvature_terms(curved, x):
    point = curved.exact_response([x])
    grad = grad_trilevel(*curved.objectives, point)
    assert grad[0] == pytest.approx(curved.exact_hypergradient(x), abs=1e-10)


def test_analytic_and_fd_curvature_agree(curved):
    point = curved.exact_response([0.5])
    f3 = curved.objectives[2]
    dg_dx, dg_dy = jac_g(f3, point)
    for wrt, expected in ((0, 1.0), (1, 0.0)):
        analytic = solution_curvature(f3, point, dg_dy, dg_dx, wrt, curvature_mode="analytic")
        numeric = solution_curvature(f3, point, dg_dy, dg_dx, wrt, curvature_mode="fd")
        np.testing.assert_allclose(analytic, [[[expected]]], atol=1e-12)
        np.testing.assert_allclose(numeric, analytic, atol=1e-6)
    fd_grad = grad_trilevel(*curved.objectives, point, curvature_mode="fd")
    assert fd_grad[0] == pytest.approx(curved.exact_hypergradient(0.5), abs=1e-6)


def test_analytic_curvature_needs_third_order(curved):
    value_only = FiniteDifferenceOracle(curved.objectives[2].value)
    point = curved.exact_response([0.5])
    dg_dx, dg_dy = jac_g(value_only, point)
    with pytest.raises(CapabilityError):
        solution_curvature(value_only, point, dg_dy, dg_dx, 0, curvature_mode="analytic")


def test_stale_third_level(stackelberg):
    point = stackelberg.exact_response(np.array([0.3]))
    stale = point.with_level(Z, point.values[Z] + 0.1)
    with pytest.raises(StalePoint) as e:
        grad_trilevel(*stackelberg.objectives, stale)
    assert e.value.level == Z
    assert "level 3" in str(e.value)
    grad_trilevel(*stackelberg.objectives, stale, stationarity_tol=None)


def test_stale_second_level(stackelberg):
    point = stackelberg.exact_response(np.array([0.3]))
    y = point.values[1] + 0.1
    # z re-solved for the moved y, so only level 2 is off
    stale = PointStack([point.values[0], y, 0.5 * (1 - point.values[0] - y)])
    with pytest.raises(StalePoint) as e:
        grad_trilevel(*stackelberg.objectives, stale)
    assert e.value.level == 1


def test_needs_three_levels():
    problem = build_stackelberg(StackelbergSpec(levels=4))
    with pytest.raises(StructuralError):
        grad_trilevel(*problem.objectives[:3], problem.zeros())


def test_unknown_curvature_mode(curved):
    point = curved.exact_response([0.5])
    dg_dx, dg_dy = jac_g(curved.objectives[2], point)
    with pytest.raises(StructuralError):
        solution_curvature(curved.objectives[2], point, dg_dy, dg_dx, 0, curvature_mode="spline")
    with pytest.raises(StructuralError):
        solution_curvature(curved.objectives[2], point, dg_dy, dg_dx, 2)


def test_resolve_deepest(curved):
    point = PointStack([[0.5], [0.8], [-3.0]])
    solved = resolve_deepest(curved.objectives[2], point)
    assert solved.values[2][0] == pytest.approx(0.4, abs=1e-11)
    np.testing.assert_array_equal(solved.values[1], point.values[1])


def test_resolve_deepest_budget(curved):
    with pytest.raises(ConvergenceBudget):
        resolve_deepest(curved.objectives[2], PointStack([[0.5], [0.8], [-3.0]]), max_iters=0)
