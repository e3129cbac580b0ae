import numpy as np
import pytest

from mlopt.errors import StalePoint, StructuralError
from mlopt.experiments.polynomial import quadratic_chain, random_quadratic_problem
from mlopt.experiments.stackelberg import StackelbergSpec, build_stackelberg
from mlopt.linsolve import SolveMode, SolveStats
from mlopt.nlevel import (
    JacobianTable,
    build_table,
    grad_full,
    hypergradient,
    path_sum,
    reduced_derivatives,
    reduced_gradient,
    trilevel_consistency,
)
from mlopt.numderiv import fd_grad_block
from mlopt.types import PointStack


def reduced_value_gradient(problem, x1):
    return fd_grad_block(lambda p: problem.reduced_value(p.values[0]), PointStack([x1]), 0)


@pytest.mark.parametrize("levels", [2, 3, 4, 5])
@pytest.mark.parametrize("x", [0.0, 0.3, 0.5])
def test_stackelberg_any_depth(levels, x):
    problem = build_stackelberg(StackelbergSpec(dim=2, levels=levels))
    x1 = np.full(2, x)
    grad = hypergradient(problem, problem.exact_response(x1))
    np.testing.assert_allclose(grad, problem.exact_hypergradient(x1), atol=1e-12)


def test_table_is_complete(quadratic4):
    point = quadratic4.exact_response(np.array([0.5, -1.0]))
    table = build_table(quadratic4, point)
    assert table.is_complete(4)
    assert table.levels_resolved == 4
    assert table.total[(3, 0)].shape == (2, 2)
    assert table.partial[(2, 1)].shape == (2, 3)


@pytest.mark.parametrize("levels", [3, 4, 5])
def test_adjacent_totals_equal_partials(levels):
    problem = quadratic_chain(levels, 2)
    table = build_table(problem, problem.exact_response(np.array([0.5, -1.0])))
    below_diagonal = {(i, j) for i in range(levels) for j in range(i)}
    assert len(table.total) == len(table.partial) == levels * (levels - 1) // 2
    assert set(table.total) == set(table.partial) == below_diagonal
    for i in range(1, levels):
        np.testing.assert_allclose(table.total[(i, i - 1)], table.partial[(i, i - 1)], atol=1e-12)


def test_bilevel_reduction():
    problem = random_quadratic_problem(3, [3, 4])
    point = problem.exact_response(np.array([1.0, 0.0, -1.0]))
    f2 = problem.objectives[1]
    expected = -np.linalg.solve(f2.hess_block(point, 1, 1), f2.hess_block(point, 1, 0))
    np.testing.assert_allclose(build_table(problem, point).total[(1, 0)], expected, atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_four_levels_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    dims = [int(d) for d in rng.integers(1, 6, size=4)]
    problem = random_quadratic_problem(seed, dims)
    x1 = rng.normal(size=dims[0])
    grad = hypergradient(problem, problem.exact_response(x1))
    expected = reduced_value_gradient(problem, x1)
    np.testing.assert_allclose(grad, expected, rtol=1e-5, atol=1e-5 * max(1.0, np.abs(expected).max()))


def test_chain_matches_finite_differences(chain4):
    x1 = np.array([0.4, -1.2])
    grad = hypergradient(chain4, chain4.exact_response(x1))
    np.testing.assert_allclose(grad, reduced_value_gradient(chain4, x1), atol=1e-5)


def test_totals_match_exact_responder(quadratic4):
    table = build_table(quadratic4, quadratic4.exact_response(np.zeros(2)))
    jacobian = quadratic4.response_jacobian()
    offsets = np.cumsum([0, *quadratic4.dims])
    for i in range(1, 4):
        np.testing.assert_allclose(table.total[(i, 0)], jacobian[offsets[i] : offsets[i + 1]], atol=1e-9)


@pytest.mark.parametrize("fixture", ["quadratic4", "chain4"])
def test_path_sums_rebuild_totals(fixture, request):
    problem = request.getfixturevalue(fixture)
    table = build_table(problem, problem.exact_response(np.ones(problem.dims[0])))
    for i in range(4):
        for j in range(i):
            np.testing.assert_allclose(path_sum(table, i, j), table.total[(i, j)], atol=1e-9)
    with pytest.raises(StructuralError):
        path_sum(table, 1, 2)


def test_reduced_hessians_match_backward_induction(quadratic4):
    point = quadratic4.exact_response(np.array([0.1, 0.2]))
    table = build_table(quadratic4, point)
    for level in range(1, 4):
        np.testing.assert_allclose(table.reduced_hessians[level], quadratic4.reduced_hessians[level], atol=1e-9)
        grad, hessian = reduced_derivatives(quadratic4, point, level)
        np.testing.assert_allclose(grad, 0.0, atol=1e-9)
        np.testing.assert_allclose(hessian, quadratic4.reduced_hessians[level], atol=1e-9)


def test_top_reduced_gradient_is_the_hypergradient(quadratic4):
    point = quadratic4.exact_response(np.array([-0.3, 0.9]))
    np.testing.assert_allclose(reduced_gradient(quadratic4, point, 0), hypergradient(quadratic4, point), atol=1e-12)


def test_trilevel_consistency_on_quadratics():
    for seed in range(5):
        problem = random_quadratic_problem(seed, [2, 3, 2])
        point = problem.exact_response(np.random.default_rng(seed).normal(size=2))
        assert trilevel_consistency(problem, point) <= 1e-8


def test_exact_fd_mode_tracks_curved_solution_maps(curved):
    point = curved.exact_response([0.5])
    grad = hypergradient(curved, point, table_mode="exact-fd")
    assert grad[0] == pytest.approx(curved.exact_hypergradient(0.5), abs=1e-6)
    assert trilevel_consistency(curved, point, table_mode="exact-fd") <= 1e-6


def test_cg_mode_matches_direct():
    problem = build_stackelberg(StackelbergSpec(dim=4, levels=4))
    point = problem.exact_response(np.full(4, 0.1))
    stats = SolveStats()
    grad = hypergradient(problem, point, SolveMode("cg", cg_iters=3), stats=stats)
    np.testing.assert_allclose(grad, problem.exact_hypergradient(np.full(4, 0.1)), atol=1e-10)
    assert stats.cg_solves > 0


def test_stale_point_names_deepest_violation():
    problem = build_stackelberg(StackelbergSpec(levels=4))
    point = problem.exact_response(np.array([0.2]))
    stale = point.with_level(3, point.values[3] + 0.05)
    with pytest.raises(StalePoint) as e:
        build_table(problem, stale)
    assert e.value.level == 3
    build_table(problem, stale, stationarity_tol=None)


def test_stale_middle_level():
    problem = build_stackelberg(StackelbergSpec(levels=3))
    point = problem.exact_response(np.array([0.2]))
    y = point.values[1] + 0.05
    stale = PointStack([point.values[0], y, 0.5 * (1 - point.values[0] - y)])
    with pytest.raises(StalePoint) as e:
        hypergradient(problem, stale)
    assert e.value.level == 1


def test_incomplete_table(stackelberg):
    with pytest.raises(StructuralError):
        grad_full(stackelberg, stackelberg.zeros(), JacobianTable())


def test_unknown_table_mode(stackelberg):
    with pytest.raises(StructuralError):
        build_table(stackelberg, stackelberg.exact_response(np.zeros(1)), table_mode="newton")


def test_trilevel_consistency_needs_three_levels(quadratic4):
    with pytest.raises(StructuralError):
        trilevel_consistency(quadratic4, quadratic4.exact_response(np.zeros(2)))
