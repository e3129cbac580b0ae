import numpy as np
import pytest

from conftest import write_wine_csv
from mlopt.baselines import FdHyperConfig, fd_hypergradient, vgd_gradient
from mlopt.errors import ConfigError, StructuralError
from mlopt.experiments.hyperopt import LAMBDA, POISON, THETA, HyperoptSpec, build_hyperopt
from mlopt.experiments.wine import load_wine, split
from mlopt.numderiv import fd_grad_block, fd_hess_block
from mlopt.optim import SolverConfig, newton_lower_solve, run
from mlopt.problem import evaluate, validate
from mlopt.trilevel import grad_trilevel
from mlopt.types import PointStack


@pytest.fixture
def small(wine_csv):
    spec = HyperoptSpec(m=5, n=4)
    train, val = split(load_wine(wine_csv), spec.m, spec.n, seed=0)
    return build_hyperopt(spec, train, val)


@pytest.fixture
def sample_point(small):
    rng = np.random.default_rng(3)
    d = small.dims[THETA]
    # Keep theta away from the smoothed kink.
    theta = rng.uniform(0.2, 1.0, size=d) * rng.choice([-1.0, 1.0], size=d)
    return PointStack([[0.3], rng.normal(scale=0.1, size=small.dims[POISON]), theta])


def test_shapes(small):
    assert small.dims == [1, 4 * 11, 11]
    assert small.levels == 3
    assert small.name == "hyperopt-red"
    assert small.reference is None


def test_values_at_zero(small):
    point = small.zeros()
    y = small.train.targets
    assert evaluate(small, 0, point) == pytest.approx(float(small.val.targets @ small.val.targets) / 5)
    assert evaluate(small, 1, point) == pytest.approx(-float(y @ y) / 4)
    # exp(0)/d * d * sqrt(delta)
    assert evaluate(small, 2, point) == pytest.approx(float(y @ y) / 4 + 1e-3)


def test_oracles_are_symmetric(small, sample_point):
    report = validate(small, sample_point)
    assert report.passed, report.failures()
    assert not report.skipped


@pytest.mark.parametrize("level", [0, 1, 2])
def test_gradients_match_finite_differences(small, sample_point, level):
    oracle = small.objectives[level]
    for block in (LAMBDA, POISON, THETA):
        np.testing.assert_allclose(
            oracle.grad_block(sample_point, block), fd_grad_block(oracle.value, sample_point, block), rtol=1e-6, atol=1e-6
        )


@pytest.mark.parametrize("level", [1, 2])
def test_hessians_match_finite_differences(small, sample_point, level):
    oracle = small.objectives[level]
    for r, c in ((LAMBDA, LAMBDA), (THETA, THETA), (THETA, POISON), (LAMBDA, THETA)):
        np.testing.assert_allclose(
            oracle.hess_block(sample_point, r, c), fd_hess_block(oracle.value, sample_point, r, c), rtol=1e-4, atol=1e-4
        )


def test_vanilla_gradient_ignores_lambda(small, sample_point):
    np.testing.assert_array_equal(vgd_gradient(small.objectives[0], sample_point), [0.0])


def test_short_run_stays_finite(wine_csv):
    # More training rows than features keeps the weight Hessian well conditioned.
    spec = HyperoptSpec(m=10, n=20)
    problem = build_hyperopt(spec, *split(load_wine(wine_csv), spec.m, spec.n, seed=1))
    trace = run(problem, SolverConfig(outer_steps=2))
    assert len(trace) == 2
    assert all(np.isfinite(r.f1) and np.isfinite(r.grad_norm_sq) for r in trace)
    assert all(r.mse_to_ref is None for r in trace)


def test_split_sizes_must_match_the_spec(wine_csv):
    train, val = split(load_wine(wine_csv), 5, 4, seed=0)
    with pytest.raises(StructuralError):
        build_hyperopt(HyperoptSpec(m=6, n=4), train, val)


@pytest.mark.parametrize("kwargs", [{"m": 0}, {"n": -1}, {"c": 0.0}, {"l1_smooth_delta": 0.0}])
def test_invalid_spec(kwargs):
    with pytest.raises(ConfigError):
        HyperoptSpec(**kwargs)


@pytest.fixture(scope="module")
def full_size(tmp_path_factory):
    path = write_wine_csv(tmp_path_factory.mktemp("wine") / "winequality-red.csv")
    spec = HyperoptSpec()
    return build_hyperopt(spec, *split(load_wine(path), spec.m, spec.n, seed=0))


@pytest.mark.slow
@pytest.mark.parametrize("lam", [-2.0, -1.0, 0.0, 0.5, 1.0])
def test_implicit_gradient_matches_exact_finite_differences(full_size, lam):
    x1 = np.array([lam])
    point = newton_lower_solve(full_size, x1, full_size.zeros(), table_mode="exact-fd")
    implicit = grad_trilevel(*full_size.objectives, point, stationarity_tol=None)
    fd_cfg = FdHyperConfig(exact=True, table_mode="exact-fd")
    reference = fd_hypergradient(full_size, x1, point, SolverConfig(), fd_cfg)
    np.testing.assert_allclose(implicit, reference, rtol=5e-3, atol=1e-6)
