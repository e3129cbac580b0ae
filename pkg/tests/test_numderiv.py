import numpy as np
import pytest

from mlopt.errors import ConfigError, NumericError
from mlopt.experiments.polynomial import random_cubic_trilevel
from mlopt.numderiv import FdConfig, fd_grad_block, fd_hess_block, fd_jacobian_of_map
from mlopt.types import PointStack


@pytest.fixture
def cubic():
    return random_cubic_trilevel(1)


@pytest.fixture
def sample_point():
    return PointStack([[0.2, -0.3], [0.5, 0.1], [-0.4, 0.8]])


def test_gradient_blocks_match_analytic(cubic, sample_point):
    for oracle in cubic.objectives:
        for level in range(3):
            np.testing.assert_allclose(
                fd_grad_block(oracle.value, sample_point, level), oracle.grad_block(sample_point, level), atol=1e-6
            )


def test_hessian_blocks_match_analytic(cubic, sample_point):
    oracle = cubic.objectives[1]
    for r in range(3):
        for c in range(3):
            np.testing.assert_allclose(
                fd_hess_block(oracle.value, sample_point, r, c), oracle.hess_block(sample_point, r, c), atol=1e-4
            )


def test_diagonal_hessian_blocks_are_symmetric(cubic, sample_point):
    block = fd_hess_block(cubic.objectives[0].value, sample_point, 2, 2)
    np.testing.assert_array_equal(block, block.T)


def test_jacobian_of_linear_map():
    M = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.0]])
    point = PointStack([[1.0, 1.0], [0.3, -0.2]])
    jac = fd_jacobian_of_map(lambda p: M @ p.values[1], point, 1)
    np.testing.assert_allclose(jac, M, atol=1e-8)


def test_jacobian_errors_carry_the_coordinate():
    def explode(p):
        raise NumericError("lower solve failed")

    with pytest.raises(NumericError) as e:
        fd_jacobian_of_map(explode, PointStack([[0.0], [0.0, 0.0]]), 1)
    assert e.value.coordinate == 0
    assert any("coordinate 0" in note for note in e.value.__notes__)


def test_non_finite_sample_is_reported():
    point = PointStack([[0.0, 1.0]])

    def f(p):
        return np.inf if p.values[0][1] > 1.0 else 0.0

    with pytest.raises(NumericError) as e:
        fd_grad_block(f, point, 0)
    assert e.value.coordinate == 1


def test_step_scales_with_magnitude():
    cfg = FdConfig()
    assert cfg.step(0.0) == pytest.approx(1e-5)
    assert cfg.step(-100.0) == pytest.approx(1e-5 + 1e-3)
    assert cfg.hess_step(0.0) == pytest.approx(1e-4)


@pytest.mark.parametrize(
    "kwargs", [{"step_abs": 0.0}, {"step_rel": -1.0}, {"hess_step_abs": -1e-4}, {"scheme": "forward"}]
)
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        FdConfig(**kwargs)
