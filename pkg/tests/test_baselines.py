import numpy as np
import pytest

from mlopt.baselines import FdHyperConfig, fd_hypergradient, vgd_gradient
from mlopt.errors import ConfigError, DivergedLowerLevel
from mlopt.experiments.stackelberg import StackelbergSpec, build_stackelberg
from mlopt.optim import SolverConfig


def test_vgd_is_the_partial_gradient(stackelberg):
    point = stackelberg.exact_response(np.array([0.2]))
    # f1_x = x - (1 - x - y - z) with y = 0.4, z = 0.2
    np.testing.assert_allclose(vgd_gradient(stackelberg.objectives[0], point), [0.0], atol=1e-15)
    np.testing.assert_allclose(vgd_gradient(stackelberg.objectives[0], stackelberg.zeros()), [-1.0])


@pytest.mark.parametrize("x", [0.0, 0.3, 0.8])
def test_exact_fd_matches_closed_form(stackelberg, x):
    x1 = np.array([x])
    grad = fd_hypergradient(
        stackelberg, x1, stackelberg.zeros(), SolverConfig(), FdHyperConfig(exact=True)
    )
    np.testing.assert_allclose(grad, stackelberg.exact_hypergradient(x1), atol=1e-8)


def test_threads_give_the_same_gradient():
    problem = build_stackelberg(StackelbergSpec(dim=4, levels=4))
    x1 = np.array([0.1, 0.2, 0.3, 0.4])
    warm = problem.exact_response(x1)
    cfg = SolverConfig(inner_schedule=(30, 3, 3), lr_inner=0.1)
    serial = fd_hypergradient(problem, x1, warm, cfg, FdHyperConfig(workers=1))
    threaded = fd_hypergradient(problem, x1, warm, cfg, FdHyperConfig(workers=4))
    np.testing.assert_allclose(threaded, serial, rtol=1e-13, atol=1e-15)


def test_truncated_solve_uses_the_warm_start(stackelberg):
    x1 = np.array([0.2])
    cfg = SolverConfig(inner_schedule=(30, 3), lr_inner=0.1)
    grad = fd_hypergradient(stackelberg, x1, stackelberg.exact_response(x1), cfg)
    assert grad.shape == (1,)
    assert np.isfinite(grad).all()


def test_diverging_shift_names_the_coordinate(stackelberg):
    cfg = SolverConfig(lr_inner=10.0)
    with pytest.raises(DivergedLowerLevel) as e:
        fd_hypergradient(stackelberg, np.array([0.2]), stackelberg.zeros(), cfg, FdHyperConfig())
    assert e.value.coordinate == 0
    assert any("top-level coordinate 0" in note for note in e.value.__notes__)


def test_default_config_follows_the_solver_config(stackelberg):
    cfg = SolverConfig(fd_step=1e-4, lr_inner=0.1)
    x1 = np.array([0.4])
    grad = fd_hypergradient(stackelberg, x1, stackelberg.exact_response(x1), cfg)
    assert np.isfinite(grad).all()


@pytest.mark.parametrize("kwargs", [{"step": 0.0}, {"workers": 0}])
def test_invalid_fd_config(kwargs):
    with pytest.raises(ConfigError):
        FdHyperConfig(**kwargs)
