"""
Comparison hypergradients: the vanilla partial gradient and central
differences of the reduced top-level value.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, MloptError, NumericError
from .optim import SolverConfig, nested_lower_solve, newton_lower_solve
from .problem import DerivativeOracle, MultilevelProblem, evaluate
from .types import PointStack

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FdHyperConfig:
    # Coordinate k is shifted by step * (1 + |x_k|).
    step: float = 1e-3
    # Solve the lower levels exactly (nested Newton) instead of with the
    # run's truncated schedule.
    exact: bool = False
    exact_tol: float = 1e-10
    # Reduced Hessians of the exact solver, see nlevel.build_table.
    table_mode: str = "gauss-newton"
    workers: int = 1

    def __post_init__(self):
        if self.step <= 0:
            raise ConfigError(f"fd hypergradient step must be positive, got {self.step}")
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}")


def vgd_gradient(f1: DerivativeOracle, point: PointStack) -> np.ndarray:
    """Partial gradient of f1 in x1, ignoring every implicit dependence."""
    return np.asarray(f1.grad_block(point, 0), dtype=float)


def fd_hypergradient(
    problem: MultilevelProblem,
    x1: np.ndarray,
    warm: PointStack,
    cfg: SolverConfig,
    fd_cfg: FdHyperConfig | None = None,
) -> np.ndarray:
    """
    Central differences of x1 -> f1(x1, lower-solve(x1)).

    Every shifted evaluation re-solves the lower levels from its own copy of
    warm, either with cfg's truncated schedule or exactly. The 2 * d1 shifted
    evaluations run on fd_cfg.workers threads.

    Raises:
        DivergedLowerLevel: A shifted lower solve diverged; the error carries
            the coordinate.
    """
    fd_cfg = fd_cfg or FdHyperConfig(cfg.fd_step, workers=cfg.fd_workers)
    x1 = np.asarray(x1, dtype=float)
    steps = fd_cfg.step * (1 + np.abs(x1))

    def reduced_value(task: tuple[int, float]) -> float:
        k, sign = task
        shifted = x1.copy()
        shifted[k] += sign * steps[k]
        try:
            if fd_cfg.exact:
                lower = newton_lower_solve(
                    problem, shifted, warm.copy(), tol=fd_cfg.exact_tol, table_mode=fd_cfg.table_mode
                )
            else:
                lower = nested_lower_solve(problem, shifted, warm.copy(), cfg)
            return evaluate(problem, 0, lower)
        except MloptError as e:
            if isinstance(e, NumericError) and e.coordinate is None:
                e.coordinate = k
            e.add_note(f"while shifting top-level coordinate {k}")
            raise

    tasks = [(k, sign) for k in range(x1.size) for sign in (1.0, -1.0)]
    if fd_cfg.workers == 1:
        values = [reduced_value(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=fd_cfg.workers) as executor:
            values = list(executor.map(reduced_value, tasks))
    values = np.asarray(values).reshape(x1.size, 2)
    grad = (values[:, 0] - values[:, 1]) / (2 * steps)
    logger.debug(f"fd hypergradient over {x1.size} coordinates, {len(tasks)} lower solves")
    return grad
