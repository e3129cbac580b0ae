"""
Recursive Jacobian table for problems with any number of levels.

A window (a, s) is the subproblem in which x_a is the free top variable,
levels s..n-1 respond, and every other level is frozen at the point. The
table of window (a, s) is built from window (s, s+1) (x_a frozen) and
window (a, s+1) (x_s frozen). Windows are memoized inside one build, so
the deeper windows shared by both recursions are computed once.

partial(i, j) is the response of x_i to x_j with the levels strictly
between them frozen; total(i, j) follows every dependency path from j to
i. total(i, i) is the identity and is never stored.
"""

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import StalePoint, StructuralError
from .linsolve import SolveMode, SolveStats, solve_spd
from .numderiv import FdConfig, fd_jacobian_of_map
from .problem import MultilevelProblem
from .trilevel import grad_trilevel
from .types import PointStack

logger = logging.getLogger(__name__)

TABLE_MODES = ("gauss-newton", "exact-fd")


@dataclass
class JacobianTable:
    total: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    partial: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    levels_resolved: int = 0
    # Reduced gradient and reduced Hessian of each lower level along the
    # responses of its deeper levels.
    reduced_grads: dict[int, np.ndarray] = field(default_factory=dict)
    reduced_hessians: dict[int, np.ndarray] = field(default_factory=dict)

    def total_or_identity(self, i: int, j: int, dims: list[int]) -> np.ndarray:
        return np.eye(dims[i]) if i == j else self.total[(i, j)]

    def is_complete(self, levels: int) -> bool:
        pairs = [(i, j) for i in range(levels) for j in range(i)]
        return all(p in self.total for p in pairs) and all(p in self.partial for p in pairs)


class _TableBuilder:
    def __init__(
        self,
        problem: MultilevelProblem,
        point: PointStack,
        mode: SolveMode | None,
        table_mode: str,
        stats: SolveStats | None,
        fd_cfg: FdConfig | None,
    ):
        if table_mode not in TABLE_MODES:
            raise StructuralError(f"unknown table mode {table_mode!r}, expected one of {TABLE_MODES}")
        self.problem = problem
        self.point = point
        self.mode = mode
        self.table_mode = table_mode
        self.stats = stats
        self.fd_cfg = fd_cfg
        self.n = problem.levels
        self.total: dict[tuple[int, int], np.ndarray] = {}
        self.partial: dict[tuple[int, int], np.ndarray] = {}
        self._windows: dict[tuple[int, int], dict[int, np.ndarray]] = {}
        self._grads: dict[int, np.ndarray] = {}
        self._dgrads: dict[tuple[int, int], np.ndarray] = {}
        self._hessians: dict[int, np.ndarray] = {}

    def _hess(self, level: int, r: int, c: int) -> np.ndarray:
        return self.problem.objectives[level].hess_block(self.point, r, c)

    def _total(self, i: int, j: int) -> np.ndarray:
        if i == j:
            return np.eye(self.problem.dims[i])
        return self.total[(i, j)]

    def window(self, a: int, s: int) -> dict[int, np.ndarray]:
        """Responses d x_i / d x_a for i in s..n-1 inside window (a, s)."""
        key = (a, s)
        if key in self._windows:
            return self._windows[key]
        logger.debug(f"window: level {a + 1} over levels {s + 1}..{self.n}")
        if s == self.n - 1:
            response = -solve_spd(
                self._hess(s, s, s), self._hess(s, s, a), self.mode, stats=self.stats, level=s
            )
            self.partial[(s, a)] = response
            result = {s: response}
        else:
            self.window(s, s + 1)
            frozen_s = self.window(a, s + 1)
            coupling = self.dgrad(s, a) + sum(
                self.dgrad(s, i) @ frozen_s[i] for i in range(s + 1, self.n)
            )
            response = -solve_spd(self.reduced_hessian(s), coupling, self.mode, stats=self.stats, level=s)
            self.partial[(s, a)] = response
            result = {s: response}
            for i in range(s + 1, self.n):
                result[i] = self.partial[(i, a)] + sum(
                    self.total[(i, j)] @ self.partial[(j, a)] for j in range(s, i)
                )
        if a == s - 1:
            for i, jac in result.items():
                self.total[(i, a)] = jac
        self._windows[key] = result
        return result

    def reduced_gradient(self, s: int) -> np.ndarray:
        """Gradient of f_s along the responses of levels below s."""
        if s not in self._grads:
            f = self.problem.objectives[s]
            if s < self.n - 1:
                self.window(s, s + 1)
            self._grads[s] = sum(
                (self._total(k, s).T @ f.grad_block(self.point, k) for k in range(s, self.n)),
                start=np.zeros(self.problem.dims[s]),
            )
        return self._grads[s]

    def dgrad(self, s: int, i: int) -> np.ndarray:
        """Partial derivative of reduced_gradient(s) along x_i, shape d_s x d_i."""
        key = (s, i)
        if key in self._dgrads:
            return self._dgrads[key]
        if s == self.n - 1:
            value = self._hess(s, s, i)
        elif self.table_mode == "gauss-newton":
            value = sum(self._total(k, s).T @ self._hess(s, k, i) for k in range(s, self.n))
        else:

            def reduced_at(p: PointStack) -> np.ndarray:
                builder = _TableBuilder(self.problem, p, self.mode, self.table_mode, None, self.fd_cfg)
                return builder.reduced_gradient(s)

            value = fd_jacobian_of_map(reduced_at, self.point, i, self.fd_cfg)
        self._dgrads[key] = value
        return value

    def reduced_hessian(self, s: int) -> np.ndarray:
        if s not in self._hessians:
            if s < self.n - 1:
                self.window(s, s + 1)
            hessian = self.dgrad(s, s) + sum(
                (self.dgrad(s, i) @ self.total[(i, s)] for i in range(s + 1, self.n)),
                start=np.zeros((self.problem.dims[s], self.problem.dims[s])),
            )
            self._hessians[s] = 0.5 * (hessian + hessian.T)
        return self._hessians[s]


def _check_stationarity(builder: _TableBuilder, levels: range, tol: float | None):
    """Raise StalePoint for the deepest level whose reduced residual exceeds tol."""
    if tol is None:
        return
    for s in reversed(levels):
        residual = float(np.linalg.norm(builder.reduced_gradient(s)))
        logger.debug(f"level {s + 1} reduced stationarity residual {residual:.3e}")
        if residual > tol:
            raise StalePoint(s, residual, tol)


def build_table(
    problem: MultilevelProblem,
    point: PointStack,
    mode: SolveMode | None = None,
    table_mode: str = "gauss-newton",
    stationarity_tol: float | None = 1e-6,
    stats: SolveStats | None = None,
    fd_cfg: FdConfig | None = None,
) -> JacobianTable:
    """
    Total and partial Jacobians between every pair of levels.

    Args:
        problem: The multilevel problem.
        point: Evaluation point, lower levels at (or near) their optima.
        mode: Linear solve mode for every reduced Hessian solve.
        table_mode: How the reduced gradient of a level is differentiated
            along the other levels. "gauss-newton" differentiates only its
            gradient-block factors (exact when the deeper solution maps are
            affine); "exact-fd" differences the whole reduced gradient with
            the deeper Jacobians recomputed at the shifted points.
        stationarity_tol: Largest accepted reduced residual of levels
            2..n, None to skip the check.
        stats: Optional CG telemetry accumulator.
        fd_cfg: Steps of the exact-fd mode.

    Returns:
        A complete JacobianTable.

    Raises:
        StalePoint: A lower level is further from stationarity than allowed.
        SingularHessian: A reduced Hessian is not positive definite.
    """
    problem.check_point(point)
    builder = _TableBuilder(problem, point, mode, table_mode, stats, fd_cfg)
    n = problem.levels
    _check_stationarity(builder, range(1, n), stationarity_tol)
    builder.window(0, 1)
    table = JacobianTable(
        total=dict(builder.total),
        partial=dict(builder.partial),
        levels_resolved=n,
        reduced_grads={s: builder.reduced_gradient(s) for s in range(1, n)},
        reduced_hessians={s: builder.reduced_hessian(s) for s in range(1, n)},
    )
    logger.debug(f"jacobian table over {n} levels: {len(builder._windows)} windows")
    return table


def grad_full(problem: MultilevelProblem, point: PointStack, table: JacobianTable) -> np.ndarray:
    """df1/dx1 = grad_1 f1 + sum_j total(j, 1)^T grad_j f1."""
    if not all((j, 0) in table.total for j in range(1, problem.levels)):
        raise StructuralError(
            f"jacobian table is incomplete: {table.levels_resolved} of {problem.levels} levels resolved"
        )
    f1 = problem.objectives[0]
    grad = f1.grad_block(point, 0).astype(float)
    for j in range(1, problem.levels):
        grad = grad + table.total[(j, 0)].T @ f1.grad_block(point, j)
    return grad


def hypergradient(
    problem: MultilevelProblem,
    point: PointStack,
    mode: SolveMode | None = None,
    table_mode: str = "gauss-newton",
    stationarity_tol: float | None = 1e-6,
    stats: SolveStats | None = None,
    fd_cfg: FdConfig | None = None,
) -> np.ndarray:
    table = build_table(problem, point, mode, table_mode, stationarity_tol, stats, fd_cfg)
    return grad_full(problem, point, table)


def reduced_gradient(
    problem: MultilevelProblem,
    point: PointStack,
    level: int,
    mode: SolveMode | None = None,
    table_mode: str = "gauss-newton",
    stats: SolveStats | None = None,
) -> np.ndarray:
    """
    Gradient of f_level along the responses of the deeper levels.

    This is the stationarity residual of the level; for the deepest level
    it is the plain partial gradient and for level 0 it is the hypergradient.
    """
    problem.check_point(point)
    return _TableBuilder(problem, point, mode, table_mode, stats, None).reduced_gradient(level)


def reduced_derivatives(
    problem: MultilevelProblem,
    point: PointStack,
    level: int,
    mode: SolveMode | None = None,
    table_mode: str = "gauss-newton",
    stats: SolveStats | None = None,
    fd_cfg: FdConfig | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Reduced gradient and reduced Hessian of a lower level (level >= 1)."""
    problem.check_point(point)
    builder = _TableBuilder(problem, point, mode, table_mode, stats, fd_cfg)
    return builder.reduced_gradient(level), builder.reduced_hessian(level)


def path_sum(table: JacobianTable, i: int, j: int) -> np.ndarray:
    """
    total(i, j) rebuilt as the sum over every increasing level path from j
    to i of the product of partial Jacobians along the path.
    """
    if i <= j:
        raise StructuralError(f"path sums run from a shallower to a deeper level, got {j + 1} -> {i + 1}")
    acc = None
    for k in range(i - j):
        for middle in itertools.combinations(range(j + 1, i), k):
            nodes = (j, *middle, i)
            product = table.partial[(nodes[1], nodes[0])]
            for prev, nxt in zip(nodes[1:], nodes[2:]):
                product = table.partial[(nxt, prev)] @ product
            acc = product if acc is None else acc + product
    return acc


def trilevel_consistency(
    problem: MultilevelProblem,
    point: PointStack,
    mode: SolveMode | None = None,
    table_mode: str = "gauss-newton",
    curvature_mode: str | None = None,
    stationarity_tol: float | None = 1e-6,
) -> float:
    """Largest coordinate gap between grad_full and the closed-form trilevel gradient."""
    if problem.levels != 3:
        raise StructuralError(f"trilevel consistency needs 3 levels, got {problem.levels}")
    f1, f2, f3 = problem.objectives
    closed_form = grad_trilevel(f1, f2, f3, point, mode, curvature_mode, stationarity_tol)
    recursive = hypergradient(problem, point, mode, table_mode, stationarity_tol)
    return float(np.max(np.abs(closed_form - recursive)))
