"""
Multilevel problem abstraction and derivative oracles.

Levels are indexed from 0 internally (level 0 is the top-level leader);
log and error messages print them 1-based.

Block convention: hess_block(point, r, c)[a, b] is the second derivative
with respect to (x_r)_a and (x_c)_b, so hess_block(point, 2, 0) has shape
d_2 x d_0. third_slice follows the same rule with three level indices.
"""

import itertools
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import CapabilityError, NumericError, StructuralError
from .numderiv import FdConfig, fd_grad_block, fd_hess_block
from .types import PointStack

logger = logging.getLogger(__name__)


class DerivativeOracle(ABC):
    """
    Value, gradient blocks, Hessian blocks and (optionally) third-order
    slices of one scalar objective over the stacked levels.

    Oracles are immutable after construction and may be shared across
    threads.
    """

    has_third_order: bool = False

    @abstractmethod
    def value(self, point: PointStack) -> float: ...

    @abstractmethod
    def grad_block(self, point: PointStack, j: int) -> np.ndarray: ...

    @abstractmethod
    def hess_block(self, point: PointStack, r: int, c: int) -> np.ndarray: ...

    def third_slice(self, point: PointStack, r: int, c: int, s: int) -> np.ndarray:
        """
        Rank-3 array T[a, b, e] of third derivatives along (x_r)_a, (x_c)_b, (x_s)_e.

        Subclasses implement _third_sorted for r <= c <= s; other orders
        are served by transposing the sorted slice.
        """
        if not self.has_third_order:
            raise CapabilityError(f"{type(self).__name__} has no third-order derivatives")
        keys = (r, c, s)
        perm = sorted(range(3), key=lambda i: keys[i])
        sorted_slice = self._third_sorted(point, *(keys[p] for p in perm))
        return np.transpose(sorted_slice, axes=np.argsort(perm))

    def _third_sorted(self, point: PointStack, r: int, c: int, s: int) -> np.ndarray:
        raise CapabilityError(f"{type(self).__name__} has no third-order derivatives")


class MultilevelProblem:
    """
    An n-level problem: level i minimizes objectives[i] over x_i given the
    shallower levels, anticipating the responses of the deeper ones.
    """

    def __init__(
        self,
        dims: list[int],
        objectives: list[DerivativeOracle],
        name: str = "",
        reference: np.ndarray | None = None,
    ):
        if len(dims) < 2:
            raise StructuralError(f"a multilevel problem needs at least 2 levels, got {len(dims)}")
        if len(objectives) != len(dims):
            raise StructuralError(
                f"{len(dims)} levels but {len(objectives)} objectives"
            )
        for i, d in enumerate(dims):
            if int(d) < 1:
                raise StructuralError(f"level {i + 1} has dimension {d}", level=i)
        self.dims = [int(d) for d in dims]
        self.objectives = list(objectives)
        self.name = name
        self.reference = None if reference is None else np.asarray(reference, dtype=float)

    @property
    def levels(self) -> int:
        return len(self.dims)

    def check_point(self, point: PointStack):
        if point.levels != self.levels:
            raise StructuralError(
                f"point has {point.levels} levels, problem {self.name or 'unnamed'} has {self.levels}"
            )
        for i, (got, want) in enumerate(zip(point.dims, self.dims)):
            if got != want:
                raise StructuralError(
                    f"level {i + 1} has length {got}, expected {want}", level=i
                )

    def zeros(self) -> PointStack:
        return PointStack.zeros(self.dims)

    def exact_response(self, x1: np.ndarray) -> PointStack:
        """Exact lower-level solution stack for the top-level value x1."""
        raise CapabilityError(f"problem {self.name or 'unnamed'} has no exact responder")

    def reduced_value(self, x1: np.ndarray) -> float:
        """f_1 at the exact lower-level responses to x1."""
        return evaluate(self, 0, self.exact_response(x1))


@dataclass
class SymmetryCheck:
    level: int
    block: str
    deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.deviation <= self.tolerance


@dataclass
class ValidationReport:
    checks: list[SymmetryCheck] = field(default_factory=list)
    # Third-order slices left out because they exceed max_entries.
    skipped: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def max_deviation(self) -> float:
        return max((c.deviation for c in self.checks), default=0.0)

    def failures(self) -> list[SymmetryCheck]:
        return [c for c in self.checks if not c.passed]


def _check_shape(array: np.ndarray, shape: tuple[int, ...], level: int, block: str):
    if np.shape(array) != shape:
        raise StructuralError(
            f"level {level + 1} block {block} has shape {np.shape(array)}, expected {shape}",
            level=level,
            block=block,
        )


def validate(
    problem: MultilevelProblem,
    point: PointStack,
    rel_tol: float = 1e-8,
    max_entries: int = 2_000_000,
) -> ValidationReport:
    """
    Check block shapes, Hessian transpose symmetry and third-slice
    permutation symmetry of every objective at the point.

    Args:
        problem: The problem whose oracles are checked.
        point: Evaluation point.
        rel_tol: Allowed deviation relative to 1 + the block's max magnitude.
        max_entries: Third-order slices with more entries are skipped.

    Returns:
        A report with one check per block pair and objective.
    """
    problem.check_point(point)
    report = ValidationReport()
    n = problem.levels
    dims = problem.dims
    for i, oracle in enumerate(problem.objectives):
        for j in range(n):
            _check_shape(oracle.grad_block(point, j), (dims[j],), i, f"grad({j + 1})")
        for r in range(n):
            for c in range(r, n):
                block = f"hess({r + 1},{c + 1})"
                h_rc = np.asarray(oracle.hess_block(point, r, c))
                h_cr = np.asarray(oracle.hess_block(point, c, r))
                _check_shape(h_rc, (dims[r], dims[c]), i, block)
                _check_shape(h_cr, (dims[c], dims[r]), i, f"hess({c + 1},{r + 1})")
                scale = 1.0 + float(np.max(np.abs(h_rc), initial=0.0))
                report.checks.append(
                    SymmetryCheck(i, block, float(np.max(np.abs(h_rc - h_cr.T), initial=0.0)), rel_tol * scale)
                )
        if not oracle.has_third_order:
            continue
        for keys in itertools.combinations_with_replacement(range(n), 3):
            block = "third({},{},{})".format(*(k + 1 for k in keys))
            if dims[keys[0]] * dims[keys[1]] * dims[keys[2]] > max_entries:
                logger.debug(f"skipping {block} of level {i + 1} objective")
                report.skipped.append(f"level {i + 1} {block}")
                continue
            base = np.asarray(oracle.third_slice(point, *keys))
            _check_shape(base, tuple(dims[k] for k in keys), i, block)
            scale = 1.0 + float(np.max(np.abs(base), initial=0.0))
            deviation = 0.0
            for perm in itertools.permutations(range(3)):
                permuted = oracle.third_slice(point, *(keys[p] for p in perm))
                deviation = max(deviation, float(np.max(np.abs(permuted - base.transpose(perm)), initial=0.0)))
            report.checks.append(SymmetryCheck(i, block, deviation, rel_tol * scale))
    for check in report.failures():
        logger.warning(
            f"level {check.level + 1} {check.block}: asymmetry {check.deviation:.3e} exceeds {check.tolerance:.1e}"
        )
    return report


def evaluate(problem: MultilevelProblem, level: int, point: PointStack) -> float:
    """Value of the objective of the 0-based level at point."""
    if not 0 <= level < problem.levels:
        raise StructuralError(f"level {level + 1} outside 1..{problem.levels}", level=level)
    value = float(problem.objectives[level].value(point))
    if not np.isfinite(value):
        raise NumericError(f"level {level + 1} objective is {value} at the given point", level=level)
    return value


class FiniteDifferenceOracle(DerivativeOracle):
    """Serves gradient and Hessian blocks of a value-only objective by central differences."""

    def __init__(self, value_fn: Callable[[PointStack], float], cfg: FdConfig | None = None):
        self.value_fn = value_fn
        self.cfg = cfg or FdConfig()

    def value(self, point: PointStack) -> float:
        return float(self.value_fn(point))

    def grad_block(self, point: PointStack, j: int) -> np.ndarray:
        return fd_grad_block(self.value, point, j, self.cfg)

    def hess_block(self, point: PointStack, r: int, c: int) -> np.ndarray:
        return fd_hess_block(self.value, point, r, c, self.cfg)
