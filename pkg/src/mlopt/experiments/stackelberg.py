"""
Stackelberg competition: each level sets a quantity and is paid
x_k * (1 - sum of all quantities), so f_k = -x_k^T (1 - sum_j x_j).

Levels play in order, each anticipating the deeper ones. Every follower
plays (1 - sum of shallower quantities) / 2, and the leader optimum is
x_1 = 1/2 per coordinate for any number of levels.
"""

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..problem import DerivativeOracle, MultilevelProblem
from ..types import PointStack


@dataclass(frozen=True)
class StackelbergSpec:
    dim: int = 1
    levels: int = 3

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError(f"stackelberg dimension must be at least 1, got {self.dim}")
        if self.levels < 2:
            raise ConfigError(f"stackelberg game needs at least 2 levels, got {self.levels}")


class StackelbergOracle(DerivativeOracle):
    has_third_order = True

    def __init__(self, level: int, levels: int, dim: int):
        self.level = level
        self.levels = levels
        self.dim = dim

    def _price(self, point: PointStack) -> np.ndarray:
        return 1.0 - np.sum(point.values, axis=0)

    def value(self, point: PointStack) -> float:
        return float(-point.values[self.level] @ self._price(point))

    def grad_block(self, point: PointStack, j: int) -> np.ndarray:
        own = point.values[self.level]
        if j == self.level:
            return own - self._price(point)
        return own.copy()

    def hess_block(self, point: PointStack, r: int, c: int) -> np.ndarray:
        k = self.level
        if r == k and c == k:
            return 2.0 * np.eye(self.dim)
        if r == k or c == k:
            return np.eye(self.dim)
        return np.zeros((self.dim, self.dim))

    def _third_sorted(self, point: PointStack, r: int, c: int, s: int) -> np.ndarray:
        return np.zeros((self.dim, self.dim, self.dim))


class StackelbergProblem(MultilevelProblem):
    def __init__(self, spec: StackelbergSpec):
        self.spec = spec
        super().__init__(
            [spec.dim] * spec.levels,
            [StackelbergOracle(k, spec.levels, spec.dim) for k in range(spec.levels)],
            name=f"stackelberg-{spec.levels}x{spec.dim}",
            reference=np.full(spec.dim, 0.5),
        )

    def exact_response(self, x1: np.ndarray) -> PointStack:
        values = [np.asarray(x1, dtype=float).ravel()]
        placed = values[0].copy()
        for _ in range(1, self.levels):
            follower = 0.5 * (1.0 - placed)
            values.append(follower)
            placed = placed + follower
        return PointStack(values)

    def exact_hypergradient(self, x1: np.ndarray) -> np.ndarray:
        """Derivative of the reduced leader value -x(1 - x) / 2^(n-1)."""
        return (2.0 * np.asarray(x1, dtype=float) - 1.0) / 2.0 ** (self.levels - 1)


def build_stackelberg(spec: StackelbergSpec | None = None) -> StackelbergProblem:
    return StackelbergProblem(spec or StackelbergSpec())
