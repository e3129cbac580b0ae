"""
Hyperparameter optimization under data poisoning.

Levels: the regularization weight lambda (1 value), the attacker's
poisoning P of the training features (n x d, flattened row-major) and the
model weights theta (d values).

    f1 = 1/m |y_val - X_val theta|^2
    f2 = -1/n |y - (X + P) theta|^2 + c/(n d) |P|^2
    f3 =  1/n |y - (X + P) theta|^2 + exp(lambda)/d * sum_j sqrt(theta_j^2 + delta)

The last term is a twice differentiable stand-in for the L1 norm.
"""

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, StructuralError
from ..problem import DerivativeOracle, MultilevelProblem
from ..types import PointStack
from .wine import Dataset

LAMBDA, POISON, THETA = 0, 1, 2


@dataclass(frozen=True)
class HyperoptSpec:
    m: int = 100
    n: int = 40
    c: float = 100.0
    l1_smooth_delta: float = 1e-6

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ConfigError(f"validation and training sizes must be positive, got m={self.m}, n={self.n}")
        if self.c <= 0:
            raise ConfigError(f"attacker penalty must be positive, got {self.c}")
        if self.l1_smooth_delta <= 0:
            raise ConfigError(f"smoothing delta must be positive, got {self.l1_smooth_delta}")


def _zeros(dims: list[int], *levels: int) -> np.ndarray:
    return np.zeros(tuple(dims[k] for k in levels))


class PoisonedFit:
    """1/n |y - (X + P) theta|^2 and its derivatives in (P, theta)."""

    def __init__(self, X: np.ndarray, y: np.ndarray):
        self.X = X
        self.y = y
        self.n, self.d = X.shape
        self.dims = [1, self.n * self.d, self.d]

    def parts(self, point: PointStack) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        theta = point.values[THETA]
        M = self.X + point.values[POISON].reshape(self.n, self.d)
        return M, self.y - M @ theta, theta

    def value(self, point: PointStack) -> float:
        _, r, _ = self.parts(point)
        return float(r @ r) / self.n

    def grad_block(self, point: PointStack, j: int) -> np.ndarray:
        M, r, theta = self.parts(point)
        match j:
            case 1:
                return -(2 / self.n) * np.outer(r, theta).ravel()
            case 2:
                return -(2 / self.n) * M.T @ r
        return np.zeros(self.dims[j])

    def hess_block(self, point: PointStack, r_: int, c_: int) -> np.ndarray:
        M, r, theta = self.parts(point)
        n, d = self.n, self.d
        match (r_, c_):
            case (2, 2):
                return (2 / n) * M.T @ M
            case (1, 1):
                return (2 / n) * np.kron(np.eye(n), np.outer(theta, theta))
            case (2, 1):
                block = np.einsum("be,a->eab", np.eye(d), r) - np.einsum("ae,b->eab", M, theta)
                return -(2 / n) * block.reshape(d, n * d)
            case (1, 2):
                return self.hess_block(point, 2, 1).T
        return _zeros(self.dims, r_, c_)

    def third_sorted(self, point: PointStack, r_: int, c_: int, s_: int) -> np.ndarray:
        M, _, theta = self.parts(point)
        n, d = self.n, self.d
        match (r_, c_, s_):
            case (1, 1, 2):
                eye_n, eye_d = np.eye(n), np.eye(d)
                block = np.einsum("ac,be,f->abcfe", eye_n, eye_d, theta) + np.einsum(
                    "ac,fe,b->abcfe", eye_n, eye_d, theta
                )
                return (2 / n) * block.reshape(n * d, n * d, d)
            case (1, 2, 2):
                eye_d = np.eye(d)
                block = np.einsum("qa,pe->pqae", eye_d, M) + np.einsum("qe,pa->pqae", eye_d, M)
                return (2 / n) * block.reshape(n * d, d, d)
        return _zeros(self.dims, r_, c_, s_)


class SmoothL1Penalty:
    """exp(lambda)/d * sum_j sqrt(theta_j^2 + delta) and its derivatives in (lambda, theta)."""

    def __init__(self, d: int, n: int, delta: float):
        self.d = d
        self.delta = delta
        self.dims = [1, n * d, d]

    def parts(self, point: PointStack) -> tuple[float, np.ndarray, np.ndarray]:
        theta = point.values[THETA]
        weight = float(np.exp(point.values[LAMBDA][0])) / self.d
        return weight, theta, np.sqrt(theta**2 + self.delta)

    def value(self, point: PointStack) -> float:
        weight, _, root = self.parts(point)
        return weight * float(root.sum())

    def grad_block(self, point: PointStack, j: int) -> np.ndarray:
        weight, theta, root = self.parts(point)
        match j:
            case 0:
                return np.array([weight * root.sum()])
            case 2:
                return weight * theta / root
        return np.zeros(self.dims[j])

    def hess_block(self, point: PointStack, r_: int, c_: int) -> np.ndarray:
        weight, theta, root = self.parts(point)
        match (r_, c_):
            case (0, 0):
                return np.array([[weight * root.sum()]])
            case (0, 2):
                return (weight * theta / root)[None, :]
            case (2, 0):
                return (weight * theta / root)[:, None]
            case (2, 2):
                return np.diag(weight * self.delta / root**3)
        return _zeros(self.dims, r_, c_)

    def third_sorted(self, point: PointStack, r_: int, c_: int, s_: int) -> np.ndarray:
        weight, theta, root = self.parts(point)
        match (r_, c_, s_):
            case (0, 0, 0):
                return np.array([[[weight * root.sum()]]])
            case (0, 0, 2):
                return (weight * theta / root).reshape(1, 1, -1)
            case (0, 2, 2):
                return np.diag(weight * self.delta / root**3)[None, :, :]
            case (2, 2, 2):
                out = np.zeros((self.d, self.d, self.d))
                idx = np.arange(self.d)
                out[idx, idx, idx] = -3 * weight * self.delta * theta / root**5
                return out
        return _zeros(self.dims, r_, c_, s_)


class ValidationLoss(DerivativeOracle):
    has_third_order = True

    def __init__(self, X_val: np.ndarray, y_val: np.ndarray, dims: list[int]):
        self.X = X_val
        self.y = y_val
        self.m = y_val.size
        self.dims = dims

    def value(self, point: PointStack) -> float:
        r = self.y - self.X @ point.values[THETA]
        return float(r @ r) / self.m

    def grad_block(self, point: PointStack, j: int) -> np.ndarray:
        if j != THETA:
            return np.zeros(self.dims[j])
        return -(2 / self.m) * self.X.T @ (self.y - self.X @ point.values[THETA])

    def hess_block(self, point: PointStack, r: int, c: int) -> np.ndarray:
        if r == THETA and c == THETA:
            return (2 / self.m) * self.X.T @ self.X
        return _zeros(self.dims, r, c)

    def _third_sorted(self, point: PointStack, r: int, c: int, s: int) -> np.ndarray:
        return _zeros(self.dims, r, c, s)


class AttackerLoss(DerivativeOracle):
    """Negated data fit plus the penalty on the poisoning magnitude."""

    has_third_order = True

    def __init__(self, fit: PoisonedFit, c: float):
        self.fit = fit
        self.scale = 2 * c / (fit.n * fit.d)

    def value(self, point: PointStack) -> float:
        P = point.values[POISON]
        return -self.fit.value(point) + 0.5 * self.scale * float(P @ P)

    def grad_block(self, point: PointStack, j: int) -> np.ndarray:
        grad = -self.fit.grad_block(point, j)
        if j == POISON:
            grad = grad + self.scale * point.values[POISON]
        return grad

    def hess_block(self, point: PointStack, r: int, c: int) -> np.ndarray:
        block = -self.fit.hess_block(point, r, c)
        if r == POISON and c == POISON:
            block = block + self.scale * np.eye(block.shape[0])
        return block

    def _third_sorted(self, point: PointStack, r: int, c: int, s: int) -> np.ndarray:
        return -self.fit.third_sorted(point, r, c, s)


class RegularizedFit(DerivativeOracle):
    has_third_order = True

    def __init__(self, fit: PoisonedFit, penalty: SmoothL1Penalty):
        self.fit = fit
        self.penalty = penalty

    def value(self, point: PointStack) -> float:
        return self.fit.value(point) + self.penalty.value(point)

    def grad_block(self, point: PointStack, j: int) -> np.ndarray:
        return self.fit.grad_block(point, j) + self.penalty.grad_block(point, j)

    def hess_block(self, point: PointStack, r: int, c: int) -> np.ndarray:
        return self.fit.hess_block(point, r, c) + self.penalty.hess_block(point, r, c)

    def _third_sorted(self, point: PointStack, r: int, c: int, s: int) -> np.ndarray:
        return self.fit.third_sorted(point, r, c, s) + self.penalty.third_sorted(point, r, c, s)


class HyperoptProblem(MultilevelProblem):
    def __init__(self, spec: HyperoptSpec, train: Dataset, val: Dataset):
        if train.rows != spec.n or val.rows != spec.m:
            raise StructuralError(
                f"expected {spec.n} training and {spec.m} validation rows, got {train.rows} and {val.rows}"
            )
        if train.dim != val.dim:
            raise StructuralError(f"training has {train.dim} features, validation {val.dim}")
        d = train.dim
        dims = [1, spec.n * d, d]
        fit = PoisonedFit(train.features, train.targets)
        super().__init__(
            dims,
            [
                ValidationLoss(val.features, val.targets, dims),
                AttackerLoss(fit, spec.c),
                RegularizedFit(fit, SmoothL1Penalty(d, spec.n, spec.l1_smooth_delta)),
            ],
            name=f"hyperopt-{train.variant}",
        )
        self.spec = spec
        self.train = train
        self.val = val


def build_hyperopt(spec: HyperoptSpec, train: Dataset, val: Dataset) -> HyperoptProblem:
    """Three-level poisoning problem over the given splits, started from all zeros."""
    return HyperoptProblem(spec, train, val)
