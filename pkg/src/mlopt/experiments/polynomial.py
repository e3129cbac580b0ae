"""
Polynomial test families with known structure: quadratic problems with
exact affine responders, the nearest-neighbour quadratic chain, and cubic
trilevel problems with analytic third derivatives.
"""

import itertools
import logging

import numpy as np

from ..errors import SingularHessian, StructuralError
from ..linsolve import solve_spd
from ..problem import DerivativeOracle, MultilevelProblem
from ..types import PointStack

logger = logging.getLogger(__name__)


def _offsets(dims: list[int]) -> list[int]:
    return [0, *itertools.accumulate(dims)]


def _symmetric3(C: np.ndarray) -> np.ndarray:
    return sum(C.transpose(p) for p in itertools.permutations(range(3))) / 6.0


class PolynomialOracle(DerivativeOracle):
    """
    f(v) = 1/2 v^T A v + b^T v + c + 1/6 C(v, v, v) over the stacked vector v.
    """

    has_third_order = True

    def __init__(
        self,
        dims: list[int],
        A: np.ndarray,
        b: np.ndarray | None = None,
        c: float = 0.0,
        C: np.ndarray | None = None,
    ):
        size = sum(dims)
        A = np.asarray(A, dtype=float)
        if A.shape != (size, size):
            raise StructuralError(f"quadratic term has shape {A.shape}, expected {(size, size)}")
        self.dims = list(dims)
        self.offsets = _offsets(dims)
        self.A = 0.5 * (A + A.T)
        self.b = np.zeros(size) if b is None else np.asarray(b, dtype=float)
        self.c = float(c)
        self.C = None if C is None else _symmetric3(np.asarray(C, dtype=float))

    def _slice(self, level: int) -> slice:
        return slice(self.offsets[level], self.offsets[level + 1])

    def value(self, point: PointStack) -> float:
        v = point.flat()
        value = 0.5 * v @ self.A @ v + self.b @ v + self.c
        if self.C is not None:
            value += np.einsum("abc,a,b,c->", self.C, v, v, v) / 6.0
        return float(value)

    def grad_block(self, point: PointStack, j: int) -> np.ndarray:
        v = point.flat()
        rows = self._slice(j)
        grad = self.A[rows] @ v + self.b[rows]
        if self.C is not None:
            grad = grad + 0.5 * np.einsum("abc,b,c->a", self.C[rows], v, v)
        return grad

    def hess_block(self, point: PointStack, r: int, c: int) -> np.ndarray:
        rows, cols = self._slice(r), self._slice(c)
        block = self.A[rows, cols].copy()
        if self.C is not None:
            block += np.einsum("abc,c->ab", self.C[rows, cols], point.flat())
        return block

    def _third_sorted(self, point: PointStack, r: int, c: int, s: int) -> np.ndarray:
        if self.C is None:
            return np.zeros((self.dims[r], self.dims[c], self.dims[s]))
        return self.C[self._slice(r), self._slice(c), self._slice(s)].copy()


class QuadraticProblem(MultilevelProblem):
    """
    Every level minimizes 1/2 v^T A_k v + b_k^T v + c_k over its own block.

    The responses of the lower levels are affine in x1; they are found by
    backward induction at construction, which also yields the exact reduced
    Hessian of every lower level and the exact reduced top-level quadratic.
    """

    def __init__(
        self,
        dims: list[int],
        hessians: list[np.ndarray],
        linears: list[np.ndarray] | None = None,
        constants: list[float] | None = None,
        name: str = "quadratic",
    ):
        n = len(dims)
        linears = linears if linears is not None else [np.zeros(sum(dims))] * n
        constants = constants if constants is not None else [0.0] * n
        if not len(hessians) == len(linears) == len(constants) == n:
            raise StructuralError(f"{n} levels need {n} quadratic, linear and constant terms")
        oracles = [PolynomialOracle(dims, A, b, c) for A, b, c in zip(hessians, linears, constants)]
        super().__init__(dims, oracles, name=name)
        self.reduced_hessians: dict[int, np.ndarray] = {}
        self._response_map, self._response_offset = self._backward_induction()

    def _backward_induction(self) -> tuple[np.ndarray, np.ndarray]:
        offsets = _offsets(self.dims)
        # v = S @ prefix + s, prefix = levels shallower than the one being solved
        S = np.eye(offsets[-1])
        s = np.zeros(offsets[-1])
        for k in range(self.levels - 1, 0, -1):
            oracle = self.objectives[k]
            U = S[:, : offsets[k]]
            W = S[:, offsets[k] : offsets[k + 1]]
            H = W.T @ oracle.A @ W
            H = 0.5 * (H + H.T)
            self.reduced_hessians[k] = H
            M = -solve_spd(H, W.T @ oracle.A @ U, level=k)
            m = -solve_spd(H, W.T @ (oracle.A @ s + oracle.b), level=k)
            S = U + W @ M
            s = s + W @ m
        return S, s

    def exact_response(self, x1: np.ndarray) -> PointStack:
        v = self._response_map @ np.asarray(x1, dtype=float).ravel() + self._response_offset
        offsets = _offsets(self.dims)
        return PointStack([v[offsets[k] : offsets[k + 1]] for k in range(self.levels)])

    def response_jacobian(self) -> np.ndarray:
        """d v / d x1 of the exact responder, stacked over all levels."""
        return self._response_map.copy()

    def reduced_top_quadratic(self) -> tuple[np.ndarray, np.ndarray, float]:
        """(Q, q, c0) with f1(x1, responses) = 1/2 x1^T Q x1 + q^T x1 + c0."""
        top = self.objectives[0]
        S, s = self._response_map, self._response_offset
        Q = S.T @ top.A @ S
        q = S.T @ (top.A @ s + top.b)
        c0 = 0.5 * s @ top.A @ s + top.b @ s + top.c
        return 0.5 * (Q + Q.T), q, float(c0)


def _random_level_hessian(rng: np.random.Generator, dims: list[int], level: int, coupling: float) -> np.ndarray:
    size = sum(dims)
    G = rng.normal(size=(size, size)) * coupling / np.sqrt(size)
    A = 0.5 * (G + G.T)
    own = slice(sum(dims[:level]), sum(dims[: level + 1]))
    B = rng.normal(size=(dims[level], dims[level]))
    A[own, own] = B @ B.T / dims[level] + np.eye(dims[level])
    return A


def random_quadratic_problem(
    seed: int,
    dims: list[int],
    nonnegative_top: bool = False,
    coupling: float = 0.5,
    min_eigenvalue: float = 0.1,
    max_tries: int = 200,
) -> QuadraticProblem:
    """
    Seeded random quadratic problem whose lower-level reduced Hessians are
    all positive definite with eigenvalues at least min_eigenvalue.

    With nonnegative_top the top objective is 1/2 |K v - t|^2 with K
    invertible, so it is nonnegative and its reduced quadratic is positive
    definite.
    """
    rng = np.random.default_rng(seed)
    size = sum(dims)
    n = len(dims)
    for attempt in range(max_tries):
        hessians = [_random_level_hessian(rng, dims, k, coupling) for k in range(n)]
        linears = [rng.normal(size=size) for _ in range(n)]
        constants = [0.0] * n
        if nonnegative_top:
            K = rng.normal(size=(size, size)) / np.sqrt(size) + np.eye(size)
            t = rng.normal(size=size)
            hessians[0] = K.T @ K
            linears[0] = -K.T @ t
            constants[0] = 0.5 * float(t @ t)
        try:
            problem = QuadraticProblem(dims, hessians, linears, constants, name=f"quadratic-{seed}")
        except SingularHessian:
            continue
        if all(np.linalg.eigvalsh(H)[0] >= min_eigenvalue for H in problem.reduced_hessians.values()):
            if nonnegative_top and np.linalg.eigvalsh(problem.reduced_top_quadratic()[0])[0] <= 1e-6:
                continue
            logger.debug(f"quadratic problem seed {seed} accepted after {attempt + 1} draws")
            return problem
    raise StructuralError(f"no admissible quadratic problem for seed {seed} in {max_tries} draws")


def quadratic_chain(levels: int = 4, dim: int = 2) -> QuadraticProblem:
    """
    f_i = 1/2 |x_i|^2 + x_i^T x_(i-1) for the lower levels and
    f_1 = 1/2 |x_1|^2 + x_1^T x_n on top, so every response is x_i = -x_(i-1).
    """
    dims = [dim] * levels
    size = dim * levels
    eye = np.eye(dim)

    def block(A: np.ndarray, r: int, c: int, value: np.ndarray):
        A[r * dim : (r + 1) * dim, c * dim : (c + 1) * dim] = value

    hessians = []
    for k in range(levels):
        A = np.zeros((size, size))
        block(A, k, k, eye)
        partner = levels - 1 if k == 0 else k - 1
        block(A, k, partner, eye)
        block(A, partner, k, eye)
        hessians.append(A)
    return QuadraticProblem(dims, hessians, name=f"chain-{levels}x{dim}")


def random_cubic_trilevel(
    seed: int,
    dims: tuple[int, int, int] = (2, 2, 2),
    cubic_scale: float = 0.1,
    coupling: float = 0.5,
) -> MultilevelProblem:
    """Three levels of PolynomialOracle with small random cubic terms."""
    rng = np.random.default_rng(seed)
    dims = list(dims)
    size = sum(dims)
    oracles = []
    for k in range(3):
        A = _random_level_hessian(rng, dims, k, coupling)
        b = rng.normal(size=size) * 0.5
        C = rng.normal(size=(size, size, size)) * cubic_scale
        oracles.append(PolynomialOracle(dims, A, b, 0.0, C))
    return MultilevelProblem(dims, oracles, name=f"cubic-{seed}")
