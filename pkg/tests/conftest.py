import pathlib

import numpy as np
import pytest

from mlopt.experiments.polynomial import quadratic_chain, random_quadratic_problem
from mlopt.experiments.stackelberg import StackelbergSpec, build_stackelberg
from mlopt.problem import DerivativeOracle, MultilevelProblem
from mlopt.types import PointStack


class _Scalar(DerivativeOracle):
    """Objective over three scalar levels given by its derivative tables."""

    has_third_order = True

    def _xyz(self, point: PointStack) -> tuple[float, float, float]:
        return tuple(float(v[0]) for v in point.values)

    def grad_block(self, point: PointStack, j: int) -> np.ndarray:
        return np.array([self.grad(*self._xyz(point))[j]])

    def hess_block(self, point: PointStack, r: int, c: int) -> np.ndarray:
        return np.array([[self.hess(*self._xyz(point))[min(r, c)][max(r, c)]]])

    def _third_sorted(self, point: PointStack, r: int, c: int, s: int) -> np.ndarray:
        return np.array([[[self.third(*self._xyz(point)).get((r, c, s), 0.0)]]])


class Follower(_Scalar):
    """f3 = 1/2 (z - x y)^2, so z follows x y."""

    def value(self, point):
        x, y, z = self._xyz(point)
        return 0.5 * (z - x * y) ** 2

    def grad(self, x, y, z):
        r = z - x * y
        return (-y * r, -x * r, r)

    def hess(self, x, y, z):
        return ((y * y, 2 * x * y - z, -y), (None, x * x, -x), (None, None, 1.0))

    def third(self, x, y, z):
        return {(0, 0, 1): 2 * y, (0, 1, 1): 2 * x, (0, 1, 2): -1.0}


class Middle(_Scalar):
    """f2 = 1/2 (y - 1)^2 + 1/2 z^2, so y = 1 / (1 + x^2)."""

    def value(self, point):
        x, y, z = self._xyz(point)
        return 0.5 * (y - 1) ** 2 + 0.5 * z**2

    def grad(self, x, y, z):
        return (0.0, y - 1, z)

    def hess(self, x, y, z):
        return ((0.0, 0.0, 0.0), (None, 1.0, 0.0), (None, None, 1.0))

    def third(self, x, y, z):
        return {}


class Leader(_Scalar):
    """f1 = z + 1/2 x^2."""

    def value(self, point):
        x, y, z = self._xyz(point)
        return z + 0.5 * x**2

    def grad(self, x, y, z):
        return (x, 0.0, 1.0)

    def hess(self, x, y, z):
        return ((1.0, 0.0, 0.0), (None, 0.0, 0.0), (None, None, 0.0))

    def third(self, x, y, z):
        return {}


class CurvedTrilevel(MultilevelProblem):
    """
    Trilevel problem whose third-level solution map is bilinear, so the
    second level sees curvature from the third.

    Reduced leader value x / (1 + x^2) + x^2 / 2.
    """

    def __init__(self):
        super().__init__([1, 1, 1], [Leader(), Middle(), Follower()], name="curved")

    def exact_response(self, x1):
        x = float(np.asarray(x1).ravel()[0])
        y = 1.0 / (1.0 + x * x)
        return PointStack([[x], [y], [x * y]])

    @staticmethod
    def exact_hypergradient(x: float) -> float:
        return (1 - x * x) / (1 + x * x) ** 2 + x


@pytest.fixture
def stackelberg():
    return build_stackelberg(StackelbergSpec(dim=1, levels=3))


@pytest.fixture
def curved():
    return CurvedTrilevel()


@pytest.fixture
def quadratic3():
    return random_quadratic_problem(7, [2, 3, 2])


@pytest.fixture
def quadratic4():
    return random_quadratic_problem(11, [2, 3, 2, 2])


@pytest.fixture
def chain4():
    return quadratic_chain(4, 2)


WINE_HEADER = [
    "fixed acidity",
    "volatile acidity",
    "citric acid",
    "residual sugar",
    "chlorides",
    "free sulfur dioxide",
    "total sulfur dioxide",
    "density",
    "pH",
    "sulphates",
    "alcohol",
    "quality",
]


def write_wine_csv(path: pathlib.Path, rows: int = 200, seed: int = 0) -> pathlib.Path:
    """Synthetic file in the winequality layout: quoted header, semicolons, 11 features and quality."""
    rng = np.random.default_rng(seed)
    features = rng.normal(loc=5.0, scale=2.0, size=(rows, 11))
    weights = rng.normal(size=11)
    quality = np.clip(np.round(5 + features @ weights / 10 + rng.normal(scale=0.5, size=rows)), 3, 8)
    lines = [";".join(f'"{name}"' for name in WINE_HEADER)]
    for row, q in zip(features, quality):
        lines.append(";".join(f"{v:.4f}" for v in row) + f";{int(q)}")
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def wine_csv(tmp_path):
    return write_wine_csv(tmp_path / "winequality-red.csv")
