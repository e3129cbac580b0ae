"""
Central finite differences over PointStack levels.

These are the brute-force oracles the implicit-differentiation paths are
checked against, and the fallback for derivatives an oracle does not
provide analytically.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, MloptError, NumericError
from .types import PointStack


@dataclass(frozen=True)
class FdConfig:
    step_abs: float = 1e-5
    step_rel: float = 1e-5
    # Outer step of nested Hessian differences. Larger than step_abs so the
    # roundoff of the inner gradient is not amplified past ~1e-7.
    hess_step_abs: float = 1e-4
    scheme: str = "central"

    def __post_init__(self):
        if self.step_abs <= 0 or self.step_rel < 0 or self.hess_step_abs <= 0:
            raise ConfigError(
                f"finite-difference steps must be positive, got step_abs={self.step_abs}, "
                f"step_rel={self.step_rel}, hess_step_abs={self.hess_step_abs}"
            )
        if self.scheme != "central":
            raise ConfigError(f"unsupported finite-difference scheme {self.scheme!r}")

    def step(self, value: float) -> float:
        return self.step_abs + self.step_rel * abs(value)

    def hess_step(self, value: float) -> float:
        return self.hess_step_abs + self.step_rel * abs(value)


def _shifted(point: PointStack, level: int, k: int, h: float) -> PointStack:
    x = point.values[level].copy()
    x[k] += h
    return point.with_level(level, x)


def fd_grad_block(
    f: Callable[[PointStack], float],
    point: PointStack,
    level: int,
    cfg: FdConfig | None = None,
) -> np.ndarray:
    """
    Gradient of f with respect to one level by central differences.

    Args:
        f: Scalar function of a PointStack.
        point: Evaluation point.
        level: 0-based level to differentiate along.
        cfg: Step configuration.

    Returns:
        Vector of length d_level.

    Raises:
        NumericError: A sampled value is not finite.
    """
    cfg = cfg or FdConfig()
    x = point.values[level]
    out = np.empty(x.size)
    for k in range(x.size):
        h = cfg.step(x[k])
        up = float(f(_shifted(point, level, k, h)))
        down = float(f(_shifted(point, level, k, -h)))
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(
                f"non-finite value probing level {level + 1} coordinate {k}", level=level, coordinate=k
            )
        out[k] = (up - down) / (2 * h)
    return out


def fd_hess_block(
    f: Callable[[PointStack], float],
    point: PointStack,
    r: int,
    c: int,
    cfg: FdConfig | None = None,
) -> np.ndarray:
    """
    Hessian block (r, c) of f by central differences of fd_grad_block along x_c.

    The diagonal blocks are symmetrized.
    """
    cfg = cfg or FdConfig()
    xc = point.values[c]
    block = np.empty((point.values[r].size, xc.size))
    for b in range(xc.size):
        h = cfg.hess_step(xc[b])
        up = fd_grad_block(f, _shifted(point, c, b, h), r, cfg)
        down = fd_grad_block(f, _shifted(point, c, b, -h), r, cfg)
        block[:, b] = (up - down) / (2 * h)
    if r == c:
        block = 0.5 * (block + block.T)
    return block


def fd_jacobian_of_map(
    m: Callable[[PointStack], np.ndarray],
    point: PointStack,
    level: int,
    cfg: FdConfig | None = None,
) -> np.ndarray:
    """
    Jacobian of a vector map with respect to one level.

    Column k is the central difference of m along coordinate k of the level.
    m may re-solve lower levels internally; its errors are re-raised with
    the offending coordinate attached.
    """
    cfg = cfg or FdConfig()
    x = point.values[level]
    columns = []
    for k in range(x.size):
        h = cfg.step(x[k])
        try:
            up = np.asarray(m(_shifted(point, level, k, h)), dtype=float).ravel()
            down = np.asarray(m(_shifted(point, level, k, -h)), dtype=float).ravel()
        except MloptError as e:
            if isinstance(e, NumericError) and e.coordinate is None:
                e.coordinate = k
            e.add_note(f"while differencing level {level + 1} coordinate {k}")
            raise
        if not (np.all(np.isfinite(up)) and np.all(np.isfinite(down))):
            raise NumericError(
                f"non-finite map value probing level {level + 1} coordinate {k}", level=level, coordinate=k
            )
        columns.append((up - down) / (2 * h))
    if not columns:
        return np.zeros((np.asarray(m(point)).size, 0))
    return np.stack(columns, axis=1)
