"""
Closed-form implicit differentiation for three-level problems.

Levels are x (0), y (1) and z (2). g(x, y) = argmin_z f3 and
h(x) = argmin_y f2(x, y, g(x, y)); the hypergradient is the derivative of
f1(x, h(x), g(x, h(x))).
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import CapabilityError, ConvergenceBudget, StalePoint, StructuralError
from .linsolve import SolveMode, SolveStats, solve_spd
from .numderiv import FdConfig, fd_jacobian_of_map
from .problem import DerivativeOracle
from .types import PointStack

logger = logging.getLogger(__name__)

X, Y, Z = 0, 1, 2

CURVATURE_MODES = ("analytic", "fd")


@dataclass
class TrilevelJacobians:
    dg_dx: np.ndarray
    dg_dy: np.ndarray
    dh_dx: np.ndarray
    curvature_mode: str


def _assert_shape(array: np.ndarray, shape: tuple[int, ...], name: str):
    if array.shape != shape:
        raise StructuralError(f"{name} has shape {array.shape}, expected {shape}", block=name)


def default_curvature_mode(f3: DerivativeOracle) -> str:
    return "analytic" if f3.has_third_order else "fd"


def resolve_deepest(
    f: DerivativeOracle,
    point: PointStack,
    level: int = Z,
    tol: float = 1e-11,
    max_iters: int = 50,
) -> PointStack:
    """
    Newton's method on the deepest level with every shallower level fixed.

    Steps are halved until the gradient norm decreases. Stops when the
    gradient norm is at most tol.

    Raises:
        ConvergenceBudget: tol not reached within max_iters iterations, or
            no step length decreases the gradient norm.
    """
    grad = f.grad_block(point, level)
    residual = float(np.linalg.norm(grad))
    for _ in range(max_iters):
        if residual <= tol:
            return point
        direction = solve_spd(f.hess_block(point, level, level), grad, level=level)
        x = point.values[level]
        t = 1.0
        for _ in range(40):
            trial = point.with_level(level, x - t * direction)
            trial_grad = f.grad_block(trial, level)
            trial_residual = float(np.linalg.norm(trial_grad))
            if trial_residual < residual:
                point, grad, residual = trial, trial_grad, trial_residual
                break
            t *= 0.5
        else:
            break
    if residual <= tol:
        return point
    raise ConvergenceBudget(
        f"newton on level {level + 1} stopped at gradient norm {residual:.3e} (tolerance {tol:.1e})",
        residuals=[residual],
    )


def _check_deepest(f3: DerivativeOracle, point: PointStack, tol: float | None):
    if tol is None:
        return
    residual = float(np.linalg.norm(f3.grad_block(point, Z)))
    logger.debug(f"level 3 stationarity residual {residual:.3e}")
    if residual > tol:
        raise StalePoint(Z, residual, tol)


def jac_g(
    f3: DerivativeOracle,
    point: PointStack,
    mode: SolveMode | None = None,
    stationarity_tol: float | None = 1e-6,
    stats: SolveStats | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Jacobians of the third-level solution map g(x, y).

    Returns:
        (dg_dx, dg_dy) of shapes d3 x d1 and d3 x d2.
    """
    _check_deepest(f3, point, stationarity_tol)
    d1, d2, d3 = point.dims
    rhs = np.hstack([f3.hess_block(point, Z, X), f3.hess_block(point, Z, Y)])
    sol = -solve_spd(f3.hess_block(point, Z, Z), rhs, mode, stats=stats, level=Z)
    dg_dx, dg_dy = sol[:, :d1], sol[:, d1:]
    _assert_shape(dg_dx, (d3, d1), "dg_dx")
    _assert_shape(dg_dy, (d3, d2), "dg_dy")
    return dg_dx, dg_dy


def solution_curvature(
    f3: DerivativeOracle,
    point: PointStack,
    dg_dy: np.ndarray,
    dg_dx: np.ndarray,
    wrt: int,
    mode: SolveMode | None = None,
    curvature_mode: str = "analytic",
    fd_cfg: FdConfig | None = None,
    stats: SolveStats | None = None,
) -> np.ndarray:
    """
    Derivative of dg_dy along x or y, with z following g.

    Args:
        wrt: X or Y.
        curvature_mode: "analytic" differentiates the stationarity identity
            H_zz dg_dy + H_zy = 0 once more using third-order slices; "fd"
            differences dg_dy with z re-solved by Newton.

    Returns:
        Array C of shape d3 x d2 x d_wrt with C[i, f, b] = d(dg_dy[i, f])/d(w_b).
    """
    if wrt not in (X, Y):
        raise StructuralError(f"curvature is taken along level 1 or 2, got level {wrt + 1}")
    d1, d2, d3 = point.dims
    dw = point.dims[wrt]
    if curvature_mode == "analytic":
        if not f3.has_third_order:
            raise CapabilityError(
                f"{type(f3).__name__} has no third-order slices; use curvature mode 'fd'"
            )
        dg_dw = dg_dx if wrt == X else dg_dy
        m_zz = f3.third_slice(point, Z, Z, wrt) + np.einsum(
            "aec,cb->aeb", f3.third_slice(point, Z, Z, Z), dg_dw
        )
        m_zy = f3.third_slice(point, Z, Y, wrt) + np.einsum(
            "aec,cb->aeb", f3.third_slice(point, Z, Y, Z), dg_dw
        )
        rhs = np.einsum("aeb,ef->afb", m_zz, dg_dy) + m_zy
        curvature = -solve_spd(
            f3.hess_block(point, Z, Z), rhs.reshape(d3, d2 * dw), mode, stats=stats, level=Z
        ).reshape(d3, d2, dw)
    elif curvature_mode == "fd":

        def dg_dy_at(p: PointStack) -> np.ndarray:
            p = resolve_deepest(f3, p)
            return jac_g(f3, p, mode, stationarity_tol=None)[1]

        curvature = fd_jacobian_of_map(dg_dy_at, point, wrt, fd_cfg).reshape(d3, d2, dw)
    else:
        raise StructuralError(f"unknown curvature mode {curvature_mode!r}")
    _assert_shape(curvature, (d3, d2, dw), "curvature")
    return curvature


def jac_h(
    f2: DerivativeOracle,
    f3: DerivativeOracle,
    point: PointStack,
    jacs: tuple[np.ndarray, np.ndarray],
    mode: SolveMode | None = None,
    curvature_mode: str | None = None,
    stationarity_tol: float | None = 1e-6,
    fd_cfg: FdConfig | None = None,
    stats: SolveStats | None = None,
) -> np.ndarray:
    """
    Jacobian dh/dx of the second-level solution map, shape d2 x d1.

    dh_dx = -D^-1 R where D is the reduced Hessian of f2 in y along g and R
    its mixed derivative along x. All Hessian blocks come from f2; the
    solution-map terms come from f3.
    """
    curvature_mode = curvature_mode or default_curvature_mode(f3)
    dg_dx, dg_dy = jacs
    d1, d2, d3 = point.dims
    f2_z = f2.grad_block(point, Z)
    if stationarity_tol is not None:
        residual = float(np.linalg.norm(f2.grad_block(point, Y) + dg_dy.T @ f2_z))
        logger.debug(f"level 2 reduced stationarity residual {residual:.3e}")
        if residual > stationarity_tol:
            raise StalePoint(Y, residual, stationarity_tol)

    h_yy = f2.hess_block(point, Y, Y)
    h_yz = f2.hess_block(point, Y, Z)
    h_zy = f2.hess_block(point, Z, Y)
    h_zz = f2.hess_block(point, Z, Z)
    h_yx = f2.hess_block(point, Y, X)
    h_zx = f2.hess_block(point, Z, X)

    D = h_yy + h_yz @ dg_dy + dg_dy.T @ h_zy + dg_dy.T @ h_zz @ dg_dy
    R = h_yx + h_yz @ dg_dx + dg_dy.T @ h_zx + dg_dy.T @ h_zz @ dg_dx
    if np.any(f2_z):
        for wrt, target in ((Y, "D"), (X, "R")):
            curvature = solution_curvature(
                f3, point, dg_dy, dg_dx, wrt, mode, curvature_mode, fd_cfg, stats
            )
            term = np.einsum("i,iab->ab", f2_z, curvature)
            if target == "D":
                D = D + term
            else:
                R = R + term
    D = 0.5 * (D + D.T)
    dh_dx = -solve_spd(D, R, mode, stats=stats, level=Y)
    _assert_shape(dh_dx, (d2, d1), "dh_dx")
    return dh_dx


def trilevel_jacobians(
    f2: DerivativeOracle,
    f3: DerivativeOracle,
    point: PointStack,
    mode: SolveMode | None = None,
    curvature_mode: str | None = None,
    stationarity_tol: float | None = 1e-6,
    fd_cfg: FdConfig | None = None,
    stats: SolveStats | None = None,
) -> TrilevelJacobians:
    curvature_mode = curvature_mode or default_curvature_mode(f3)
    dg_dx, dg_dy = jac_g(f3, point, mode, stationarity_tol, stats)
    dh_dx = jac_h(
        f2, f3, point, (dg_dx, dg_dy), mode, curvature_mode, stationarity_tol, fd_cfg, stats
    )
    return TrilevelJacobians(dg_dx, dg_dy, dh_dx, curvature_mode)


def grad_trilevel(
    f1: DerivativeOracle,
    f2: DerivativeOracle,
    f3: DerivativeOracle,
    point: PointStack,
    mode: SolveMode | None = None,
    curvature_mode: str | None = None,
    stationarity_tol: float | None = 1e-6,
    fd_cfg: FdConfig | None = None,
    stats: SolveStats | None = None,
) -> np.ndarray:
    """
    Total derivative of f1 with respect to x at a lower-solved point.

    df1/dx = f1_x + dh_dx^T f1_y + (dg_dx + dg_dy dh_dx)^T f1_z

    Args:
        f1, f2, f3: Oracles of the three levels.
        point: (x, y, z) with y and z at (or near) their optima.
        mode: Linear solve mode for every Hessian solve.
        curvature_mode: "analytic" or "fd"; defaults to analytic when f3
            provides third-order slices.
        stationarity_tol: Largest accepted lower-level residual, None to skip
            the check.
        fd_cfg: Steps of the fd curvature path.
        stats: Optional CG telemetry accumulator.

    Returns:
        Vector of length d1.
    """
    if point.levels != 3:
        raise StructuralError(f"trilevel gradient needs 3 levels, point has {point.levels}")
    jacs = trilevel_jacobians(f2, f3, point, mode, curvature_mode, stationarity_tol, fd_cfg, stats)
    total_z = jacs.dg_dx + jacs.dg_dy @ jacs.dh_dx
    grad = (
        f1.grad_block(point, X)
        + jacs.dh_dx.T @ f1.grad_block(point, Y)
        + total_z.T @ f1.grad_block(point, Z)
    )
    _assert_shape(grad, (point.dims[X],), "gradient")
    return grad
