"""
Dense symmetric positive definite solves.

Two paths: a Cholesky factorization (LAPACK dpotrf through scipy) and
truncated conjugate gradients started from zero, run on all right-hand
side columns side by side.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.linalg import lapack

from .errors import ConfigError, NumericError, SingularHessian, StructuralError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolveMode:
    kind: str = "direct"
    cg_iters: int = 3
    cg_tol: float = 1e-10

    def __post_init__(self):
        if self.kind not in ("direct", "cg"):
            raise ConfigError(f"solve mode must be 'direct' or 'cg', got {self.kind!r}")
        if self.cg_iters < 1:
            raise ConfigError(f"cg_iters must be at least 1, got {self.cg_iters}")
        if self.cg_tol < 0:
            raise ConfigError(f"cg_tol must be non-negative, got {self.cg_tol}")


DIRECT = SolveMode("direct")


@dataclass
class SolveStats:
    """Accumulates solve telemetry across one gradient evaluation."""

    solves: int = 0
    cg_solves: int = 0
    # Largest final residual norm of any truncated CG solve.
    cg_residual: float | None = None

    def record(self, residual: float | None):
        self.solves += 1
        if residual is None:
            return
        self.cg_solves += 1
        if self.cg_residual is None or residual > self.cg_residual:
            self.cg_residual = residual


def _level_label(level: int | None) -> str:
    return "" if level is None else f" at level {level + 1}"


def _cholesky(A: np.ndarray, level: int | None) -> np.ndarray:
    factor, info = lapack.dpotrf(A, lower=False, clean=True)
    if info > 0:
        raise SingularHessian(
            f"matrix is not positive definite{_level_label(level)} (pivot {info - 1})",
            pivot=info - 1,
            level=level,
        )
    if info < 0:
        raise NumericError(f"dpotrf rejected argument {-info}{_level_label(level)}", level=level)
    return factor


def conjugate_gradient(
    A: np.ndarray, B: np.ndarray, iters: int, tol: float, level: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """
    Run CG on every column of B at once, starting from zero.

    Each column keeps its own step sizes and stops once its residual norm
    drops to tol; at most min(iters, d) iterations run.

    Returns:
        The iterate X and the final residual norm of each column.
    """
    d = A.shape[0]
    X = np.zeros_like(B)
    R = B.copy()
    P = R.copy()
    rs = np.sum(R * R, axis=0)
    active = np.sqrt(rs) > tol
    for it in range(min(iters, d)):
        if not active.any():
            break
        AP = A @ P
        pAp = np.sum(P * AP, axis=0)
        if np.any(pAp[active] <= 0):
            raise SingularHessian(
                f"conjugate gradients met non-positive curvature{_level_label(level)} at iteration {it + 1}",
                level=level,
            )
        alpha = np.where(active, rs / np.where(active, pAp, 1.0), 0.0)
        X += alpha * P
        R -= alpha * AP
        rs_new = np.sum(R * R, axis=0)
        beta = np.where(active, rs_new / np.where(active, rs, 1.0), 0.0)
        P = R + beta * P
        rs = np.where(active, rs_new, rs)
        active &= np.sqrt(rs) > tol
    return X, np.linalg.norm(B - A @ X, axis=0)


def solve_spd(
    A: np.ndarray,
    B: np.ndarray,
    mode: SolveMode | None = None,
    shift: float = 0.0,
    stats: SolveStats | None = None,
    level: int | None = None,
) -> np.ndarray:
    """
    Solve (A + shift*I) X = B for symmetric positive definite A.

    Args:
        A: d x d symmetric matrix.
        B: d-vector or d x k matrix.
        mode: Direct Cholesky or truncated CG. Defaults to direct.
        shift: Tikhonov shift, 0 unless the caller opts in.
        stats: Optional accumulator for CG residuals.
        level: 0-based level the system belongs to, used in error messages.

    Returns:
        X with the shape of B.

    Raises:
        SingularHessian: A is not positive definite.
    """
    mode = mode or DIRECT
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise StructuralError(f"expected a square matrix{_level_label(level)}, got shape {A.shape}", level=level)
    if B.shape[0] != A.shape[0]:
        raise StructuralError(
            f"right-hand side has {B.shape[0]} rows for a {A.shape[0]}x{A.shape[0]} system{_level_label(level)}",
            level=level,
        )
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise NumericError(f"non-finite entries in linear system{_level_label(level)}", level=level)
    if shift:
        A = A + shift * np.eye(A.shape[0])
    vector = B.ndim == 1
    B2 = B.reshape(B.shape[0], -1)
    if B2.shape[1] == 0:
        return B.copy()

    if mode.kind == "direct":
        X = scipy.linalg.cho_solve((_cholesky(A, level), False), B2)
        if stats is not None:
            stats.record(None)
    else:
        X, residuals = conjugate_gradient(A, B2, mode.cg_iters, mode.cg_tol, level)
        worst = float(residuals.max())
        logger.debug(f"cg{_level_label(level)}: {B2.shape[1]} columns, final residual {worst:.3e}")
        if stats is not None:
            stats.record(worst)
    return X.ravel() if vector else X


def is_spd(A: np.ndarray, tol: float = 1e-10) -> bool:
    """True iff A is square, symmetric within tol and its Cholesky factorization succeeds."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] == 0:
        return False
    if not np.all(np.isfinite(A)):
        return False
    scale = 1.0 + float(np.max(np.abs(A)))
    if np.max(np.abs(A - A.T)) > tol * scale:
        return False
    _, info = lapack.dpotrf(A, lower=False, clean=True)
    return info == 0
