"""
Optimizers, nested lower-level solves and the outer-loop driver.
"""

import logging
import time
from typing import Callable
from dataclasses import dataclass, field

import numpy as np
import tqdm

from .errors import ConfigError, ConvergenceBudget, DivergedLowerLevel, MloptError, NumericError, StructuralError
from .experiments.polynomial import QuadraticProblem
from .linsolve import SolveMode, SolveStats, solve_spd
from .nlevel import hypergradient as nlevel_hypergradient
from .nlevel import reduced_derivatives, reduced_gradient
from .problem import MultilevelProblem, evaluate
from .trilevel import grad_trilevel, resolve_deepest
from .types import PointStack, TraceRecord

logger = logging.getLogger(__name__)

GRADIENT_METHODS = ("id", "fd", "vgd")

# Residual growth factor that counts as divergence of a lower level.
DIVERGENCE_FACTOR = 1e6


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    lr0: float = 0.1
    decay: float = 0.99

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"adam betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0 or self.lr0 <= 0 or self.decay <= 0:
            raise ConfigError("adam eps, lr0 and decay must be positive")

    def lr(self, step: int) -> float:
        """Learning rate at 0-based outer step."""
        return self.lr0 * self.decay**step


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, dim: int) -> "AdamState":
        return cls(np.zeros(dim), np.zeros(dim))


def default_schedule(levels: int) -> list[int]:
    """30 updates of level 2 per outer step and 3 updates of each deeper level per update above it."""
    return [30] + [3] * (levels - 2)


@dataclass(frozen=True)
class SolverConfig:
    outer_steps: int = 200
    inner_schedule: tuple[int, ...] = (30, 3)
    lr_inner: float = 1e-2
    adam: AdamConfig = field(default_factory=AdamConfig)
    seed: int | None = None
    # None skips the lower-level stationarity checks of the gradient paths.
    stationarity_tol: float | None = None
    solve_mode: SolveMode = field(default_factory=SolveMode)
    gradient_method: str = "id"
    curvature_mode: str | None = None
    table_mode: str = "gauss-newton"
    outer_optimizer: str = "adam"
    # Constant step of the plain gradient outer optimizer.
    outer_lr: float = 0.1
    fd_step: float = 1e-3
    fd_workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "inner_schedule", tuple(int(k) for k in self.inner_schedule))
        if self.outer_steps < 0:
            raise ConfigError(f"outer_steps must be non-negative, got {self.outer_steps}")
        if any(k < 1 for k in self.inner_schedule):
            raise ConfigError(f"inner update counts must be at least 1, got {list(self.inner_schedule)}")
        if self.lr_inner <= 0 or self.outer_lr <= 0 or self.fd_step <= 0:
            raise ConfigError("learning rates and the fd step must be positive")
        if self.gradient_method not in GRADIENT_METHODS:
            raise ConfigError(f"gradient method must be one of {GRADIENT_METHODS}, got {self.gradient_method!r}")
        if self.outer_optimizer not in ("adam", "gd"):
            raise ConfigError(f"outer optimizer must be 'adam' or 'gd', got {self.outer_optimizer!r}")
        if self.fd_workers < 1:
            raise ConfigError(f"fd_workers must be at least 1, got {self.fd_workers}")

    def check_problem(self, problem: MultilevelProblem):
        if len(self.inner_schedule) != problem.levels - 1:
            raise ConfigError(
                f"inner schedule {list(self.inner_schedule)} has {len(self.inner_schedule)} entries, "
                f"problem has {problem.levels - 1} lower levels"
            )


def _finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} produced non-finite values")
    return x


def gd_step(x: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    return _finite(np.asarray(x, dtype=float) - lr * np.asarray(grad, dtype=float), "gradient step")


def adam_step(
    state: AdamState,
    x: np.ndarray,
    grad: np.ndarray,
    t: int,
    cfg: AdamConfig,
    lr: float | None = None,
) -> tuple[AdamState, np.ndarray]:
    """
    One bias-corrected Adam update.

    Args:
        state: First and second moments, zero before the first update.
        x: Current iterate.
        grad: Gradient at x.
        t: 1-based update counter.
        cfg: Adam constants.
        lr: Step size, defaults to cfg.lr(t - 1).

    Returns:
        The new state and the new iterate.
    """
    if t < 1:
        raise ConfigError(f"adam update counter starts at 1, got {t}")
    lr = cfg.lr(t - 1) if lr is None else lr
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * grad**2
    m_hat = m / (1 - cfg.beta1**t)
    v_hat = v / (1 - cfg.beta2**t)
    x_new = _finite(x - lr * m_hat / (np.sqrt(v_hat) + cfg.eps), "adam step")
    return AdamState(m, v), x_new


def measure_residuals(
    problem: MultilevelProblem, point: PointStack, mode: SolveMode | None = None
) -> PointStack:
    """Copy of point with the reduced residual of every lower level recorded."""
    residuals: list[float | None] = [None]
    for level in range(1, problem.levels):
        residuals.append(float(np.linalg.norm(reduced_gradient(problem, point, level, mode))))
    return PointStack(point.values, residuals)


def nested_lower_solve(
    problem: MultilevelProblem,
    x1: np.ndarray,
    warm: PointStack,
    cfg: SolverConfig,
) -> PointStack:
    """
    Truncated nested gradient descent on levels 2..n with x1 fixed.

    With schedule [k_2, ..., k_n], each update of level j is preceded by
    k_(j+1) updates of level j+1. Every update steps along the reduced
    gradient of the level (its objective's gradient along the responses of
    the deeper levels) at lr_inner.

    Returns:
        The updated stack with the reduced residual of each lower level.

    Raises:
        DivergedLowerLevel: A residual grew past DIVERGENCE_FACTOR times its
            first measured value, or became non-finite.
    """
    cfg.check_problem(problem)
    problem.check_point(warm)
    n = problem.levels
    point = warm.with_level(0, x1)
    first: dict[int, float] = {}

    def sweep(level: int, point: PointStack) -> PointStack:
        for _ in range(cfg.inner_schedule[level - 1]):
            if level + 1 < n:
                point = sweep(level + 1, point)
            grad = reduced_gradient(problem, point, level, cfg.solve_mode)
            residual = float(np.linalg.norm(grad))
            baseline = first.setdefault(level, residual)
            if not np.isfinite(residual) or residual > DIVERGENCE_FACTOR * max(baseline, 1e-8):
                raise DivergedLowerLevel(
                    f"level {level + 1} residual grew from {baseline:.3e} to {residual:.3e}", level=level
                )
            point = point.with_level(level, gd_step(point.values[level], grad, cfg.lr_inner))
        return point

    point = sweep(1, point)
    point.check_finite(" after the lower-level solve")
    return measure_residuals(problem, point, cfg.solve_mode)


def newton_lower_solve(
    problem: MultilevelProblem,
    x1: np.ndarray,
    warm: PointStack,
    tol: float = 1e-10,
    max_iters: int = 50,
    table_mode: str = "gauss-newton",
) -> PointStack:
    """
    Solve every lower level to reduced-gradient norm tol by nested Newton.

    Before each Newton step of level j the deeper levels are re-solved, so
    the step uses the reduced gradient and reduced Hessian of level j at a
    point where the deeper levels are stationary. Steps are halved until
    the residual of the level decreases.

    Args:
        table_mode: How reduced Hessians are formed; "exact-fd" when the
            deeper solution maps are far from affine.

    Raises:
        ConvergenceBudget: A level misses tol within max_iters steps.
    """
    problem.check_point(warm)
    n = problem.levels
    deepest = n - 1

    def solve(level: int, point: PointStack) -> PointStack:
        if level == deepest:
            return resolve_deepest(problem.objectives[level], point, level, tol, max_iters)
        point = solve(level + 1, point)
        grad, hessian = reduced_derivatives(problem, point, level, table_mode=table_mode)
        residual = float(np.linalg.norm(grad))
        for _ in range(max_iters):
            if residual <= tol:
                return point
            direction = solve_spd(hessian, grad, level=level)
            x = point.values[level]
            t = 1.0
            for _ in range(40):
                trial = solve(level + 1, point.with_level(level, x - t * direction))
                trial_grad, trial_hessian = reduced_derivatives(problem, trial, level, table_mode=table_mode)
                trial_residual = float(np.linalg.norm(trial_grad))
                if trial_residual < residual:
                    point, grad, hessian, residual = trial, trial_grad, trial_hessian, trial_residual
                    break
                t *= 0.5
            else:
                break
        if residual <= tol:
            return point
        raise ConvergenceBudget(
            f"newton on level {level + 1} stopped at residual {residual:.3e} (tolerance {tol:.1e})",
            residuals=[residual],
        )

    point = solve(1, warm.with_level(0, x1))
    return measure_residuals(problem, point, None)


def hypergradient(
    problem: MultilevelProblem,
    point: PointStack,
    cfg: SolverConfig,
    stats: SolveStats | None = None,
) -> np.ndarray:
    """Gradient of the top level by the configured method at a lower-solved point."""
    from . import baselines

    match cfg.gradient_method:
        case "id" if problem.levels == 3:
            f1, f2, f3 = problem.objectives
            return grad_trilevel(
                f1, f2, f3, point, cfg.solve_mode, cfg.curvature_mode, cfg.stationarity_tol, stats=stats
            )
        case "id":
            return nlevel_hypergradient(
                problem, point, cfg.solve_mode, cfg.table_mode, cfg.stationarity_tol, stats
            )
        case "vgd":
            return baselines.vgd_gradient(problem.objectives[0], point)
        case "fd":
            return baselines.fd_hypergradient(
                problem, point.values[0], point, cfg, baselines.FdHyperConfig(cfg.fd_step, workers=cfg.fd_workers)
            )
        case method:
            raise ConfigError(f"unknown gradient method {method!r}")


def run(
    problem: MultilevelProblem,
    cfg: SolverConfig,
    reference: np.ndarray | None = None,
    warm: PointStack | None = None,
    progress: bool = False,
    on_step: Callable[[TraceRecord, PointStack], None] | None = None,
) -> list[TraceRecord]:
    """
    Outer loop: lower solve, hypergradient, outer update; one record per step.

    f1 and the distance to the reference are measured at the lower-solved
    point the gradient is evaluated at, before the outer update.

    Args:
        problem: The multilevel problem.
        cfg: Solver configuration.
        reference: Known top-level optimum, used for mse_to_ref.
        warm: Starting stack, zeros by default.
        progress: Show a tqdm progress bar.
        on_step: Called with each record and the lower-solved point it was
            measured at, before the outer update. It may fill in the record.

    Returns:
        The trace, one TraceRecord per outer step (steps numbered from 1).
    """
    from .experiments.protocol import mse_to_reference

    cfg.check_problem(problem)
    if reference is None:
        reference = problem.reference
    point = warm.copy() if warm is not None else problem.zeros()
    problem.check_point(point)
    state = AdamState.zeros(problem.dims[0])
    trace: list[TraceRecord] = []
    grad_sq_sum = 0.0
    warned_cg = False

    for step in tqdm.tqdm(range(cfg.outer_steps), disable=not progress, desc=problem.name or "run"):
        started = time.perf_counter_ns()
        stats = SolveStats()
        try:
            point = nested_lower_solve(problem, point.values[0], point, cfg)
            grad = _finite(hypergradient(problem, point, cfg, stats), f"{cfg.gradient_method} hypergradient")
            f1 = evaluate(problem, 0, point)
            x = point.values[0]
            if cfg.outer_optimizer == "adam":
                state, x_new = adam_step(state, x, grad, step + 1, cfg.adam)
            else:
                x_new = gd_step(x, grad, cfg.outer_lr)
        except MloptError as e:
            e.step = step + 1
            e.add_note(f"at outer step {step + 1}")
            raise
        wall_micros = (time.perf_counter_ns() - started) // 1000

        grad_sq = float(grad @ grad)
        grad_sq_sum += grad_sq
        mse = None
        if reference is not None:
            mse = mse_to_reference(x, reference)
        record = TraceRecord(
            step=step + 1,
            f1=f1,
            grad_norm_sq=grad_sq,
            cum_avg_grad_sq=grad_sq_sum / (step + 1),
            mse_to_ref=mse,
            wall_micros=int(wall_micros),
            cg_residual=stats.cg_residual,
            lower_residual=point.max_lower_residual(),
        )
        if on_step is not None:
            try:
                on_step(record, point)
            except MloptError as e:
                e.step = step + 1
                raise
        trace.append(record)
        if stats.cg_residual is not None and stats.cg_residual > 1e-3 and not warned_cg:
            logger.warning(f"truncated CG residual {stats.cg_residual:.3e} at step {step + 1}")
            warned_cg = True
        if (step + 1) % 10 == 0:
            logger.info(
                f"step {step + 1}: f1={f1:.6g} |grad|^2={grad_sq:.3e}"
                + ("" if mse is None else f" mse={mse:.3e}")
            )
        point = point.with_level(0, x_new)
    return trace


@dataclass
class Theorem4Result:
    lhs: float
    rhs: float
    passed: bool
    beta: float
    lambda_max: float
    # prefix_sums[k] is the sum of squared gradient norms over rounds 0..k.
    prefix_sums: list[float]


def theorem4_check(
    problem: MultilevelProblem,
    rounds: int = 100,
    beta: float | None = None,
    x0: np.ndarray | None = None,
    mode: SolveMode | None = None,
) -> Theorem4Result:
    """
    Check sum_k |df1/dx1(x_k)|^2 <= f1(x_0) / (beta - beta^2 lambda_max / 2)
    along plain gradient descent with exact lower solves.

    The problem must be a QuadraticProblem whose reduced top level is
    positive definite with nonnegative minimum, and beta <= 1/lambda_max.

    Raises:
        StructuralError: The problem or beta violates the preconditions.
    """
    if not isinstance(problem, QuadraticProblem):
        raise StructuralError("the convergence bound check needs a QuadraticProblem")
    Q, q, c0 = problem.reduced_top_quadratic()
    eigenvalues = np.linalg.eigvalsh(0.5 * (Q + Q.T))
    lambda_min, lambda_max = float(eigenvalues[0]), float(eigenvalues[-1])
    if lambda_min <= 0:
        raise StructuralError(f"reduced top-level Hessian is not positive definite (min eigenvalue {lambda_min:.3e})")
    minimum = c0 - 0.5 * float(q @ np.linalg.solve(Q, q))
    if minimum < -1e-12 * (1 + abs(c0)):
        raise StructuralError(f"reduced top-level objective has negative minimum {minimum:.3e}")
    beta = 1.0 / lambda_max if beta is None else beta
    if not 0 < beta <= (1 + 1e-12) / lambda_max:
        raise StructuralError(f"step {beta} outside (0, 1/lambda_max = {1 / lambda_max:.6g}]")

    x = np.ones(problem.dims[0]) if x0 is None else np.asarray(x0, dtype=float)
    f_start = problem.reduced_value(x)
    prefix: list[float] = []
    total = 0.0
    for _ in range(rounds):
        point = problem.exact_response(x)
        if problem.levels == 3:
            f1, f2, f3 = problem.objectives
            grad = grad_trilevel(f1, f2, f3, point, mode, stationarity_tol=None)
        else:
            grad = nlevel_hypergradient(problem, point, mode, stationarity_tol=None)
        total += float(grad @ grad)
        prefix.append(total)
        x = gd_step(x, grad, beta)
    rhs = f_start / (beta - beta**2 * lambda_max / 2)
    passed = total <= rhs * (1 + 1e-9)
    logger.info(f"convergence bound: lhs={total:.6g} rhs={rhs:.6g} passed={passed}")
    return Theorem4Result(total, rhs, passed, beta, lambda_max, prefix)
