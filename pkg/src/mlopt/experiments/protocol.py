"""
Evaluation protocol: distance to a known optimum, converged inference runs
and per-update timing of the gradient methods.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np

from ..errors import ConfigError, ConvergenceBudget
from ..optim import SolverConfig, measure_residuals, nested_lower_solve, newton_lower_solve, run
from ..problem import MultilevelProblem, evaluate
from ..types import PointStack

logger = logging.getLogger(__name__)

# Per-update time relative to the vanilla gradient as published for the
# poisoning experiment.
REFERENCE_RATIOS = {"vgd": 1.0, "fd": 2.0, "itd": 10.3, "id": 3.1}
REFERENCE_ANNOTATION = "published reference ratios (VGD=1): FD 2.0, ITD 10.3, ID 3.1"


def mse_to_reference(x: np.ndarray, ref: np.ndarray) -> float:
    x = np.asarray(x, dtype=float).ravel()
    ref = np.broadcast_to(np.asarray(ref, dtype=float), x.shape)
    return float(np.mean((x - ref) ** 2))


@dataclass
class InferenceResult:
    stack: PointStack
    f1: float
    inner_steps: int
    residuals: list[float]


def _residuals(point: PointStack) -> list[float]:
    return [r for r in point.residuals[1:] if r is not None]


def inference_run(
    problem: MultilevelProblem,
    x1: np.ndarray,
    tol: float = 1e-8,
    max_iters: int = 100_000,
    warm: PointStack | None = None,
    solver: str = "gd",
    lr: float = 1e-2,
    table_mode: str = "gauss-newton",
) -> InferenceResult:
    """
    Solve the lower levels for a fixed x1 until every reduced residual is at
    most tol, then report f1 there.

    Args:
        problem: The multilevel problem.
        x1: Fixed top-level value.
        tol: Residual target of every lower level.
        max_iters: Budget of inner gradient steps (gd solver).
        warm: Starting stack, zeros by default.
        solver: "gd" runs nested sweeps updating each lower level once per
            sweep at step lr; "newton" runs the nested Newton solver.
        lr: Inner step of the gd solver.
        table_mode: Reduced Hessian mode of the newton solver.

    Raises:
        ConvergenceBudget: tol not reached within the budget.
    """
    if tol <= 0:
        raise ConfigError(f"inference tolerance must be positive, got {tol}")
    point = warm.copy() if warm is not None else problem.zeros()
    x1 = np.asarray(x1, dtype=float)

    if solver == "newton":
        point = newton_lower_solve(problem, x1, point, tol=tol, table_mode=table_mode)
        return InferenceResult(point, evaluate(problem, 0, point), 0, _residuals(point))
    if solver != "gd":
        raise ConfigError(f"inference solver must be 'gd' or 'newton', got {solver!r}")

    cfg = SolverConfig(outer_steps=0, inner_schedule=(1,) * (problem.levels - 1), lr_inner=lr)
    point = measure_residuals(problem, point.with_level(0, x1))
    steps = 0
    per_sweep = problem.levels - 1
    while max(_residuals(point)) > tol:
        if steps + per_sweep > max_iters:
            raise ConvergenceBudget(
                f"inference stopped after {steps} inner steps with residuals "
                + ", ".join(f"{r:.3e}" for r in _residuals(point)),
                residuals=_residuals(point),
            )
        point = nested_lower_solve(problem, x1, point, cfg)
        steps += per_sweep
    logger.info(f"inference converged after {steps} inner steps")
    return InferenceResult(point, evaluate(problem, 0, point), steps, _residuals(point))


@dataclass
class BenchRow:
    method: str
    mean_micros: float
    ratio: float
    reference_ratio: float | None


def timing_bench(
    problem: MultilevelProblem,
    methods: list[str],
    cfg: SolverConfig,
    repeats: int = 5,
    warmup: int = 2,
) -> list[BenchRow]:
    """
    Mean wall time of one full outer update per method, relative to vgd.

    Each method runs warmup + repeats outer steps from the same start on a
    single worker; the warm-up steps are not timed.
    """
    if repeats < 5:
        raise ConfigError(f"timing needs at least 5 repeats, got {repeats}")
    ordered = ["vgd"] + [m for m in methods if m != "vgd"]
    means: dict[str, float] = {}
    for method in ordered:
        method_cfg = replace(cfg, gradient_method=method, outer_steps=warmup + repeats, fd_workers=1)
        trace = run(problem, method_cfg)
        means[method] = float(np.mean([record.wall_micros for record in trace[warmup:]]))
        logger.info(f"bench {method}: {means[method]:.1f} us per update")
    baseline = means["vgd"]
    return [
        BenchRow(m, means[m], means[m] / baseline if baseline > 0 else float("nan"), REFERENCE_RATIOS.get(m))
        for m in ordered
    ]
