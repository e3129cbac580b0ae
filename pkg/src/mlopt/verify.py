"""
Invariant suites behind `mlopt verify`.

Each check compares an implicit-differentiation result against an
independent answer (closed form, central differences of the exactly
reduced value, or the other gradient path) and reports the deviation.
"""

import logging
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .linsolve import DIRECT, SolveMode
from .nlevel import build_table, grad_full, hypergradient, path_sum, trilevel_consistency
from .numderiv import FdConfig, fd_grad_block
from .optim import theorem4_check
from .problem import MultilevelProblem
from .trilevel import grad_trilevel
from .experiments.polynomial import quadratic_chain, random_quadratic_problem
from .experiments.stackelberg import StackelbergSpec, build_stackelberg
from .types import PointStack

logger = logging.getLogger(__name__)

SUITES = ("stackelberg", "quadratic", "theorem4", "complexity", "all")


@dataclass
class CheckResult:
    suite: str
    name: str
    deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.deviation <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.suite}/{self.name}: deviation {self.deviation:.3e} (tolerance {self.tolerance:.1e})"


def _relative(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def exact_fd_hypergradient(problem: MultilevelProblem, x1: np.ndarray, cfg: FdConfig | None = None) -> np.ndarray:
    """Central differences of the exactly reduced top-level value."""
    return fd_grad_block(lambda p: problem.reduced_value(p.values[0]), PointStack([x1]), 0, cfg)


def stackelberg_suite(levels: int = 3, dims: tuple[int, ...] = (1, 5)) -> list[CheckResult]:
    results = []
    for dim in dims:
        problem = build_stackelberg(StackelbergSpec(dim=dim, levels=levels))
        for x in (0.0, 0.3, 0.5):
            x1 = np.full(dim, x)
            point = problem.exact_response(x1)
            expected = problem.exact_hypergradient(x1)
            recursive = hypergradient(problem, point, DIRECT)
            results.append(CheckResult("stackelberg", f"d={dim} x={x} nlevel", _relative(recursive, expected), 1e-10))
            if levels == 3:
                f1, f2, f3 = problem.objectives
                closed = grad_trilevel(f1, f2, f3, point, DIRECT)
                results.append(CheckResult("stackelberg", f"d={dim} x={x} trilevel", _relative(closed, expected), 1e-10))
                results.append(
                    CheckResult("stackelberg", f"d={dim} x={x} consistency", trilevel_consistency(problem, point), 1e-8)
                )
    return results


def quadratic_suite(trials: int, seed: int = 0, levels: int = 4, max_dim: int = 5) -> list[CheckResult]:
    results = []
    for trial in range(trials):
        rng = np.random.default_rng(seed + trial)

        dims3 = [int(d) for d in rng.integers(1, min(max_dim, 6) + 1, size=3)]
        problem = random_quadratic_problem(seed + trial, dims3)
        x1 = rng.normal(size=dims3[0])
        point = problem.exact_response(x1)
        f1, f2, f3 = problem.objectives
        closed = grad_trilevel(f1, f2, f3, point, DIRECT)
        reference = exact_fd_hypergradient(problem, x1)
        results.append(CheckResult("quadratic", f"trial {trial} trilevel vs fd", _relative(closed, reference), 1e-5))
        results.append(
            CheckResult("quadratic", f"trial {trial} consistency", trilevel_consistency(problem, point), 1e-8)
        )

        small = [min(d, 3) for d in dims3]
        well_conditioned = random_quadratic_problem(seed + trial, small, coupling=0.2)
        small_point = well_conditioned.exact_response(rng.normal(size=small[0]))
        results.append(
            CheckResult(
                "quadratic",
                f"trial {trial} cg consistency",
                trilevel_consistency(well_conditioned, small_point, SolveMode("cg", cg_iters=3)),
                1e-6,
            )
        )

        dims2 = [int(d) for d in rng.integers(1, max_dim + 1, size=2)]
        bilevel = random_quadratic_problem(seed + trial, dims2)
        bpoint = bilevel.exact_response(rng.normal(size=dims2[0]))
        table = build_table(bilevel, bpoint, DIRECT)
        f2 = bilevel.objectives[1]
        formula = -np.linalg.solve(f2.hess_block(bpoint, 1, 1), f2.hess_block(bpoint, 1, 0))
        results.append(
            CheckResult("quadratic", f"trial {trial} bilevel reduction", _relative(table.total[(1, 0)], formula), 1e-10)
        )

        dimsn = [int(d) for d in rng.integers(1, max_dim + 1, size=levels)]
        deep = random_quadratic_problem(seed + trial, dimsn)
        xn = rng.normal(size=dimsn[0])
        deep_point = deep.exact_response(xn)
        table = build_table(deep, deep_point, DIRECT)
        results.append(
            CheckResult(
                "quadratic",
                f"trial {trial} {levels}-level vs fd",
                _relative(grad_full(deep, deep_point, table), exact_fd_hypergradient(deep, xn)),
                1e-5,
            )
        )
        jacobian = deep.response_jacobian()
        last = sum(dimsn[:-1])
        results.append(
            CheckResult(
                "quadratic",
                f"trial {trial} path sum",
                _relative(path_sum(table, levels - 1, 0), table.total[(levels - 1, 0)]),
                1e-9,
            )
        )
        results.append(
            CheckResult(
                "quadratic",
                f"trial {trial} responder jacobian",
                _relative(table.total[(levels - 1, 0)], jacobian[last:]),
                1e-8,
            )
        )

        chain = quadratic_chain(levels, int(rng.integers(1, max_dim + 1)))
        xc = rng.normal(size=chain.dims[0])
        chain_point = chain.exact_response(xc)
        results.append(
            CheckResult(
                "quadratic",
                f"trial {trial} chain vs fd",
                _relative(hypergradient(chain, chain_point, DIRECT), exact_fd_hypergradient(chain, xc)),
                1e-5,
            )
        )
    return results


def theorem4_suite(trials: int, seed: int = 0, rounds: int = 100, max_dim: int = 4) -> list[CheckResult]:
    results = []
    for trial in range(trials):
        rng = np.random.default_rng(seed + trial)
        dims = [int(d) for d in rng.integers(1, max_dim + 1, size=3)]
        problem = random_quadratic_problem(seed + trial, dims, nonnegative_top=True)
        outcome = theorem4_check(problem, rounds=rounds, x0=rng.normal(size=dims[0]))
        results.append(
            CheckResult("theorem4", f"trial {trial} bound", max(0.0, outcome.lhs / outcome.rhs - 1.0), 1e-9)
        )
    return results


@dataclass
class ComplexityRow:
    levels: int
    dim: int
    seconds: float

    @property
    def normalized(self) -> float:
        """Seconds per d^3 n^4."""
        return self.seconds / (self.dim**3 * self.levels**4)


def complexity_report(
    levels: tuple[int, ...] = (2, 3, 4, 5), dims: tuple[int, ...] = (4, 8, 16), repeats: int = 3
) -> list[ComplexityRow]:
    """Best-of-repeats wall time of build_table on quadratic chains."""
    rows = []
    for n in levels:
        for d in dims:
            problem = quadratic_chain(n, d)
            point = problem.exact_response(np.ones(d))
            best = float("inf")
            for _ in range(repeats):
                started = time.perf_counter()
                build_table(problem, point, DIRECT, stationarity_tol=None)
                best = min(best, time.perf_counter() - started)
            row = ComplexityRow(n, d, best)
            logger.info(f"n={n} d={d}: {best * 1e3:.3f} ms, {row.normalized:.3e} s per d^3 n^4")
            rows.append(row)
    return rows


def run_suite(
    suite: str, trials: int = 20, seed: int = 0, levels: int = 4, dim: int = 5
) -> list[CheckResult]:
    """
    Run one named suite ("all" runs stackelberg, quadratic and theorem4).

    Returns:
        The checks; an empty list means nothing was checked.
    """
    if suite not in SUITES or suite == "complexity":
        raise ConfigError(f"unknown check suite {suite!r}")
    if trials < 0:
        raise ConfigError(f"trials must be non-negative, got {trials}")
    if levels < 2 or dim < 1:
        raise ConfigError(f"need at least 2 levels and dimension 1, got levels={levels} dim={dim}")
    results: list[CheckResult] = []
    if suite in ("stackelberg", "all"):
        results += stackelberg_suite(levels=3)
        if levels != 3:
            results += stackelberg_suite(levels=levels)
    if suite in ("quadratic", "all"):
        results += quadratic_suite(trials, seed, levels, dim)
    if suite in ("theorem4", "all"):
        results += theorem4_suite(trials, seed)
    if not results:
        logger.warning(f"suite {suite} ran no checks; passing vacuously")
    return results
