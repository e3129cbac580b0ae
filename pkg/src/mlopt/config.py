"""
Configuration module for mlopt.

Default configs are built from MLOPT_* environment variables, falling back
to the published experiment settings. Variables are read when a builder is
called, so a dotenv file loaded by the CLI takes effect.
"""

import os
from typing import Callable, TypeVar

from .baselines import FdHyperConfig
from .errors import ConfigError
from .experiments.hyperopt import HyperoptSpec
from .linsolve import SolveMode
from .numderiv import FdConfig
from .optim import AdamConfig, SolverConfig

T = TypeVar("T")


def _env(name: str, parse: Callable[[str], T], default: T) -> T:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return parse(raw.strip())
    except ValueError as e:
        raise ConfigError(f"environment variable {name}={raw!r} is invalid: {e}") from e


def _schedule(raw: str) -> tuple[int, ...]:
    return tuple(int(part) for part in raw.split(","))


def _optional_float(raw: str) -> float | None:
    return None if raw.lower() == "none" else float(raw)


def solve_mode_from_env() -> SolveMode:
    return SolveMode(
        kind=_env("MLOPT_SOLVE", str, "direct"),
        cg_iters=_env("MLOPT_CG_ITERS", int, 3),
        cg_tol=_env("MLOPT_CG_TOL", float, 1e-10),
    )


def fd_config_from_env() -> FdConfig:
    return FdConfig(
        step_abs=_env("MLOPT_FD_STEP_ABS", float, 1e-5),
        step_rel=_env("MLOPT_FD_STEP_REL", float, 1e-5),
        hess_step_abs=_env("MLOPT_FD_HESS_STEP", float, 1e-4),
    )


def adam_config_from_env() -> AdamConfig:
    return AdamConfig(
        beta1=_env("MLOPT_ADAM_BETA1", float, 0.5),
        beta2=_env("MLOPT_ADAM_BETA2", float, 0.999),
        eps=_env("MLOPT_ADAM_EPS", float, 1e-8),
        lr0=_env("MLOPT_ADAM_LR", float, 0.1),
        decay=_env("MLOPT_ADAM_DECAY", float, 0.99),
    )


def fd_hyper_config_from_env() -> FdHyperConfig:
    return FdHyperConfig(
        step=_env("MLOPT_FD_STEP", float, 1e-3),
        exact=_env("MLOPT_FD_EXACT", lambda raw: raw.lower() in ("1", "true", "yes"), False),
        workers=_env("MLOPT_FD_WORKERS", int, 1),
    )


def solver_config_from_env(levels: int = 3) -> SolverConfig:
    """Solver settings for a problem with the given number of levels."""
    default_schedule = (30,) + (3,) * (levels - 2)
    fd = fd_hyper_config_from_env()
    return SolverConfig(
        outer_steps=_env("MLOPT_OUTER_STEPS", int, 200),
        inner_schedule=_env("MLOPT_INNER_SCHEDULE", _schedule, default_schedule),
        lr_inner=_env("MLOPT_LR_INNER", float, 1e-2),
        adam=adam_config_from_env(),
        seed=_env("MLOPT_SEED", int, None),
        stationarity_tol=_env("MLOPT_STATIONARITY_TOL", _optional_float, None),
        solve_mode=solve_mode_from_env(),
        table_mode=_env("MLOPT_TABLE_MODE", str, "gauss-newton"),
        outer_optimizer=_env("MLOPT_OUTER_OPTIMIZER", str, "adam"),
        fd_step=fd.step,
        fd_workers=fd.workers,
    )


def hyperopt_spec_from_env() -> HyperoptSpec:
    return HyperoptSpec(
        m=_env("MLOPT_HYPEROPT_M", int, 100),
        n=_env("MLOPT_HYPEROPT_N", int, 40),
        c=_env("MLOPT_HYPEROPT_C", float, 100.0),
        l1_smooth_delta=_env("MLOPT_L1_SMOOTH_DELTA", float, 1e-6),
    )
