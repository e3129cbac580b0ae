import json
import pathlib
from dataclasses import dataclass, field
from typing import Any

import dotenv
import numpy as np

from .errors import NumericError


@dataclass
class PointStack:
    """
    The current iterate (x_1, ..., x_n) of a multilevel problem.

    values[i] is the flat vector of level i (0-based). Arrays are never
    modified in place: every update builds a new array, so copies may share
    the arrays of untouched levels.

    residuals[i] is the reduced stationarity residual of level i measured by
    the last lower-level solve, None when it was never measured. Entry 0
    (the top level) is always None.
    """

    values: list[np.ndarray]
    residuals: list[float | None] = field(default_factory=list)

    def __post_init__(self):
        self.values = [np.atleast_1d(np.asarray(v, dtype=float)).ravel() for v in self.values]
        if not self.residuals:
            self.residuals = [None] * len(self.values)

    @classmethod
    def zeros(cls, dims: list[int]) -> "PointStack":
        return cls([np.zeros(d) for d in dims])

    @property
    def levels(self) -> int:
        return len(self.values)

    @property
    def dims(self) -> list[int]:
        return [v.size for v in self.values]

    def copy(self) -> "PointStack":
        return PointStack([v.copy() for v in self.values], list(self.residuals))

    def with_level(self, level: int, value: np.ndarray) -> "PointStack":
        values = list(self.values)
        values[level] = np.asarray(value, dtype=float).ravel()
        return PointStack(values, list(self.residuals))

    def flat(self) -> np.ndarray:
        return np.concatenate(self.values)

    def check_finite(self, context: str = ""):
        for i, v in enumerate(self.values):
            if not np.all(np.isfinite(v)):
                raise NumericError(f"non-finite entries in level {i + 1}{context}", level=i)

    def max_lower_residual(self) -> float | None:
        measured = [r for r in self.residuals[1:] if r is not None]
        return max(measured) if measured else None


TRACE_COLUMNS = ("step", "f1", "grad_norm_sq", "cum_avg_grad_sq", "mse", "wall_micros")


@dataclass
class TraceRecord:
    step: int
    f1: float
    grad_norm_sq: float
    # (1/k) * sum of grad_norm_sq over steps 1..k
    cum_avg_grad_sq: float
    mse_to_ref: float | None
    wall_micros: int
    cg_residual: float | None = None
    lower_residual: float | None = None
    f1_inference: float | None = None

    def to_row(self, timing: bool = True) -> dict[str, Any]:
        return {
            "step": self.step,
            "f1": self.f1,
            "grad_norm_sq": self.grad_norm_sq,
            "cum_avg_grad_sq": self.cum_avg_grad_sq,
            "mse": self.mse_to_ref,
            "wall_micros": self.wall_micros if timing else 0,
        }


@dataclass
class RunManifest:
    """
    Sidecar record of one command invocation.

    Serialized as a dotenv file so it stays readable and can be loaded back
    with python-dotenv. Config values are JSON encoded to keep their types.
    """

    command: str
    config: dict[str, Any]
    seed: int | None
    version: str
    started_at: str
    finished_at: str
    outputs: list[str] = field(default_factory=list)

    def to_env(self) -> dict[str, str]:
        env = {
            "COMMAND": self.command,
            "SEED": "" if self.seed is None else str(self.seed),
            "VERSION": self.version,
            "STARTED_AT": self.started_at,
            "FINISHED_AT": self.finished_at,
            "OUTPUTS": json.dumps(self.outputs),
        }
        for key, value in sorted(self.config.items()):
            env[f"CONFIG_{key.upper()}"] = json.dumps(value)
        return env

    @classmethod
    def from_env(cls, env: dict[str, str | None]) -> "RunManifest":
        config = {
            key[len("CONFIG_"):].lower(): json.loads(value)
            for key, value in env.items()
            if key.startswith("CONFIG_") and value is not None
        }
        seed = env.get("SEED")
        return cls(
            command=env["COMMAND"],
            config=config,
            seed=int(seed) if seed else None,
            version=env["VERSION"],
            started_at=env["STARTED_AT"],
            finished_at=env["FINISHED_AT"],
            outputs=json.loads(env.get("OUTPUTS") or "[]"),
        )

    def write(self, path: str | pathlib.Path):
        path = pathlib.Path(path)
        path.write_text("")
        for key, value in self.to_env().items():
            dotenv.set_key(path, key, value, quote_mode="always")

    @classmethod
    def read(cls, path: str | pathlib.Path) -> "RunManifest":
        return cls.from_env(dotenv.dotenv_values(path))
