import dataclasses
import functools
import logging
import pathlib
import sys
from datetime import datetime, timezone

import click
import pandas as pd
from dotenv import find_dotenv, load_dotenv

from . import __version__
from .config import hyperopt_spec_from_env, solver_config_from_env
from .errors import ConfigError, MloptError
from .experiments.hyperopt import build_hyperopt
from .experiments.protocol import REFERENCE_ANNOTATION, inference_run, timing_bench
from .experiments.stackelberg import StackelbergSpec, build_stackelberg
from .experiments.wine import VARIANTS, load_wine, split
from .optim import GRADIENT_METHODS, SolverConfig, run
from .problem import MultilevelProblem
from .types import TRACE_COLUMNS, PointStack, RunManifest, TraceRecord
from .verify import SUITES, complexity_report, run_suite

logger = logging.getLogger(__name__)


def _raising_module(e: BaseException) -> str:
    tb = e.__traceback__
    if tb is None:
        return "mlopt"
    while tb.tb_next is not None:
        tb = tb.tb_next
    name = tb.tb_frame.f_globals.get("__name__", "mlopt")
    return name.removeprefix("mlopt.")


def reports_errors(command):
    """Turn escaping MloptErrors into an error line on stderr and the error's exit code."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except MloptError as e:
            where = _raising_module(e)
            if e.step is not None:
                where += f" (step {e.step})"
            click.echo(f"error: {where}: {e}", err=True)
            for note in getattr(e, "__notes__", []):
                click.echo(f"  {note}", err=True)
            sys.exit(e.exit_code)

    return wrapper


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_trace(trace: list[TraceRecord], path: pathlib.Path, timing: bool, extra: tuple[str, ...] = ()):
    frame = pd.DataFrame([record.to_row(timing) for record in trace], columns=list(TRACE_COLUMNS))
    for column in extra:
        frame[column] = [getattr(record, column) for record in trace]
    frame.to_csv(path, index=False)


def _write_manifest(command: str, config: dict, seed: int | None, started_at: str, outputs: list[pathlib.Path]):
    manifest = RunManifest(
        command=command,
        config=config,
        seed=seed,
        version=__version__,
        started_at=started_at,
        finished_at=_now(),
        outputs=[str(p) for p in outputs],
    )
    for output in outputs:
        manifest.write(f"{output}.manifest")


def _solver_config(
    levels: int,
    steps: int | None,
    method: str,
    seed: int | None,
    solve: str | None,
    cg_iters: int | None,
    fd_workers: int | None,
    table_mode: str | None = None,
) -> SolverConfig:
    """Environment defaults overridden by whichever flags were given."""
    cfg = solver_config_from_env(levels)
    solve_mode = dataclasses.replace(
        cfg.solve_mode,
        **{k: v for k, v in {"kind": solve, "cg_iters": cg_iters}.items() if v is not None},
    )
    overrides = {
        "outer_steps": steps,
        "seed": seed,
        "fd_workers": fd_workers,
        "table_mode": table_mode,
    }
    return dataclasses.replace(
        cfg,
        gradient_method=method,
        solve_mode=solve_mode,
        **{k: v for k, v in overrides.items() if v is not None},
    )


@click.group(context_settings={"auto_envvar_prefix": "MLOPT"})
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="dotenv file with MLOPT_* settings; the real environment wins",
)
@click.option("-v", "--verbose", count=True)
@click.pass_context
def mlopt(ctx: click.Context, config_path: str | None, verbose: int):
    # Nothing overrides the real environment; an explicit file beats .env.
    if config_path is not None:
        load_dotenv(config_path, override=False)
    load_dotenv(find_dotenv(usecwd=True))

    ctx.ensure_object(dict)

    match verbose:
        case 0:
            logging.basicConfig(level=logging.ERROR)
        case 1:
            logging.basicConfig(level=logging.WARNING)
        case 2:
            logging.basicConfig(level=logging.INFO)
        case _:
            logging.basicConfig(level=logging.DEBUG)


solver_options = [
    click.option("--steps", type=int, default=None, help="Outer steps [default: 200]"),
    click.option("--seed", type=int, default=None, help="Seed, falls back to MLOPT_SEED"),
    click.option("--solve", type=click.Choice(["direct", "cg"]), default=None, help="Hessian solves"),
    click.option("--cg-iters", type=int, default=None, help="CG iterations per solve [default: 3]"),
    click.option("--fd-workers", type=int, default=None, help="Threads for the fd method"),
    click.option("--timing", is_flag=True, help="Write measured wall_micros instead of 0"),
    click.option("--progress", is_flag=True, help="Show a progress bar"),
]


def with_solver_options(command):
    for option in reversed(solver_options):
        command = option(command)
    return command


@mlopt.command()
@click.option("--dim", type=int, default=1, show_default=True)
@click.option("--levels", type=int, default=3, show_default=True)
@click.option("--method", type=click.Choice(GRADIENT_METHODS), default="id", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=pathlib.Path), default=None)
@with_solver_options
@reports_errors
def stackelberg(
    dim: int,
    levels: int,
    method: str,
    out: pathlib.Path | None,
    steps: int | None,
    seed: int | None,
    solve: str | None,
    cg_iters: int | None,
    fd_workers: int | None,
    timing: bool,
    progress: bool,
):
    """
    Run the Stackelberg game and write its trace CSV.
    """
    started_at = _now()
    cfg = _solver_config(levels, steps, method, seed, solve, cg_iters, fd_workers)
    out = out or pathlib.Path(f"stackelberg_{method}.csv")
    problem = build_stackelberg(StackelbergSpec(dim=dim, levels=levels))

    trace = run(problem, cfg, progress=progress)
    _write_trace(trace, out, timing)
    if trace:
        last = trace[-1]
        click.echo(f"{len(trace)} steps, final f1 {last.f1:.6g}, mse {last.mse_to_ref:.3e}")
    else:
        click.echo("0 steps")

    config = dataclasses.asdict(cfg) | {"dim": dim, "levels": levels, "timing": timing}
    _write_manifest("stackelberg", config, cfg.seed, started_at, [out])


@mlopt.command()
@click.option(
    "--data",
    type=click.Path(dir_okay=False, path_type=pathlib.Path),
    required=True,
    help="Semicolon-delimited winequality CSV",
)
@click.option("--variant", type=click.Choice(VARIANTS), default="red", show_default=True)
@click.option("--m", "m", type=int, default=None, help="Validation rows [default: 100]")
@click.option("--n", "n", type=int, default=None, help="Training rows [default: 40]")
@click.option("--c", "c", type=float, default=None, help="Attacker penalty [default: 100]")
@click.option("--method", type=click.Choice(GRADIENT_METHODS), default="id", show_default=True)
@click.option("--table-mode", type=click.Choice(["gauss-newton", "exact-fd"]), default=None)
@click.option(
    "--inference-every",
    type=int,
    default=0,
    show_default=True,
    help="Also run inference every k steps; the first and last steps always get one",
)
@click.option("--inference-solver", type=click.Choice(["newton", "gd"]), default="newton", show_default=True)
@click.option("--inference-tol", type=float, default=1e-8, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=pathlib.Path), default=None)
@with_solver_options
@reports_errors
def hyperopt(
    data: pathlib.Path,
    variant: str,
    m: int | None,
    n: int | None,
    c: float | None,
    method: str,
    table_mode: str | None,
    inference_every: int,
    inference_solver: str,
    inference_tol: float,
    out: pathlib.Path | None,
    steps: int | None,
    seed: int | None,
    solve: str | None,
    cg_iters: int | None,
    fd_workers: int | None,
    timing: bool,
    progress: bool,
):
    """
    Tune the regularization weight under data poisoning and write the trace CSV.
    """
    if method == "vgd":
        raise ConfigError(
            "vgd is undefined here: the validation loss does not depend on lambda directly, "
            "so its partial gradient is identically zero"
        )
    if inference_every < 0:
        raise ConfigError(f"--inference-every must be non-negative, got {inference_every}")
    started_at = _now()
    cfg = _solver_config(3, steps, method, seed, solve, cg_iters, fd_workers, table_mode)
    spec = dataclasses.replace(
        hyperopt_spec_from_env(), **{k: v for k, v in {"m": m, "n": n, "c": c}.items() if v is not None}
    )
    seed = cfg.seed if cfg.seed is not None else 0
    train, val = split(load_wine(data, variant), spec.m, spec.n, seed)
    problem = build_hyperopt(spec, train, val)
    out = out or pathlib.Path(f"hyperopt_{variant}_{method}.csv")

    def infer(record: TraceRecord, point: PointStack):
        due = record.step in (1, cfg.outer_steps) or (inference_every and record.step % inference_every == 0)
        if not due:
            return
        result = inference_run(
            problem,
            point.values[0],
            tol=inference_tol,
            warm=point,
            solver=inference_solver,
            table_mode="exact-fd",
        )
        record.f1_inference = result.f1
        logger.info(f"step {record.step}: inference f1 {result.f1:.6g}")

    trace = run(problem, cfg, progress=progress, on_step=infer)
    _write_trace(trace, out, timing, extra=("f1_inference",))
    if trace:
        click.echo(
            f"{len(trace)} steps, inference f1 {trace[0].f1_inference:.6g} -> {trace[-1].f1_inference:.6g}"
        )
    else:
        click.echo("0 steps")

    config = dataclasses.asdict(cfg) | {
        "spec": dataclasses.asdict(spec),
        "data": str(data),
        "variant": variant,
        "inference_every": inference_every,
        "inference_solver": inference_solver,
        "inference_tol": inference_tol,
        "timing": timing,
    }
    _write_manifest("hyperopt", config, seed, started_at, [out])


@mlopt.command()
@click.option("--suite", type=click.Choice(SUITES), default="all", show_default=True)
@click.option("--levels", type=int, default=4, show_default=True)
@click.option("--dim", type=int, default=5, show_default=True)
@click.option("--trials", type=int, default=20, show_default=True)
@click.option("--seed", type=int, default=None, help="Seed, falls back to MLOPT_SEED")
@click.pass_context
@reports_errors
def verify(ctx: click.Context, suite: str, levels: int, dim: int, trials: int, seed: int | None):
    """
    Check the gradient paths against closed forms, finite differences and each other.
    """
    if seed is None:
        seed = solver_config_from_env().seed or 0
    if suite == "complexity":
        for row in complexity_report():
            click.echo(f"n={row.levels} d={row.dim:<3} {row.seconds * 1e3:9.3f} ms  {row.normalized:.3e} s/(d^3 n^4)")
        return

    results = run_suite(suite, trials=trials, seed=seed, levels=levels, dim=dim)
    if not results:
        click.echo(f"warning: suite {suite} ran no checks; passing vacuously", err=True)
    for result in results:
        click.echo(result.line())
    failed = [r for r in results if not r.passed]
    worst = max((r.deviation for r in results), default=0.0)
    click.echo(f"{len(results) - len(failed)}/{len(results)} checks passed, max deviation {worst:.3e}")
    if failed:
        ctx.exit(1)


@mlopt.command()
@click.option("--problem", "problem_name", type=click.Choice(["stackelberg", "hyperopt"]), default="stackelberg")
@click.option("--dim", type=int, default=1, show_default=True)
@click.option("--data", type=click.Path(dir_okay=False, path_type=pathlib.Path), default=None)
@click.option(
    "--method",
    "methods",
    type=click.Choice(GRADIENT_METHODS),
    multiple=True,
    default=("vgd", "fd", "id"),
    show_default=True,
)
@click.option("--repeats", type=int, default=5, show_default=True)
@click.option("--warmup", type=int, default=2, show_default=True)
@click.option("--seed", type=int, default=None, help="Seed, falls back to MLOPT_SEED")
@click.option("--out", type=click.Path(dir_okay=False, path_type=pathlib.Path), default=None)
@reports_errors
def bench(
    problem_name: str,
    dim: int,
    data: pathlib.Path | None,
    methods: tuple[str, ...],
    repeats: int,
    warmup: int,
    seed: int | None,
    out: pathlib.Path | None,
):
    """
    Time one outer update per gradient method relative to vgd.
    """
    started_at = _now()
    cfg = solver_config_from_env(3)
    seed = seed if seed is not None else (cfg.seed or 0)
    problem: MultilevelProblem
    if problem_name == "hyperopt":
        if data is None:
            raise ConfigError("--data is required for the hyperopt benchmark")
        spec = hyperopt_spec_from_env()
        train, val = split(load_wine(data), spec.m, spec.n, seed)
        problem = build_hyperopt(spec, train, val)
    else:
        problem = build_stackelberg(StackelbergSpec(dim=dim))

    rows = timing_bench(problem, list(methods), cfg, repeats=repeats, warmup=warmup)
    frame = pd.DataFrame([dataclasses.asdict(row) for row in rows])
    click.echo(frame.to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    click.echo(REFERENCE_ANNOTATION)
    if out is not None:
        frame.to_csv(out, index=False)
        config = dataclasses.asdict(cfg) | {
            "problem": problem_name,
            "dim": dim,
            "methods": list(methods),
            "repeats": repeats,
            "warmup": warmup,
        }
        _write_manifest("bench", config, seed, started_at, [out])
