import logging

import numpy as np
import pytest

from mlopt.errors import ConfigError
from mlopt.experiments.stackelberg import StackelbergSpec, build_stackelberg
from mlopt.verify import (
    CheckResult,
    complexity_report,
    exact_fd_hypergradient,
    quadratic_suite,
    run_suite,
    stackelberg_suite,
    theorem4_suite,
)


def test_check_result_line():
    ok = CheckResult("quadratic", "trial 0 path sum", 1e-12, 1e-9)
    bad = CheckResult("quadratic", "trial 1 path sum", 1e-3, 1e-9)
    assert ok.passed
    assert not bad.passed
    assert ok.line() == "PASS quadratic/trial 0 path sum: deviation 1.000e-12 (tolerance 1.0e-09)"
    assert bad.line().startswith("FAIL ")


def test_stackelberg_suite_passes():
    results = stackelberg_suite()
    # nlevel, trilevel and consistency at three points for two dimensions
    assert len(results) == 18
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]


def test_deeper_stackelberg_has_no_trilevel_checks():
    results = stackelberg_suite(levels=5, dims=(2,))
    assert len(results) == 3
    assert all(r.passed for r in results)


def test_quadratic_suite_passes():
    results = quadratic_suite(trials=3, seed=0, levels=4, max_dim=4)
    assert len(results) == 3 * 8
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]


def test_theorem4_suite_passes():
    results = theorem4_suite(trials=3, seed=5)
    assert len(results) == 3
    assert all(r.passed for r in results)


def test_zero_trials_pass_vacuously(caplog):
    with caplog.at_level(logging.WARNING, logger="mlopt.verify"):
        assert run_suite("quadratic", trials=0) == []
    assert "vacuously" in caplog.text


def test_all_includes_every_suite():
    suites = {r.suite for r in run_suite("all", trials=1, levels=3, dim=3)}
    assert suites == {"stackelberg", "quadratic", "theorem4"}


@pytest.mark.parametrize(
    "kwargs",
    [{"suite": "complexity"}, {"suite": "fuzz"}, {"suite": "quadratic", "trials": -1}, {"suite": "all", "levels": 1}],
)
def test_run_suite_rejects(kwargs):
    with pytest.raises(ConfigError):
        run_suite(**kwargs)


def test_exact_fd_hypergradient():
    problem = build_stackelberg(StackelbergSpec(dim=2))
    x1 = np.array([0.1, 0.7])
    np.testing.assert_allclose(exact_fd_hypergradient(problem, x1), problem.exact_hypergradient(x1), atol=1e-8)


def test_complexity_report_rows():
    rows = complexity_report(levels=(2, 3), dims=(2,), repeats=1)
    assert [(r.levels, r.dim) for r in rows] == [(2, 2), (3, 2)]
    assert all(r.seconds > 0 for r in rows)
    assert rows[1].normalized == pytest.approx(rows[1].seconds / (8 * 81))
