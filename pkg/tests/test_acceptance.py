"""Acceptance suite: the twelve desk-scale criteria at pinned tolerances.

Each criterion runs through the shared verification implementation (the
same code the `mortensen verify` command executes) and prints one PASS/FAIL
line.  Scenario artifacts are cached on a session-scoped context so the
suite completes within its runtime budget.
"""

import pytest

from mortensen.harness import ScenarioConfig
from mortensen import verify


@pytest.fixture(scope="module")
def ctx():
    return verify.VerifyContext(ScenarioConfig())


def _run(check, ctx):
    result = check(ctx)
    print("\n" + result.line())
    assert result.passed, result.line()
    return result


def test_criterion_01_unitary_group(ctx):
    _run(verify.check_unitary_group, ctx)


def test_criterion_02_hamiltonian_conservation(ctx):
    _run(verify.check_hamiltonian, ctx)


def test_criterion_03_adjoint_gradient(ctx):
    _run(verify.check_adjoint_gradient, ctx)


def test_criterion_04_optimality_condition(ctx):
    _run(verify.check_optimality, ctx)


def test_criterion_05_hessian_duality(ctx):
    _run(verify.check_hessian_duality, ctx)


def test_criterion_06_coercivity_along_nominal(ctx):
    result = _run(verify.check_coercivity, ctx)
    assert result.detail["min_margin"] > 0


def test_criterion_07_linear_case_equivalence(ctx):
    _run(verify.check_linear_equivalence, ctx)


def test_criterion_08_zero_data_fixed_points(ctx):
    _run(verify.check_zero_data, ctx)


def test_criterion_09_time_zero_closed_form(ctx):
    _run(verify.check_time_zero, ctx)


def test_criterion_10_observer_vs_argmin_study(ctx):
    result = _run(verify.check_observer_argmin_study, ctx)
    assert result.detail["empirical_order"] >= 1.0


def test_criterion_11_hjb_residual(ctx):
    result = _run(verify.check_hjb, ctx)
    assert result.detail["residual"] <= 1e-3


def test_criterion_12_determinism_and_io(ctx):
    _run(verify.check_determinism, ctx)
