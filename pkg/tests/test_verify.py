import dataclasses

import pytest

from nbp.schedule import ScheduleConfig, build_schedule
from nbp.verify import (
    check_correction_table,
    check_gamma_bar_recurrence,
    check_reparameterization,
    check_telescoping,
    format_table,
    gradient_check_error,
    reparameterization_residual,
    run_identity_suite,
)


@pytest.fixture(scope="module")
def suite():
    return run_identity_suite()


def test_suite_passes_on_default_schedule(suite):
    failed = [r.name for r in suite if not r.passed]
    assert not failed
    assert len(suite) == 14


def test_suite_passes_with_bridge_removed():
    results = run_identity_suite(ablation=True)
    assert all(r.passed for r in results)


def test_table_formatting(suite):
    table = format_table(suite)
    assert table.splitlines()[0].startswith("identity")
    assert table.rstrip().endswith("14/14 passed")


def tampered(**changes):
    s = build_schedule(ScheduleConfig())
    return dataclasses.replace(s, **changes)


def test_flipped_correction_sign_is_caught():
    s = build_schedule(ScheduleConfig())
    bad = tampered(c_bridge=-s.c_bridge)
    assert not check_correction_table(bad).passed
    assert reparameterization_residual(bad) > 1e-3
    assert not check_reparameterization(bad).passed
    failed = {r.name for r in run_identity_suite(schedule=bad) if not r.passed}
    assert "reverse mean with true noise = posterior mean" in failed


def test_broken_gamma_bar_is_caught():
    s = build_schedule(ScheduleConfig())
    gb = s.gamma_bar.copy()
    gb[495] *= 1.001
    assert not check_gamma_bar_recurrence(tampered(gamma_bar=gb)).passed


def test_broken_variance_is_caught():
    s = build_schedule(ScheduleConfig())
    ab = s.alpha_bar.copy()
    ab[100] += 1e-6
    assert not check_telescoping(tampered(alpha_bar=ab)).passed


def test_crashing_check_is_reported_not_raised():
    s = build_schedule(ScheduleConfig())
    bad = tampered(gamma=s.gamma[:10])
    results = run_identity_suite(schedule=bad)
    assert any(not r.passed for r in results)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_check_seeds(seed):
    assert gradient_check_error(seed) <= 1e-6
