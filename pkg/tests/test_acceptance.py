# tests/test_acceptance.py
"""Full runs of the shipped experiment configurations; minutes each."""
from pathlib import Path

import pytest

from occupation_lab.config import load_config
from occupation_lab.harness import (run_couple_check, run_direct_check, run_lower_bound, run_poisson_concentration,
                                    run_qsd, run_typicality)

EXPERIMENTS = Path(__file__).resolve().parent.parent / "experiments"

pytestmark = pytest.mark.slow


@pytest.fixture(autouse=True)
def _no_seed_override(monkeypatch):
    monkeypatch.delenv("OCCUPATION_LAB_SEED", raising=False)


def _checks(report):
    return {check.test_id: check for check in report.checks}


def test_qsd_instance_at_n10():
    report = run_qsd(load_config(EXPERIMENTS / "qsd_n10.toml"))
    checks = _checks(report)
    assert checks["qsd-residual"].statistic <= 1e-10
    assert checks["qsd-fixed-point"].statistic <= 1e-8
    assert checks["qsd-positive"].passed
    assert checks["qsd-tv-at-t-star"].passed
    assert checks["hitting-trend"].passed
    assert checks["hitting-trend"].details["scales"] == [12, 24]
    assert [row["N"] for row in report.extras["hitting"]] == [12, 24]


def test_excursion_counts_and_coupling_at_n16():
    report = run_couple_check(load_config(EXPERIMENTS / "excursions_n16.toml"))
    checks = _checks(report)
    count = checks["excursion-count"]
    assert 0.7 < count.statistic < 1.4
    # the Poisson prediction alone misses J more often than the level at this scale
    assert checks["excursion-shortfall"].status in ("pass", "inconclusive")
    for test_id in ("coupling-long-excursions", "coupling-radon-nikodym", "coupling-domination"):
        assert checks[test_id].passed, test_id
    assert checks["coupling-negative-control"].passed
    assert report.extras["sigma"] == "SurvivalQsd"
    assert [row["test_id"] for row in report.extras["diagnostics"]] == ["coupling-plain-swap"]


def test_typicality_at_the_largest_scale():
    report = run_typicality(load_config(EXPERIMENTS / "f2_nu02.toml"))
    check = _checks(report)["typicality"]
    assert check.details["N"] == 32
    assert check.statistic >= 0.9


def test_control_level_is_atypical_and_decreasing():
    report = run_typicality(load_config(EXPERIMENTS / "f2_control.toml"))
    checks = _checks(report)
    assert checks["typicality-control"].passed
    assert checks["typicality-control-trend"].passed


def test_lower_bound_meets_the_budget():
    config = load_config(EXPERIMENTS / "f2_nu02.toml")
    report = run_lower_bound(config)
    checks = _checks(report)
    assert checks["lower-bound-budget"].passed
    assert checks["lower-bound-trend"].passed
    assert all(row["normalized_bound"] is not None for row in report.rows)


def test_direct_frequency_is_consistent_with_the_bound():
    report = run_direct_check(load_config(EXPERIMENTS / "f2_nu02.toml"))
    (row,) = report.rows
    assert row["N"] == 8
    assert report.checks[0].test_id == "direct-consistency"
    assert report.checks[0].passed


def test_poisson_concentration():
    report = run_poisson_concentration(load_config(EXPERIMENTS / "f2_nu02.toml"))
    checks = _checks(report)
    assert checks["concentration-downward"].statistic <= 0.05
    assert checks["concentration-mean"].passed
    assert checks["concentration-delta-growth"].passed
    assert all(check.passed for test_id, check in checks.items() if test_id.startswith("concentration-vacancy"))
    assert [row["Delta"] for row in report.extras["delta_sweep"]] == [0.25, 0.5, 1.0]
