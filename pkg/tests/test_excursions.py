# tests/test_excursions.py
import numpy as np
import pytest

from occupation_lab import excursions
from occupation_lab.errors import ConvergenceError, InsufficientReplicasError, ScaffoldError
from occupation_lab.excursions import (
    LongExcursionObserver, QsdDistribution, ShortExcursionObserver, SurvivalQsd, build_scaffold, check_exponents,
    compute_qsd, conditional_tv_profile, coupling_chain_check, default_count_start, domination_check,
    excursion_count_experiment, hitting_distribution_comparison, hitting_law, negative_control, poisson_count_check,
    qsd_fixed_point_error, qsd_sampler, sample_long_excursions, sample_poisson_excursions,
)
from occupation_lab.lattice import Box, SiteIndex

VALID = (0.04, 0.10, 0.15, 0.20, 0.24)


@pytest.fixture(scope="module")
def qsd(small_tilt, small_scaffold):
    return compute_qsd(small_tilt, small_scaffold)


def test_valid_exponents():
    check_exponents(VALID, 3)


@pytest.mark.parametrize("exponents,clause", [
    ((0.10, 0.16, 0.18, 0.20, 0.22), "r_1 < (d-2)/(d-1) r_2"),
    ((0.04, 0.10, 0.15, 0.20, 0.30), "r_j in (0, 1/4)"),
    ((0.04, 0.10, 0.10, 0.20, 0.24), "r_1 < r_2 < ... < r_5"),
])
def test_exponent_clauses(exponents, clause):
    with pytest.raises(ScaffoldError) as info:
        check_exponents(exponents, 3)
    assert clause in str(info.value)


def test_exponent_mode_radii():
    scaffold = build_scaffold((0, 0, 0), 10 ** 8, 1.0, exponents=VALID)
    assert scaffold.radii == (2, 6, 15, 39, 83, 10 ** 6)
    assert scaffold.exit_threshold == pytest.approx(1e8 ** 1.1)
    assert scaffold.mode == "exponents"


def test_direct_mode_radii():
    scaffold = build_scaffold((0, 0, 0), 200, 30.0, radii=(2, 4, 6, 8, 10))
    assert scaffold.radii[-1] == 60
    assert scaffold.exit_threshold == 400.0
    assert scaffold.box(6) == Box((0, 0, 0), 60)
    assert scaffold.as_dict()["mode"] == "direct"


@pytest.mark.parametrize("radii,clause", [
    ((2, 2, 6, 8, 10), "A1 strictly inside A2"),
    ((0, 2, 6, 8, 10), "A1 is not a single point"),
    ((2, 4, 6, 8, 70), "A5 strictly inside A6"),
])
def test_nesting_clauses(radii, clause):
    with pytest.raises(ScaffoldError) as info:
        build_scaffold((0, 0, 0), 200, 30.0, radii=radii)
    assert clause in str(info.value)


def test_scaffold_needs_one_source():
    with pytest.raises(ScaffoldError):
        build_scaffold((0, 0, 0), 200, 30.0)
    with pytest.raises(ScaffoldError):
        build_scaffold((0, 0, 0), 200, 30.0, exponents=VALID, radii=(2, 4, 6, 8, 10))


def test_scaffold_placement(small_tilt):
    with pytest.raises(ScaffoldError) as info:
        build_scaffold((30, 0, 0), 6, 100.0, radii=(1, 2, 3, 4, 5), domain=("ball", 0.5, 0.1))
    assert "x0 in D^delta_N" in str(info.value)
    with pytest.raises(ScaffoldError) as info:
        build_scaffold((5, 0, 0), 6, 100.0, radii=(1, 2, 3, 4, 5), spec=small_tilt)
    assert "A6 inside (U_eta)^N" in str(info.value)


def test_qsd(small_tilt, small_scaffold, qsd):
    assert qsd.sigma.sum() == pytest.approx(1.0)
    assert np.all(qsd.sigma >= 0)
    assert qsd.eigenvalue > 0
    assert not small_scaffold.index(2).contains(qsd.sites).any()
    assert qsd.residual <= 1e-10
    assert qsd_fixed_point_error(small_tilt, qsd) < 1e-8


def test_conditional_law_approaches_the_qsd(small_tilt, qsd):
    rows = conditional_tv_profile(small_tilt, None, qsd, (0, 0, 5), [1.0, 500.0])
    assert rows[0]["tv"] > rows[1]["tv"]
    assert 0 < rows[1]["survival"] < rows[0]["survival"] <= 1.0
    with pytest.raises(ScaffoldError):
        conditional_tv_profile(small_tilt, None, qsd, (0, 0, 0), [1.0])


def test_hitting_law_is_a_distribution(small_tilt, small_scaffold, qsd):
    law = hitting_law(small_tilt, small_scaffold.index(1), qsd.sites, qsd.sigma)
    assert len(law) == 27
    assert law.sum() == pytest.approx(1.0, abs=1e-8)
    assert np.all(law >= -1e-12)


def test_hitting_comparison_against_equilibrium_measures(small_tilt, small_scaffold, qsd):
    result = hitting_distribution_comparison(small_tilt, small_scaffold, qsd)
    assert result.hitting.sum() == pytest.approx(1.0, abs=1e-8)
    assert result.srw_equilibrium.sum() == pytest.approx(1.0)
    assert result.tilted_equilibrium.sum() == pytest.approx(1.0)
    assert all(np.isfinite(v) and v >= 0 for v in result.as_dict().values())


def test_excursion_count_records(small_tilt, small_scaffold):
    count, shortfall = excursion_count_experiment(small_tilt, small_scaffold, (0, 0, 0), 4, np.random.default_rng(12))
    assert count.test_id == "excursion-count"
    assert count.statistic > 0
    assert count.details["mean_count"] >= 1
    assert count.details["bookkeeping_error"] < 1e-8
    assert shortfall.test_id == "excursion-shortfall"
    assert 0.0 <= shortfall.statistic <= 1.0
    assert 0.0 <= shortfall.details["predicted"] <= 1.0
    if shortfall.status == "fail":
        assert shortfall.details["predicted"] <= shortfall.threshold


def test_default_count_start_lies_outside_a6(small_tilt, small_scaffold):
    start = default_count_start(small_scaffold)
    assert start == (small_scaffold.radii[5] + 1, 0, 0)
    assert not small_scaffold.index(6).contains(np.array([start]))[0]
    small_tilt.require_inside(start)


def _hold(observer, site, t0, hold):
    observer.on_hold(np.array([0]), np.array([site]), np.array([t0]), np.array([hold]))


def test_long_excursion_bookkeeping():
    a1 = SiteIndex([(0, 0, 0)])
    a2 = SiteIndex(Box.centered(1).sites())
    observer = LongExcursionObserver(a1, a2, t_star=2.0)
    observer.start(1)
    _hold(observer, (5, 0, 0), 0.0, 1.0)
    _hold(observer, (0, 0, 0), 1.0, 1.0)
    _hold(observer, (1, 0, 0), 2.0, 2.0)
    _hold(observer, (2, 0, 0), 4.0, 1.0)
    _hold(observer, (3, 0, 0), 5.0, 3.0)
    _hold(observer, (1, 0, 0), 8.0, 0.5)
    batch = observer.batch("path")
    assert len(batch) == 1
    assert batch.durations.tolist() == [5.0]
    assert batch.complete.tolist() == [True]
    assert batch.increments.sum() == pytest.approx(3.0)
    assert batch.entry_sites.tolist() == [[0, 0, 0]]
    assert batch.exit_sites.tolist() == [[3, 0, 0]]
    assert observer.count.tolist() == [1]
    assert observer.bookkeeping_error() == pytest.approx(0.0)


def test_short_excursion_stops_on_leaving():
    a1 = SiteIndex([(0, 0, 0)])
    a2 = SiteIndex(Box.centered(1).sites())
    observer = ShortExcursionObserver(a1, a2)
    observer.start(1)
    _hold(observer, (5, 0, 0), 0.0, 1.0)
    assert not observer.inside[0]
    _hold(observer, (0, 0, 0), 1.0, 1.0)
    _hold(observer, (1, 0, 0), 2.0, 2.0)
    assert not observer.finished[0]
    _hold(observer, (2, 0, 0), 4.0, 1.0)
    assert observer.finished[0]
    assert observer.exit_time[0] - observer.entry_time[0] == 3.0
    assert observer.fields.sum() == 3.0


def test_long_excursions_of_confined_paths(small_tilt, small_scaffold):
    result = sample_long_excursions(small_tilt, small_scaffold, (0, 0, 0), np.random.default_rng(8), replicas=4)
    assert result.bookkeeping_error < 1e-8
    assert np.all(result.counts >= 1)
    assert len(result.batch) == result.counts.sum()
    assert result.local_intensity > 0
    assert 0.0 <= result.shortfall() <= 1.0


def test_zero_intensity_gives_no_excursions(small_tilt, small_scaffold, qsd):
    rng = np.random.default_rng(9)
    for which in ("eta1", "eta2"):
        sample = sample_poisson_excursions(small_tilt, small_scaffold, which, rng, replicas=5, qsd=qsd, factor=0.0)
        assert sample.counts.tolist() == [0] * 5
        assert sample.fields.shape == (5, 125)
        assert not sample.fields.any()
    with pytest.raises(ValueError):
        sample_poisson_excursions(small_tilt, small_scaffold, "eta3", rng)


def test_eta2_counts_are_poisson(small_tilt, small_scaffold):
    sample = sample_poisson_excursions(small_tilt, small_scaffold, "eta2", np.random.default_rng(10), replicas=500)
    record = poisson_count_check(sample)
    assert record.test_id == "eta2-count-poisson"
    assert record.statistic > 1e-4
    assert len(sample.batch) == sample.counts.sum()


def test_coupling_needs_enough_replicas(small_tilt, small_scaffold, qsd):
    with pytest.raises(InsufficientReplicasError):
        coupling_chain_check(small_tilt, small_scaffold, 50, np.random.default_rng(0), qsd=qsd)


def test_qsd_sampler_is_exact_on_small_instances(small_tilt, small_scaffold):
    sampler = qsd_sampler(small_tilt, small_scaffold)
    assert isinstance(sampler, QsdDistribution)
    draws = sampler.draw(50, np.random.default_rng(1))
    assert not small_scaffold.index(2).contains(draws).any()


def test_survival_sampler_draws_off_a2(small_tilt, small_scaffold):
    sampler = SurvivalQsd(small_tilt, small_scaffold.index(2), burn_in=20.0)
    assert np.isnan(sampler.survival)
    draws = sampler.draw(40, np.random.default_rng(2))
    assert draws.shape == (40, 3)
    assert not small_scaffold.index(2).contains(draws).any()
    assert small_tilt.index.contains(draws).all()
    assert 0.0 < sampler.survival <= 1.0
    assert sampler.attempts >= 40


def test_survival_sampler_gives_up_when_nothing_survives(small_tilt):
    sampler = SurvivalQsd(small_tilt, SiteIndex(small_tilt.sites[:-1]), burn_in=1e6)
    with pytest.raises(ConvergenceError):
        sampler.draw(5, np.random.default_rng(3))
    assert sampler.survival < 0.02
    with pytest.raises(ScaffoldError):
        SurvivalQsd(small_tilt, small_tilt.index, burn_in=1.0).draw(1, np.random.default_rng(3))



def test_controls_repeat_only_the_domination_check(small_tilt, small_scaffold, qsd, monkeypatch):
    factors = []
    real = excursions.domination_check

    def counted(*args, **kwargs):
        factors.append(kwargs["factor"])
        return real(*args, **kwargs)

    def unused(*args, **kwargs):
        raise AssertionError("long and short excursions are not resampled for the controls")

    monkeypatch.setattr(excursions, "domination_check", counted)
    for name in ("coupling_chain_check", "sample_long_excursions", "sample_sigma_long"):
        monkeypatch.setattr(excursions, name, unused)
    control, swap = negative_control(small_tilt, small_scaffold, qsd, 30, np.random.default_rng(5), factor=1.5)
    assert factors == [1.5, 1.0]
    assert control.details["factor"] == 1.5
    assert swap.details["replicas"] == 30


@pytest.mark.slow
def test_domination_holds_at_the_configured_intensities(small_tilt, small_scaffold, qsd):
    record = domination_check(small_tilt, small_scaffold, qsd, 200, np.random.default_rng(21))
    assert record.test_id == "coupling-domination"
    assert record.passed
    assert record.details["detectable_relative_gap"] > 0


@pytest.mark.slow
def test_inflated_swap_breaks_domination(small_tilt, small_scaffold, qsd):
    control, swap = negative_control(small_tilt, small_scaffold, qsd, 200, np.random.default_rng(22))
    assert control.test_id == "coupling-negative-control"
    assert control.passed
    assert swap.test_id == "coupling-plain-swap"
    assert swap.status in ("pass", "inconclusive")
    assert swap.details["swap_gap"] == pytest.approx((0.1 / 3 - 0.1 / 4) / (1 + 0.1 / 4))
