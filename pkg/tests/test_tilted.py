# tests/test_tilted.py
import numpy as np
import pytest

from occupation_lab.errors import InsufficientReplicasError, TiltError
from occupation_lab.lattice import SiteIndex
from occupation_lab.rng import RngStream
from occupation_lab.tilted import (
    PotentialIntegral, TiltSpec, build_tilt, estimate_relative_entropy, generator_consistency, ground_state_profile,
    load_tilt, martingale_check, radial_profile, regeneration_time, save_tilt, simulate_confined, simulate_tilted,
    spectral_diagnostics, technical_bound_checks,
)
from occupation_lab.walks import StopCause

ORIGIN = (0, 0, 0)


def test_regeneration_time():
    assert regeneration_time(6) == 116
    assert regeneration_time(2) == 2


def test_tilt_arguments_are_validated():
    phi = radial_profile(0.5, 2.5)
    with pytest.raises(TiltError):
        TiltSpec(phi, 1, 0.1)
    with pytest.raises(TiltError):
        TiltSpec(phi, 6, 1.5)
    with pytest.raises(TiltError):
        TiltSpec(radial_profile(1.0, 2.5), 6, 0.1)


def test_build_tilt_matches_the_spec_object():
    spec = build_tilt(radial_profile(0.5, 2.5, h=0.25), 4, 0.1)
    assert spec.N == 4
    assert spec.big_r == 2.5
    assert spec.f[spec.f > 0].size == len(spec.sites)
    with pytest.raises(TiltError):
        build_tilt(radial_profile(0.5, 2.5), 6, 0.1, big_r=3.0)


def test_tilt_fields(small_tilt):
    assert small_tilt.box.radius == 15
    assert small_tilt.phi_n([ORIGIN])[0] == pytest.approx(1.0)
    assert small_tilt.pi.sum() == pytest.approx(1.0)
    assert np.all(small_tilt.phi_sites > 0)
    assert small_tilt.S_N == pytest.approx(1.1 * small_tilt.norm2)
    assert small_tilt.t_star == 116
    with pytest.raises(TiltError):
        small_tilt.require_inside((20, 0, 0))


def test_stationary_prediction_is_the_budget(small_tilt):
    assert small_tilt.stationary_prediction() == pytest.approx(small_tilt.budget(), rel=1e-9)
    bounds = small_tilt.technical_bounds()
    assert bounds["states"] == len(small_tilt.sites)
    assert bounds["phi_max"] == pytest.approx(1.0)


def test_martingale_has_mean_one(small_tilt):
    record = martingale_check(small_tilt, ORIGIN, 20.0, 2000, np.random.default_rng(3))
    assert record.test_id == "martingale-mean"
    assert record.passed


def test_drift_at_the_centre(small_tilt):
    record = generator_consistency(small_tilt, ORIGIN, [0.05, 0.1], 4000, np.random.default_rng(4))
    assert record.passed


def test_confined_walk_stops_at_its_horizon(small_tilt):
    result = simulate_confined(small_tilt, ORIGIN, 50.0, np.random.default_rng(8))
    assert result.cause is StopCause.TIME
    assert result.elapsed == pytest.approx(50.0)
    assert small_tilt.index.contains(result.sites).all()
    with pytest.raises(TiltError):
        simulate_confined(small_tilt, (40, 0, 0), 1.0, np.random.default_rng(8))


def test_tilted_path_switches_at_the_budget(small_tilt):
    path = simulate_tilted(small_tilt, ORIGIN, np.random.default_rng(5))
    assert path.release_time == pytest.approx(small_tilt.S_N)
    assert path.total_time >= path.release_time
    assert path.field.total() == pytest.approx(path.total_time)


def test_relative_entropy_bookkeeping(small_tilt):
    with pytest.raises(InsufficientReplicasError):
        estimate_relative_entropy(small_tilt, ORIGIN, 10, 0)
    report = estimate_relative_entropy(small_tilt, ORIGIN, 100, RngStream(6, 0, "entropy"), workers=1)
    assert report.bookkeeping_error < 1e-8
    assert report.identity_gap < 1e-8 * report.budget
    assert report.ci_low <= report.estimate <= report.ci_high
    assert set(report.terms) == {"boundary", "pre_regeneration", "stationary_window"}
    assert report.terms["stationary_window"] != 0.0


def test_potential_integral_splits_a_straddling_hold():
    index = SiteIndex([(0, 0, 0), (1, 0, 0)], 3)
    integral = PotentialIntegral(index, np.array([2.0, -1.0]), split=5.0)
    integral.start(3)
    ids = np.array([0, 1, 2, 0])
    sites = np.array([(0, 0, 0), (1, 0, 0), (0, 0, 0), (1, 0, 0)])
    t0 = np.array([4.0, 0.0, 6.0, 7.0])
    hold = np.array([3.0, 2.0, 1.0, 1.0])
    integral.on_hold(ids, sites, t0, hold)
    assert integral.before.tolist() == pytest.approx([2.0, -2.0, 0.0])
    assert integral.after.tolist() == pytest.approx([4.0 - 1.0, 0.0, 2.0])
    assert (integral.before + integral.after).tolist() == pytest.approx(integral.total.tolist())


def test_tilt_save_and_load(small_tilt, tmp_path):
    path = save_tilt(small_tilt, tmp_path / "tilt.json")
    loaded = load_tilt(path)
    assert loaded.N == small_tilt.N
    assert loaded.epsilon == small_tilt.epsilon
    assert len(loaded.sites) == len(small_tilt.sites)


@pytest.mark.slow
def test_spectral_diagnostics(small_tilt):
    report = spectral_diagnostics(small_tilt, np.random.default_rng(7))
    assert report.exact
    assert report.gap > 0
    distances = [row["sup_tv"] for row in report.mixing]
    assert all(0.0 <= v <= 1.0 for v in distances)
    assert 0 < report.monotone_pi_constant <= 1.0


def test_build_tilt_attaches_its_constants():
    spec = build_tilt(radial_profile(0.5, 2.5, h=0.25), 4, 0.1)
    assert spec.bounds == spec.technical_bounds()
    assert spec.boundary_constant() > 0
    checks = technical_bound_checks([spec], seed=3)
    assert [check.test_id for check in checks] == ["tilt-boundary-N4", "tilt-potential-stable"]
    assert checks[-1].status == "inconclusive"


def test_spline_order_is_validated_and_saved(tmp_path):
    with pytest.raises(TiltError):
        TiltSpec(radial_profile(0.5, 2.5), 6, 0.1, order=2)
    spec = TiltSpec(ground_state_profile(2.5, h=0.25), 6, 0.1, order=3)
    assert spec.phi_n([ORIGIN])[0] == pytest.approx(1.0)
    assert load_tilt(save_tilt(spec, tmp_path / "tilt.json")).order == 3


@pytest.mark.slow
def test_smooth_tilt_constants_are_stable_under_doubling():
    phi = ground_state_profile(1.5, h=0.05)
    specs = [build_tilt(phi, N, 0.1, order=3) for N in (16, 32)]
    checks = {check.test_id: check for check in technical_bound_checks(specs, seed=1)}
    assert checks["tilt-boundary-N16"].passed
    assert checks["tilt-boundary-N32"].passed
    assert checks["tilt-potential-stable"].passed
    for spec in specs:
        assert spec.bounds["v_core_min_times_N2"] == pytest.approx((np.pi / 1.5) ** 2 / 6, rel=0.1)
