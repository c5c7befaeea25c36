# tests/test_functionals.py
import math

import numpy as np
import pytest

from occupation_lab.errors import RegistrationError
from occupation_lab.functionals import (
    LocalFunctional, builtin_functional, closed_form_increment_bounds, closed_form_theta, estimate_theta,
    functional_average, fuzz_contract, get_functional, register_functional, theta_infinity, theta_property_check,
)
from occupation_lab.lattice import Box, BoxArray
from occupation_lab.rng import RngStream


def test_builtins_pass_the_contract():
    for name in ("F1", "F2", "F3:r=1"):
        assert fuzz_contract(get_functional(name)) == []


def test_functional_names():
    assert get_functional("F3:r=2").radius == 2
    assert get_functional("F2").bound == 1.0
    assert not get_functional("F1").bounded
    for bad in ("F3", "F3:x=2", "F9"):
        with pytest.raises(RegistrationError):
            get_functional(bad)
    with pytest.raises(RegistrationError):
        builtin_functional("F3", radius=0)


def test_negative_functional_is_rejected():
    bad = LocalFunctional("negated", 0, lambda w: -w[:, 0])
    with pytest.raises(RegistrationError):
        register_functional(bad)


def test_shielding_functional():
    F = get_functional("F3:r=1")
    window = F.window()
    assert F(np.zeros(27)) == 0.0
    assert F(np.ones(27)) == 1.0
    ring = np.zeros(27)
    ring[np.abs(window).sum(axis=1) == 1] = 1.0
    # the vacant centre is enclosed by its six occupied neighbours
    assert F(ring) == 1.0
    with pytest.raises(ValueError):
        F(np.zeros(5))


def test_closed_forms():
    assert closed_form_theta("F1", [0.0, 2.0]).tolist() == [0.0, 2.0]
    assert closed_form_theta("F2", 0.0) == 0.0
    g00 = 1.5
    assert closed_form_theta("F2", 1.5, g00) == pytest.approx(1 - math.exp(-1))
    assert closed_form_theta("F3:r=1", 1.0) is None
    bounds = closed_form_increment_bounds(1.0, 0.5, g00)
    assert bounds["lower"] == pytest.approx(bounds["increment"])


def test_theta_infinity():
    assert theta_infinity(get_functional("F1")) == math.inf
    assert theta_infinity(get_functional("F2")) == 1.0


def test_f2_estimate_matches_closed_form():
    F = get_functional("F2")
    estimate = estimate_theta(F, [0.5, 1.0, 2.0], 4000, RngStream(5, 0, "theta"), workers=1)
    exact = closed_form_theta(F, estimate.levels)
    assert np.all(np.abs(estimate.estimates - exact) <= 2.5 * estimate.half_widths + 1e-3)
    assert estimate.method == "normal"
    rows = estimate.as_rows(exact)
    assert rows[0]["u"] == 0.5 and "closed_form" in rows[0]


def test_theta_estimate_does_not_depend_on_workers():
    F = get_functional("F2")
    serial = estimate_theta(F, [0.5, 1.0], 4500, RngStream(9, 0, "theta"), workers=1)
    pooled = estimate_theta(F, [0.5, 1.0], 4500, RngStream(9, 0, "theta"), workers=2)
    np.testing.assert_array_equal(serial.estimates, pooled.estimates)


def test_theta_estimate_input_checks():
    F = get_functional("F2")
    with pytest.raises(ValueError):
        estimate_theta(F, [-1.0], 10, 0)
    with pytest.raises(ValueError):
        estimate_theta(F, [1.0], 1, 0)


def test_property_check_needs_three_levels():
    F = get_functional("F2")
    estimate = estimate_theta(F, [0.5, 1.0, 2.0], 500, 1, workers=1)
    records = theta_property_check(F, estimate)
    assert [r.test_id for r in records] == ["theta-lipschitz", "theta-lower-increment", "theta-increasing"]
    assert records[0].passed
    short = estimate_theta(F, [0.5, 1.0], 100, 1, workers=1)
    with pytest.raises(ValueError):
        theta_property_check(F, short)


def test_functional_average_of_a_point_mass():
    field = BoxArray.from_sites([(0, 0, 0)], [2.0], box=Box.centered(2))
    centers = Box.centered(1).sites()
    assert functional_average(get_functional("F2"), field, centers) == pytest.approx(1 / 27)
    assert functional_average(get_functional("F1"), field, centers) == pytest.approx(2 / 27)
