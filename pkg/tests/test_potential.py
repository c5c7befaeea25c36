# tests/test_potential.py
import numpy as np
import pytest

from occupation_lab.errors import AccuracyError, TiltError, TrialFunctionError
from occupation_lab.lattice import Box
from occupation_lab.potential import (
    box_capacity_profile, capacity, capacity_variational, equilibrium_measure, green_constant, green_function,
    green_table, green_trial, hit_probabilities, indicator_trial, last_exit_hit_prob, lattice_green_series,
    periodized, tilted_equilibrium, truncation_for_accuracy,
)

# g(0,0) of the simple random walk on Z^3 (Watson's integral)
G00 = 1.516386059151978


def test_green_constant_in_three_dimensions():
    assert green_constant(3) == pytest.approx(3 / (4 * np.pi) * 2, rel=1e-12)


def test_green_at_the_origin():
    assert green_function((0, 0, 0), (0, 0, 0)) == pytest.approx(G00, rel=1e-3)
    assert lattice_green_series((0, 0, 0)) == pytest.approx(G00, rel=1e-4)


def test_green_harmonic_identity_at_a_neighbour():
    # g(0,0) minus the mean over neighbours is 1, and all neighbours agree by symmetry
    assert green_function((0, 0, 0), (1, 0, 0)) == pytest.approx(G00 - 1.0, rel=2e-3)


def test_green_is_symmetric_and_translation_invariant():
    a = green_function((1, 2, 3), (4, 2, 0))
    b = green_function((4, 2, 0), (1, 2, 3))
    c = green_function((0, 0, 0), (3, 0, -3))
    assert a == b
    assert a == pytest.approx(c, rel=1e-12)


def test_green_table_methods_agree():
    pairs = [[(0, 0, 0), (1, 1, 0)], [(0, 0, 0), (2, 0, 0)]]
    solved = green_table(pairs, accuracy=1e-4)
    series = green_table(pairs, method="series")
    np.testing.assert_allclose(solved.values, series.values, rtol=2e-3)
    assert solved.as_rows()[0]["y"] == (1, 1, 0)
    with pytest.raises(ValueError):
        green_table(pairs, method="guess")


def test_truncation_radius_respects_the_memory_cap():
    assert truncation_for_accuracy(1e-3, 3) >= 10
    with pytest.raises(AccuracyError):
        truncation_for_accuracy(1e-12, 3)


def test_capacity_of_a_point_and_a_pair():
    assert capacity([(0, 0, 0)]) == pytest.approx(1 / G00, rel=2e-3)
    # symmetric pair: each site carries 1 / (g(0,0) + g(0,e1))
    assert capacity([(0, 0, 0), (1, 0, 0)]) == pytest.approx(2 / (2 * G00 - 1), rel=3e-3)


def test_equilibrium_measure_of_a_box():
    eq = equilibrium_measure(Box.centered(2).sites(), accuracy=1e-3)
    assert eq.mass.sum() == pytest.approx(eq.capacity)
    assert eq.normalized().sum() == pytest.approx(1.0)
    assert eq.at([[0, 0, 0]])[0] == 0.0
    assert eq.at([[2, 2, 2]])[0] > eq.at([[2, 0, 0]])[0] > 0
    assert eq.capacity > capacity(Box.centered(1).sites(), accuracy=1e-3)


def test_hit_probabilities():
    probs = hit_probabilities([(0, 0, 0), (10, 0, 0)], [(0, 0, 0)], accuracy=1e-4)
    assert probs[0] == pytest.approx(1.0, abs=2e-3)
    assert probs[1] == pytest.approx(green_constant(3) / 10 / G00, rel=0.03)


def test_dirichlet_principle():
    K = [(0, 0, 0)]
    cap = capacity(K)
    indicator = capacity_variational(K, [indicator_trial(K)])
    assert indicator == pytest.approx(1.0)
    green = capacity_variational(K, [green_trial((0, 0, 0), 6)])
    assert cap <= green + 1e-6
    assert green < indicator


def test_trial_must_equal_one_on_the_set():
    with pytest.raises(TrialFunctionError):
        capacity_variational([(0, 0, 0), (5, 0, 0)], [indicator_trial([(0, 0, 0)])])
    with pytest.raises(TrialFunctionError):
        capacity_variational([(0, 0, 0)], [])


def test_periodized_agrees_on_the_patch():
    phi_per = periodized(lambda p: np.asarray(p)[:, 0].astype(float), (0, 0, 0), 2)
    pts = np.array([[3, 0, 0], [-3, 1, 1], [4, 0, 0], [10, 0, 0]])
    assert phi_per(pts).tolist() == [3.0, -3.0, -3.0, 3.0]


def test_last_exit_decomposition_for_a_point():
    x = (3, 0, 0)
    expected = green_function((0, 0, 0), x) / G00
    assert last_exit_hit_prob(x, [(0, 0, 0)], accuracy=1e-3) == pytest.approx(expected, rel=5e-3)
    assert hit_probabilities([x], [(0, 0, 0)], accuracy=1e-3)[0] == pytest.approx(expected, rel=5e-3)


def test_box_capacity_profile_grows_with_the_radius():
    rows = box_capacity_profile([1, 2], accuracy=1e-3)
    assert [row["radius"] for row in rows] == [1, 2]
    assert rows[1]["capacity"] > rows[0]["capacity"] > 0
    assert all(row["min_boundary_mass_times_radius"] > 0 for row in rows)


class _FlatTilt:
    d = 3

    def __init__(self, level):
        self.level = level

    def phi_n(self, points):
        return np.full(len(np.atleast_2d(points)), self.level)


@pytest.mark.parametrize("level", [1.0, 2.0])
def test_flat_tilt_scales_the_equilibrium_measure(level):
    K = Box.centered(1).sites()
    result = tilted_equilibrium(K, _FlatTilt(level), (0, 0, 0), patch_radius=2)
    assert result.phi_x0 == level
    assert result.relative_gap < 1e-6
    assert result.normalized_sup_ratio < 1e-6
    np.testing.assert_allclose(result.normalized().sum(), 1.0)


def test_tilted_equilibrium_needs_k_inside_the_patch():
    with pytest.raises(TiltError):
        tilted_equilibrium([(5, 0, 0)], _FlatTilt(1.0), (0, 0, 0), patch_radius=2)
