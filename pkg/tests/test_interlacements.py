# tests/test_interlacements.py
import numpy as np
import pytest

from occupation_lab.errors import InsufficientReplicasError
from occupation_lab.interlacements import (
    WindowLaw, additivity_check, mean_field_check, sample_occupation_batch, sample_occupation_field,
    sample_occupation_fields, vacancy_probability_test,
)
from occupation_lab.lattice import Box

ORIGIN = [(0, 0, 0)]


def test_window_law_is_a_probability():
    law = WindowLaw.of(Box.centered(1).sites())
    assert law.start_probabilities.sum() == pytest.approx(1.0)
    assert law.draw_starts(0, np.random.default_rng(0)).shape == (0, 3)
    assert law.stop_rule().kill_radius == law.kill_radius


def test_coupled_fields_are_monotone_in_the_level(rng):
    fields, counts = sample_occupation_fields([0.5, 1.0, 2.0], Box.centered(1).sites(), 50, rng)
    assert fields.shape == (3, 50, 27)
    assert np.all(np.diff(fields, axis=0) >= 0)
    assert np.all(np.diff(counts, axis=0) >= 0)


def test_level_zero_is_empty(rng):
    fields, counts = sample_occupation_fields([0.0], ORIGIN, 10, rng)
    assert not fields.any() and not counts.any()
    batch, _ = sample_occupation_batch(0.0, ORIGIN, 10, rng)
    assert not batch.any()
    with pytest.raises(ValueError):
        sample_occupation_batch(-1.0, ORIGIN, 10, rng)


def test_trajectory_counts_have_poisson_mean(rng):
    law = WindowLaw.of(ORIGIN)
    _, counts = sample_occupation_batch(2.0, ORIGIN, 4000, rng, law=law)
    expected = 2.0 * law.capacity
    assert abs(counts.mean() - expected) < 5 * np.sqrt(expected / 4000)


def test_single_field_sample(rng):
    sample = sample_occupation_field(1.0, Box.centered(1).sites(), rng)
    assert sample.field.shape == (27,)
    assert np.all(sample.field >= 0)
    assert sample.occupation_field().total() == pytest.approx(sample.field.sum())


def test_mean_occupation_equals_level(rng):
    record = mean_field_check(1.0, ORIGIN, 4000, rng)
    assert record.passed


def test_vacancy_matches_capacity(rng):
    report = vacancy_probability_test(0.5, ORIGIN, 2000, rng)
    assert report.status == "pass"
    assert report.exact == pytest.approx(np.exp(-0.5 * report.details["capacity"]))


def test_vacancy_needs_enough_replicas(rng):
    with pytest.raises(InsufficientReplicasError):
        vacancy_probability_test(0.5, ORIGIN, 10, rng)


def test_additivity_with_a_zero_level_is_trivial(rng):
    record = additivity_check(0.0, 1.0, ORIGIN, 10, rng)
    assert record.passed
    assert record.details["p_value"] == 1.0


def test_additivity_report(rng):
    record = additivity_check(0.5, 0.5, Box.centered(1).sites(), 300, rng)
    assert record.test_id == "additivity"
    assert 0.0 <= record.details["p_value"] <= 1.0
    assert len(record.details["combined_mean"]) == 27
    assert record.details["z_limit"] > 3
