# tests/test_stats.py
import math

import numpy as np
import pytest

from occupation_lab.stats import (
    CheckRecord, batch_means, bernoulli_z, bonferroni_z, chi2_frequencies, mean_and_stderr,
    one_sided_ks, poisson_gof, wilson_interval, Z95,
)


def test_wilson_interval_contains_estimate():
    p, lo, hi = wilson_interval(30, 100)
    assert p == pytest.approx(0.3)
    assert lo < 0.3 < hi
    assert 0.0 <= lo and hi <= 1.0


def test_wilson_interval_at_zero_successes():
    p, lo, hi = wilson_interval(0, 50)
    assert p == 0.0
    assert lo == pytest.approx(0.0, abs=1e-12)
    assert 0.0 < hi < 0.1


def _score_interval(k, n, z):
    p = k / n
    centre = (p + z * z / (2 * n)) / (1 + z * z / n)
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / (1 + z * z / n)
    return centre - half, centre + half


@pytest.mark.parametrize("k, n, z", [(30, 100, Z95), (7, 40, Z95), (30, 100, 4.0), (399, 400, 4.0)])
def test_wilson_interval_matches_the_score_formula(k, n, z):
    p, lo, hi = wilson_interval(k, n, z)
    assert p == pytest.approx(k / n)
    assert (lo, hi) == pytest.approx(_score_interval(k, n, z), rel=1e-9)


def test_wilson_interval_needs_trials():
    with pytest.raises(ValueError):
        wilson_interval(0, 0)


def test_mean_and_stderr():
    mean, se = mean_and_stderr([1.0, 2.0, 3.0, 4.0])
    assert mean == pytest.approx(2.5)
    assert se == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)


def test_batch_means_on_constant_samples():
    mean, half = batch_means(np.ones(100))
    assert mean == 1.0
    assert half == pytest.approx(0.0)


def test_bernoulli_z():
    assert bernoulli_z(50, 100, 0.5) == 0.0
    assert bernoulli_z(1, 10, 0.0) == math.inf


def test_bonferroni_grows_with_family_size():
    assert bonferroni_z(50) > bonferroni_z(1)
    assert bonferroni_z(1, 0.05) == pytest.approx(1.959963984540054, rel=1e-6)


def test_poisson_gof_accepts_poisson_counts(rng):
    counts = rng.poisson(4.0, size=2000)
    _, pvalue = poisson_gof(counts, 4.0)
    assert pvalue > 1e-4


def test_poisson_gof_rejects_shifted_counts(rng):
    counts = rng.poisson(8.0, size=2000)
    _, pvalue = poisson_gof(counts, 4.0)
    assert pvalue < 1e-6


def test_poisson_gof_at_zero_intensity():
    assert poisson_gof([0, 0, 0], 0.0) == (0.0, 1.0)
    assert poisson_gof([0, 1, 0], 0.0) == (0.0, 0.0)


def test_chi2_frequencies_on_exact_counts():
    _, pvalue = chi2_frequencies([250, 250, 500], [0.25, 0.25, 0.5])
    assert pvalue == pytest.approx(1.0)


def test_one_sided_ks_detects_reversed_domination(rng):
    small = rng.exponential(1.0, 3000)
    large = rng.exponential(3.0, 3000)
    _, p_ok = one_sided_ks(large, small)
    _, p_bad = one_sided_ks(small, large)
    assert p_ok > 0.01
    assert p_bad < 1e-6


def test_check_record_serialises_pass_flag():
    record = CheckRecord("demo", 1.0, 2.0, "pass", seed=7)
    out = record.to_dict()
    assert out["passed"] is True
    assert out["seed"] == 7
    assert not CheckRecord("demo", 1.0, 2.0, "inconclusive").passed
