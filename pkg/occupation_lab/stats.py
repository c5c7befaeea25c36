# occupation_lab/stats.py
"""Confidence intervals and two-sample tests used by the Monte-Carlo checks."""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy import stats as sps
from scipy.spatial.distance import cdist

logger = logging.getLogger("occupation-lab.stats")

Z95 = 1.959963984540054


@dataclass
class CheckRecord:
    """One structured test outcome (serialised into JSON reports)."""
    test_id: str
    statistic: float
    threshold: float
    status: str  # "pass", "fail" or "inconclusive"
    seed: Optional[int] = None
    details: Dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["passed"] = self.passed
        return out


def wilson_interval(successes: int, trials: int, z: float = Z95) -> Tuple[float, float, float]:
    """Point estimate and Wilson score interval at the two-sided level of the normal quantile z."""
    if trials <= 0:
        raise ValueError("Wilson interval needs at least one trial")
    level = 2 * float(sps.norm.cdf(z)) - 1
    ci = sps.binomtest(int(successes), int(trials)).proportion_ci(confidence_level=level, method="wilson")
    return successes / trials, float(ci.low), float(ci.high)


def mean_and_stderr(samples) -> Tuple[float, float]:
    x = np.asarray(samples, dtype=float)
    if len(x) < 2:
        return float(x.mean()) if len(x) else float("nan"), float("inf")
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x)))


def batch_means(samples, n_batches: int = 20) -> Tuple[float, float]:
    """Mean and 95% half-width from non-overlapping batch means."""
    x = np.asarray(samples, dtype=float)
    n_batches = max(2, min(n_batches, len(x) // 2))
    usable = (len(x) // n_batches) * n_batches
    if usable == 0:
        return mean_and_stderr(x)[0], float("inf")
    means = x[:usable].reshape(n_batches, -1).mean(axis=1)
    half = sps.t.ppf(0.975, n_batches - 1) * means.std(ddof=1) / math.sqrt(n_batches)
    return float(x.mean()), float(half)


def bernoulli_z(successes: int, trials: int, p: float) -> float:
    if trials <= 0:
        raise ValueError("no trials")
    var = p * (1 - p) / trials
    diff = successes / trials - p
    if var == 0.0:
        return 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
    return diff / math.sqrt(var)


def bonferroni_z(m: int, alpha: float = 0.01, two_sided: bool = True) -> float:
    m = max(1, m)
    tail = alpha / (2 * m) if two_sided else alpha / m
    return float(sps.norm.isf(tail))


def poisson_gof(counts, lam: float, min_expected: float = 5.0) -> Tuple[float, float]:
    """Chi-square goodness of fit of integer counts to Poisson(lam), tail bins merged."""
    counts = np.asarray(counts, dtype=np.int64)
    n = len(counts)
    if lam == 0.0:
        return 0.0, 1.0 if np.all(counts == 0) else 0.0
    kmax = int(max(counts.max(), sps.poisson.isf(1e-9, lam))) + 1
    probs = sps.poisson.pmf(np.arange(kmax), lam)
    probs[-1] += sps.poisson.sf(kmax - 1, lam)
    observed = np.bincount(np.minimum(counts, kmax - 1), minlength=kmax).astype(float)
    expected = probs * n
    # merge from both ends until every bin has enough expected mass
    obs_bins, exp_bins = [], []
    acc_o = acc_e = 0.0
    for o, e in zip(observed, expected):
        acc_o += o
        acc_e += e
        if acc_e >= min_expected:
            obs_bins.append(acc_o)
            exp_bins.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0 and exp_bins:
        obs_bins[-1] += acc_o
        exp_bins[-1] += acc_e
    if len(exp_bins) < 2:
        return 0.0, 1.0
    exp_arr = np.array(exp_bins)
    obs_arr = np.array(obs_bins)
    exp_arr *= obs_arr.sum() / exp_arr.sum()
    chi2, pvalue = sps.chisquare(obs_arr, exp_arr, ddof=0)
    return float(chi2), float(pvalue)


def categorical_two_sample(labels_a, labels_b, min_expected: float = 5.0) -> Tuple[float, float]:
    """Chi-square homogeneity test on two samples of hashable category labels."""
    a = [tuple(np.atleast_1d(x)) for x in labels_a]
    b = [tuple(np.atleast_1d(x)) for x in labels_b]
    cats = sorted(set(a) | set(b))
    pos = {c: i for i, c in enumerate(cats)}
    table = np.zeros((2, len(cats)))
    for c in a:
        table[0, pos[c]] += 1
    for c in b:
        table[1, pos[c]] += 1
    expected = table.sum(axis=0) * (table.sum(axis=1)[:, None] / table.sum())
    rare = expected.min(axis=0) < min_expected
    if rare.any():
        merged = table[:, rare].sum(axis=1, keepdims=True)
        table = np.hstack([table[:, ~rare], merged]) if (~rare).any() else merged
    table = table[:, table.sum(axis=0) > 0]
    if table.shape[1] < 2:
        return 0.0, 1.0
    chi2, pvalue, _, _ = sps.chi2_contingency(table)
    return float(chi2), float(pvalue)


def chi2_frequencies(observed, probabilities, min_expected: float = 5.0) -> Tuple[float, float]:
    """Goodness of fit of category counts to given probabilities, rare cells merged."""
    observed = np.asarray(observed, dtype=float)
    expected = np.asarray(probabilities, dtype=float) * observed.sum()
    order = np.argsort(expected)[::-1]
    observed, expected = observed[order], expected[order]
    keep = expected >= min_expected
    if (~keep).any():
        observed = np.append(observed[keep], observed[~keep].sum())
        expected = np.append(expected[keep], expected[~keep].sum())
    if len(expected) < 2:
        return 0.0, 1.0
    expected *= observed.sum() / expected.sum()
    chi2, pvalue = sps.chisquare(observed, expected)
    return float(chi2), float(pvalue)


def energy_distance_test(x, y, rng: np.random.Generator, permutations: int = 199,
                         max_samples: int = 1000) -> Tuple[float, float]:
    """
    Multivariate energy-distance two-sample test with a permutation p-value.

    Samples larger than max_samples are subsampled without replacement.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x.shape[0] == 1 and x.shape[1] > 1 and y.shape[0] == 1:
        x, y = x.T, y.T
    if len(x) > max_samples:
        x = x[rng.choice(len(x), max_samples, replace=False)]
    if len(y) > max_samples:
        y = y[rng.choice(len(y), max_samples, replace=False)]
    pooled = np.vstack([x, y])
    dist = cdist(pooled, pooled)
    n, m = len(x), len(y)
    labels = np.zeros(n + m, dtype=bool)
    labels[n:] = True

    def statistic(lab):
        a, b = ~lab, lab
        cross = dist[np.ix_(a, b)].mean()
        within_a = dist[np.ix_(a, a)].mean()
        within_b = dist[np.ix_(b, b)].mean()
        return 2 * cross - within_a - within_b

    observed = statistic(labels)
    exceed = 0
    for _ in range(permutations):
        if statistic(rng.permutation(labels)) >= observed:
            exceed += 1
    return float(observed), (exceed + 1) / (permutations + 1)


def one_sided_ks(dominant, dominated) -> Tuple[float, float]:
    """
    KS test of H0: law(dominant) stochastically dominates law(dominated).

    A small p-value is evidence that the empirical CDF of `dominant` exceeds
    that of `dominated` somewhere.
    """
    result = sps.ks_2samp(np.asarray(dominant, float), np.asarray(dominated, float), alternative="greater")
    return float(result.statistic), float(result.pvalue)


def two_sample_z(a, b) -> Tuple[float, float]:
    """Difference of means and its standard error for independent samples."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    se = math.sqrt(a.var(ddof=1) / len(a) + b.var(ddof=1) / len(b))
    return float(a.mean() - b.mean()), se


def per_site_z(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise two-sample z-scores; columns with zero variance on both sides give 0."""
    diff = a.mean(axis=0) - b.mean(axis=0)
    se = np.sqrt(a.var(axis=0, ddof=1) / len(a) + b.var(axis=0, ddof=1) / len(b))
    z = np.zeros_like(diff)
    ok = se > 0
    z[ok] = diff[ok] / se[ok]
    z[~ok & (diff != 0)] = np.sign(diff[~ok & (diff != 0)]) * np.inf
    return z
