# occupation_lab/interlacements.py
"""
Occupation-time field of random interlacements on a finite window.

Restricted to a window K, the interlacement at level u is a Poisson(u cap(K))
number of independent walks started from the normalized equilibrium measure
of K. Each walk runs until it is killed at a large radius; the field on K is
the summed occupation time of those walks.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import InsufficientReplicasError
from .lattice import SiteIndex, neighbourhood
from .potential import equilibrium_measure, hit_probabilities
from .stats import CheckRecord, bernoulli_z, bonferroni_z, energy_distance_test, per_site_z, poisson_gof, wilson_interval
from .walks import (OccupationField, StopCause, StopRule, WindowOccupation, kill_bias_bound, kill_radius_for,
                    run_walkers)

logger = logging.getLogger("occupation-lab.interlacements")

MIN_VACANCY_REPLICAS = 1000
MIN_EVENTS = 10
ESCAPE_MARGIN = 4


@dataclass
class InterlacementSample:
    level: float
    window: np.ndarray
    field: np.ndarray
    trajectory_count: int
    kill_radius: int
    kill_bias_bound: float

    def occupation_field(self) -> OccupationField:
        keep = self.field > 0
        return OccupationField(self.window[keep], self.field[keep])


@dataclass
class WindowLaw:
    """Start law of the interlacement walks on a window."""
    index: SiteIndex
    capacity: float
    start_probabilities: np.ndarray
    kill_radius: int
    bias_bound: float

    @classmethod
    def of(cls, K, kill_radius: Optional[int] = None, accuracy: float = 1e-4) -> "WindowLaw":
        index = K if isinstance(K, SiteIndex) else SiteIndex(K)
        eq = equilibrium_measure(index, accuracy)
        kill = kill_radius if kill_radius is not None else kill_radius_for(max(1, index.radius))
        return cls(index, eq.capacity, eq.normalized(), kill, kill_bias_bound(index.radius, kill, index.d))

    def draw_starts(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n == 0:
            return np.zeros((0, self.index.d), dtype=np.int64)
        return self.index.sites[rng.choice(len(self.index), size=n, p=self.start_probabilities)]

    def stop_rule(self) -> StopRule:
        return StopRule.killed(self.kill_radius, tuple(int(c) for c in self.index.center))


def _walk_fields(law: WindowLaw, starts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Occupation of the window by each walk, shape (walks, |K|)."""
    if len(starts) == 0:
        return np.zeros((0, len(law.index)))
    occupation = WindowOccupation(law.index)
    run_walkers(starts, law.stop_rule(), rng, observers=[occupation])
    return occupation.fields


def sample_occupation_fields(levels: Sequence[float], K, replicas: int, rng: np.random.Generator,
                             kill_radius: Optional[int] = None, law: Optional[WindowLaw] = None
                             ) -> Tuple[np.ndarray, np.ndarray]:
    """
    Monotone-coupled fields for an increasing list of levels.

    One Poisson(u_max cap(K)) cloud per replica; each walk carries a uniform
    label on [0, u_max] and belongs to every level at or above its label.

    Returns:
        fields of shape (levels, replicas, |K|) and trajectory counts (levels, replicas).
    """
    levels = np.asarray(levels, dtype=float)
    if np.any(levels < 0):
        raise ValueError("interlacement levels must be nonnegative")
    law = law or WindowLaw.of(K, kill_radius)
    m = len(law.index)
    u_max = float(levels.max()) if len(levels) else 0.0
    fields = np.zeros((len(levels), replicas, m))
    counts = np.zeros((len(levels), replicas), dtype=np.int64)
    if u_max == 0.0:
        return fields, counts
    per_replica = rng.poisson(u_max * law.capacity, size=replicas)
    owner = np.repeat(np.arange(replicas), per_replica)
    labels = rng.uniform(0.0, u_max, size=len(owner))
    walks = _walk_fields(law, law.draw_starts(len(owner), rng), rng)
    for i, u in enumerate(levels):
        member = labels <= u
        np.add.at(fields[i], owner[member], walks[member])
        counts[i] = np.bincount(owner[member], minlength=replicas)
    logger.debug(f"Sampled {replicas} coupled clouds, {len(owner)} walks up to level {u_max:g}")
    return fields, counts


def sample_occupation_batch(u: float, K, replicas: int, rng: np.random.Generator,
                            kill_radius: Optional[int] = None, law: Optional[WindowLaw] = None
                            ) -> Tuple[np.ndarray, np.ndarray]:
    """Independent fields at one level: (replicas, |K|) and trajectory counts."""
    if u < 0:
        raise ValueError(f"interlacement level must be nonnegative, got {u}")
    law = law or WindowLaw.of(K, kill_radius)
    counts = rng.poisson(u * law.capacity, size=replicas) if u > 0 else np.zeros(replicas, dtype=np.int64)
    owner = np.repeat(np.arange(replicas), counts)
    walks = _walk_fields(law, law.draw_starts(len(owner), rng), rng)
    fields = np.zeros((replicas, len(law.index)))
    np.add.at(fields, owner, walks)
    return fields, counts


def sample_occupation_field(u: float, K, rng: np.random.Generator, kill_radius: Optional[int] = None
                            ) -> InterlacementSample:
    """One interlacement occupation field on the window K."""
    law = WindowLaw.of(K, kill_radius)
    fields, counts = sample_occupation_batch(u, law.index, 1, rng, law=law)
    return InterlacementSample(float(u), law.index.sites, fields[0], int(counts[0]), law.kill_radius, law.bias_bound)


# ---- Validators ----

@dataclass
class VacancyReport:
    level: float
    empirical: float
    exact: float
    z_score: float
    replicas: int
    status: str
    ci_low: float = 0.0
    ci_high: float = 1.0
    details: Dict[str, float] = field(default_factory=dict)


def vacancy_probability_test(u: float, K, replicas: int, rng: np.random.Generator, method: str = "shell",
                             accuracy: float = 1e-4) -> VacancyReport:
    """
    Empirical P[no trajectory meets K] against exp(-u cap(K)).

    Trajectories are drawn on the enlargement K + B(0,1), so hitting K is a
    genuine event of the walks. method "shell" stops each walk on a small
    escape box and finishes it with the exact return probability; method
    "kill" runs to the kill radius and ignores later returns.
    """
    if replicas < MIN_VACANCY_REPLICAS:
        raise InsufficientReplicasError(f"vacancy test needs at least {MIN_VACANCY_REPLICAS} replicas, got {replicas}")
    index = K if isinstance(K, SiteIndex) else SiteIndex(K)
    cap_K = equilibrium_measure(index, accuracy).capacity
    exact = math.exp(-u * cap_K)
    if u == 0:
        return VacancyReport(0.0, 1.0, 1.0, 0.0, replicas, "pass", 1.0, 1.0, {"capacity": cap_K})

    outer = WindowLaw.of(neighbourhood(index, 1), accuracy=accuracy)
    counts = rng.poisson(u * outer.capacity, size=replicas)
    owner = np.repeat(np.arange(replicas), counts)
    starts = outer.draw_starts(len(owner), rng)
    center = tuple(int(c) for c in index.center)
    if method == "shell":
        escape = index.radius + ESCAPE_MARGIN
        stop = StopRule(hit=index, kill_radius=escape, kill_center=center)
    elif method == "kill":
        stop = StopRule(hit=index, kill_radius=outer.kill_radius, kill_center=center)
    else:
        raise ValueError(f"unknown vacancy method {method!r}")
    batch = run_walkers(starts, stop, rng)
    hit = batch.mask(StopCause.HIT)
    if method == "shell":
        escaped = np.flatnonzero(batch.mask(StopCause.KILLED))
        if len(escaped):
            shell_sites, inverse = np.unique(batch.final_sites[escaped], axis=0, return_inverse=True)
            returns = hit_probabilities(shell_sites, index, accuracy)[inverse.reshape(-1)]
            hit[escaped] = rng.random(len(escaped)) < returns
    touched = np.zeros(replicas, dtype=bool)
    touched[owner[hit]] = True
    vacant = int((~touched).sum())
    empirical, lo, hi = wilson_interval(vacant, replicas)
    z = bernoulli_z(vacant, replicas, exact)
    expected = replicas * exact
    if min(expected, replicas - expected) < MIN_EVENTS or min(vacant, replicas - vacant) < MIN_EVENTS:
        status = "insufficient events"
    else:
        status = "pass" if abs(z) <= 3 else "fail"
    details = {"capacity": cap_K, "enlarged_capacity": outer.capacity, "trajectories": float(len(owner))}
    if method == "kill":
        details["kill_bias_bound"] = outer.bias_bound
    logger.info(f"Vacancy u={u:g} |K|={len(index)}: empirical {empirical:.5f} vs exact {exact:.5f} (z={z:.2f}, {status})")
    return VacancyReport(float(u), empirical, exact, z, replicas, status, lo, hi, details)


def additivity_check(u: float, u2: float, K, replicas: int, rng: np.random.Generator,
                     alpha: float = 0.01) -> CheckRecord:
    """
    Compare the field at level u + u2 with the sum of independent fields at u and u2.
    """
    index = K if isinstance(K, SiteIndex) else SiteIndex(K)
    law = WindowLaw.of(index)
    if min(u, u2) == 0:
        return CheckRecord("additivity", 0.0, alpha, "pass",
                           details={"p_value": 1.0, "note": "one level is zero, both sides are the same field"})
    combined, _ = sample_occupation_batch(u + u2, index, replicas, rng, law=law)
    first, _ = sample_occupation_batch(u, index, replicas, rng, law=law)
    second, _ = sample_occupation_batch(u2, index, replicas, rng, law=law)
    summed = first + second
    z_means = per_site_z(combined, summed)
    z_vars = per_site_z((combined - combined.mean(axis=0)) ** 2, (summed - summed.mean(axis=0)) ** 2)
    statistic, p_value = energy_distance_test(combined, summed, rng)
    limit = bonferroni_z(2 * len(index), alpha)
    finite = np.isfinite(z_means) & np.isfinite(z_vars)
    ok = p_value > alpha and finite.all() and np.abs(z_means).max() <= limit and np.abs(z_vars).max() <= limit
    details = {
        "p_value": p_value,
        "max_abs_mean_z": float(np.abs(z_means).max()),
        "max_abs_variance_z": float(np.abs(z_vars).max()),
        "z_limit": limit,
        "combined_mean": combined.mean(axis=0).tolist(),
        "summed_mean": summed.mean(axis=0).tolist(),
    }
    logger.info(f"Additivity u={u:g}+{u2:g}: energy statistic {statistic:.4g}, p={p_value:.3f}")
    return CheckRecord("additivity", statistic, alpha, "pass" if ok else "fail", details=details)


def mean_field_check(u: float, K, replicas: int, rng: np.random.Generator) -> CheckRecord:
    """Per-site mean occupation against E[L^u_x] = u."""
    index = K if isinstance(K, SiteIndex) else SiteIndex(K)
    law = WindowLaw.of(index)
    fields, _ = sample_occupation_batch(u, index, replicas, rng, law=law)
    means = fields.mean(axis=0)
    stderr = fields.std(axis=0, ddof=1) / math.sqrt(replicas)
    z = np.where(stderr > 0, (means - u) / np.where(stderr > 0, stderr, 1.0), 0.0)
    worst = float(np.abs(z).max())
    limit = max(3.0, bonferroni_z(len(index), 0.0027))
    return CheckRecord("mean-field", worst, limit, "pass" if worst <= limit else "fail",
                       details={"means": means.tolist(), "kill_bias_bound": law.bias_bound})


def trajectory_count_gof(u: float, K, replicas: int, rng: np.random.Generator) -> CheckRecord:
    """Chi-square fit of trajectory counts to Poisson(u cap(K))."""
    law = WindowLaw.of(K)
    _, counts = sample_occupation_batch(u, law.index, replicas, rng, law=law)
    chi2, p_value = poisson_gof(counts, u * law.capacity)
    return CheckRecord("trajectory-count", chi2, 0.01, "pass" if p_value > 0.01 else "fail",
                       details={"p_value": p_value, "mean_count": float(counts.mean()),
                                "expected": u * law.capacity})
