# occupation_lab/harness.py
"""
Experiment pipelines and their artifacts.

Each run_* function returns an ExperimentReport (table rows plus structured
check records); write_report and write_manifest turn reports into CSV, JSON
and a plain-text manifest. The lower bound is assembled from stored
typicality and entropy estimates only.
"""
import csv
import hashlib
import json
import logging
import math
import platform
import shlex
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pydantic
import scipy

from .config import ExperimentConfig
from .errors import ConfigurationError, InfeasibleLevelError, LabError
from .excursions import (SurvivalQsd, build_scaffold, compute_qsd, conditional_tv_profile, coupling_chain_check,
                         default_count_start, excursion_count_experiment, hitting_distribution_comparison,
                         negative_control, qsd_fixed_point_error, qsd_sampler)
from .functionals import (LocalFunctional, closed_form_theta, estimate_theta, get_functional,
                          theta_property_check)
from .interlacements import WindowLaw
from .lattice import Box, SiteIndex, discrete_blowup, enumerate_box, neighbourhood, parse_site_set
from .potential import equilibrium_measure, green_table
from .rng import RngStream, replica_map
from .stats import Z95, CheckRecord, mean_and_stderr, wilson_interval
from .tilted import (TILT_FORMAT, TiltSpec, build_tilt, estimate_relative_entropy, ground_state_profile, radial_profile,
                     technical_bound_checks)
from .variational import (GRID_FORMAT, GridFunction, QuasiMinimizerReport, SolverOptions, ThetaModel,
                          VariationalSolution, build_quasi_minimizer, rate_function_curve, solve_constrained)
from .walks import StopRule, WalkObserver, run_walkers

logger = logging.getLogger("occupation-lab.harness")

REPORT_FORMAT = "occupation-lab/report/1"
TYPICALITY_BLOCK = 10
CONCENTRATION_BLOCK = 25
DIRECT_BLOCK = 200
PIPELINE_CACHE_SIZE = 4
EMBEDDED_CONFIG = "config.toml"


@dataclass
class ExperimentReport:
    name: str
    rows: List[Dict[str, Any]]
    checks: List[CheckRecord] = field(default_factory=list)
    extras: Dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def to_dict(self) -> Dict[str, Any]:
        return {"format": REPORT_FORMAT, "name": self.name, "passed": self.passed, "rows": self.rows,
                "checks": [check.to_dict() for check in self.checks], "extras": self.extras}


def _status(ok: bool) -> str:
    return "pass" if ok else "fail"


def _frequency_se(row: Dict[str, Any]) -> float:
    return math.sqrt(row["frequency"] * (1 - row["frequency"]) / row["replicas"])


# ---- Occupation statistics ----

class ReplicaOccupation(WalkObserver):
    """Occupation of a window summed per replica; survives several batches."""

    def __init__(self, window: SiteIndex, owners: np.ndarray, replicas: int):
        self.index = window
        self.owners = np.asarray(owners, dtype=np.int64)
        self.fields = np.zeros((replicas, len(window)))

    def on_hold(self, ids, sites, t0, hold):
        pos = self.index.lookup(sites)
        ok = pos >= 0
        if ok.any():
            np.add.at(self.fields, (self.owners[ids[ok]], pos[ok]), hold[ok])


def window_gather(F: LocalFunctional, centers: np.ndarray) -> Tuple[SiteIndex, np.ndarray]:
    """The window K = centers + B(0, r_F) and the (centers, window offsets) positions into it."""
    window = SiteIndex(neighbourhood(centers, F.radius))
    offsets = F.window()
    points = (centers[:, None, :] + offsets[None, :, :]).reshape(-1, centers.shape[1])
    return window, window.lookup(points).reshape(len(centers), len(offsets))


def event_statistics(F: LocalFunctional, fields: np.ndarray, gather: np.ndarray) -> np.ndarray:
    """Per replica: (1/|centers|) sum over centers x of F((L_{x+y})_{|y| <= r})."""
    return np.array([float(F(row[gather]).mean()) for row in np.atleast_2d(fields)])


# ---- Tilt pipeline ----

@dataclass
class TiltPipeline:
    F: LocalFunctional
    theta: ThetaModel
    solution: VariationalSolution
    quasi_minimizer: QuasiMinimizerReport


def theta_for(config: ExperimentConfig, F: LocalFunctional) -> ThetaModel:
    if config.solver.theta == "closed-form":
        if F.name == "F1":
            return ThetaModel.linear()
        return ThetaModel.closed_form_f2()
    stream = RngStream(config.seed, 0, "theta-model")
    estimate = estimate_theta(F, config.solver.theta_levels, config.solver.theta_replicas, stream, config.workers)
    return ThetaModel.from_estimate(estimate)


def solver_options(config: ExperimentConfig) -> SolverOptions:
    return SolverOptions(constraint_tol=config.solver.constraint_tol)


@lru_cache(maxsize=PIPELINE_CACHE_SIZE)
def _pipeline(key: str) -> TiltPipeline:
    config = ExperimentConfig.model_validate_json(key)
    F = get_functional(config.functional, config.d)
    theta = theta_for(config, F)
    solution = solve_constrained(theta, config.nu, config.domain.shape, config.domain.r_D, config.big_r,
                                 config.solver.h, config.d, solver_options(config))
    qm = build_quasi_minimizer(solution, config.delta, theta, solver_options(config))
    return TiltPipeline(F, theta, solution, qm)


def prepare_tilt(config: ExperimentConfig) -> TiltPipeline:
    """theta model, minimiser at nu and the quasi-minimiser; the last few configurations are cached."""
    return _pipeline(config.model_dump_json())


def _require_feasible(config: ExperimentConfig, pipeline: TiltPipeline) -> None:
    qm = pipeline.quasi_minimizer
    if not qm.positive:
        raise InfeasibleLevelError("quasi-minimizer is not positive on the open ball")
    if qm.degraded or not config.nu < qm.constraint:
        raise InfeasibleLevelError(f"nu={config.nu} is not strictly inside the quasi-minimizer window "
                                   f"[{qm.window[0]:.6g}, {qm.window[1]:.6g}] (constraint {qm.constraint:.6g})")


def _origin(config: ExperimentConfig) -> np.ndarray:
    return np.zeros(config.d, dtype=np.int64)


# ---- Typicality ----

def _typicality_block(task) -> np.ndarray:
    spec, F, window, gather, y, n, stream = task
    rng = stream.generator()
    occupation = ReplicaOccupation(window, np.arange(n), n)
    starts = np.repeat(np.asarray(y, dtype=np.int64)[None, :], n, axis=0)
    confined = run_walkers(starts, StopRule.at_time(spec.S_N), rng, spec=spec.conductances(),
                           observers=[occupation])
    run_walkers(confined.final_sites, StopRule.killed(2 * spec.box.radius), rng, observers=[occupation])
    return event_statistics(F, occupation.fields, gather)


def typicality_statistics(config: ExperimentConfig, spec: TiltSpec, F: LocalFunctional, replicas: int,
                          stream: RngStream) -> np.ndarray:
    """Event statistics of `replicas` tilted paths from the origin at scale spec.N."""
    y = _origin(config)
    spec.require_inside(y)
    centers = discrete_blowup(config.domain.shape, config.domain.r_D, spec.N, config.d).sites
    window, gather = window_gather(F, centers)
    sizes = [min(TYPICALITY_BLOCK, replicas - s) for s in range(0, replicas, TYPICALITY_BLOCK)]
    streams = stream.spawn(len(sizes), "tilted-paths")
    blocks = replica_map(_typicality_block, [(spec, F, window, gather, y, n, s) for n, s in zip(sizes, streams)],
                         config.workers)
    return np.concatenate(blocks)


def _tilt(config: ExperimentConfig, phi: GridFunction, N: int) -> TiltSpec:
    return build_tilt(phi, N, config.epsilon, config.big_r, order=config.tilt.order)


def _typicality_rows(config: ExperimentConfig, pipeline: TiltPipeline, scales: Sequence[int]
                     ) -> Tuple[List[Dict[str, Any]], Dict[int, TiltSpec]]:
    level = config.event_level if config.event_level is not None else config.nu
    rows, specs = [], {}
    for N in scales:
        spec = _tilt(config, pipeline.quasi_minimizer.phi, N)
        specs[N] = spec
        stats = typicality_statistics(config, spec, pipeline.F, config.replicas,
                                      RngStream(config.seed, 0, f"typicality/N={N}"))
        hits = int(np.sum(stats > level))
        p, lo, hi = wilson_interval(hits, len(stats))
        rows.append({"N": N, "replicas": len(stats), "hits": hits, "frequency": p, "ci_low": lo, "ci_high": hi,
                     "event_level": level, "mean_statistic": float(stats.mean()),
                     "quasi_minimizer_constraint": pipeline.quasi_minimizer.constraint})
        logger.info(f"Typicality at N={N}: {hits}/{len(stats)} paths above level {level:g}")
    return rows, specs


def typicality_control_trend(rows: Sequence[Dict[str, Any]], seed: Optional[int] = None) -> CheckRecord:
    """Above the window the frequency decreases in N: no significant rise, and it drops or sits at zero."""
    if len(rows) < 2:
        return CheckRecord("typicality-control-trend", float("nan"), 0.0, "inconclusive", seed,
                           {"reason": "fewer than two scales"})
    rises = [b["frequency"] - a["frequency"] - 3 * math.hypot(_frequency_se(a), _frequency_se(b))
             for a, b in zip(rows, rows[1:])]
    first, top = rows[0]["frequency"], rows[-1]["frequency"]
    ok = max(rises) <= 0 and (top < first or top == 0.0)
    return CheckRecord("typicality-control-trend", max(rises), 0.0, _status(ok), seed,
                       {"frequencies": [row["frequency"] for row in rows], "scales": [row["N"] for row in rows]})


def run_typicality(config: ExperimentConfig) -> ExperimentReport:
    """Frequency of the excess event under the tilted walk, per N."""
    pipeline = prepare_tilt(config)
    _require_feasible(config, pipeline)
    rows, _ = _typicality_rows(config, pipeline, config.N)
    top = rows[-1]
    if config.event_level is None:
        checks = [CheckRecord("typicality", top["frequency"], config.typicality_threshold,
                              _status(top["frequency"] >= config.typicality_threshold), config.seed,
                              {"N": top["N"]})]
    else:
        # a level above the window must visibly fail to be typical
        checks = [CheckRecord("typicality-control", top["frequency"], config.typicality_threshold,
                              _status(top["frequency"] < config.typicality_threshold), config.seed,
                              {"N": top["N"], "event_level": config.event_level}),
                  typicality_control_trend(rows, config.seed)]
    return ExperimentReport("typicality", rows, checks, {"quasi_minimizer": pipeline.quasi_minimizer.as_dict()})


# ---- Entropy and the lower bound ----

def entropy_bound(p: float, H: float) -> Optional[float]:
    """log p - (H + 1/e)/p; undefined (None) at p = 0."""
    if p <= 0:
        return None
    return math.log(p) - (H + 1.0 / math.e) / p


def _bound_stderr(p: float, p_se: float, H: float, H_se: float) -> float:
    d_p = 1.0 / p + (H + 1.0 / math.e) / p ** 2
    return math.hypot(d_p * p_se, H_se / p)


def assemble_lower_bound(typicality_rows: Sequence[Dict[str, Any]], entropy_rows: Sequence[Dict[str, Any]],
                         budget: float, d: int = 3) -> List[Dict[str, Any]]:
    """Per N: entropy-inequality bound on log P[A_N], raw and divided by N^{d-2}, from stored estimates."""
    entropy_by_n = {row["N"]: row for row in entropy_rows}
    rows = []
    for typ in typicality_rows:
        N = typ["N"]
        ent = entropy_by_n[N]
        p, H = typ["frequency"], ent["estimate"]
        scale = float(N) ** (d - 2)
        bound = entropy_bound(p, H)
        row = {"N": N, "p_tilde": p, "p_ci_low": typ["ci_low"], "p_ci_high": typ["ci_high"], "entropy": H,
               "entropy_stderr": ent["stderr"], "bound": bound, "normalized_bound": None,
               "normalized_stderr": None, "budget": budget}
        if bound is not None:
            p_se = math.sqrt(p * (1 - p) / typ["replicas"])
            row["normalized_bound"] = bound / scale
            row["normalized_stderr"] = _bound_stderr(p, p_se, H, ent["stderr"]) / scale
        rows.append(row)
    return rows


def _entropy_rows(config: ExperimentConfig, specs: Dict[int, TiltSpec]) -> List[Dict[str, Any]]:
    rows = []
    for N, spec in specs.items():
        report = estimate_relative_entropy(spec, _origin(config), config.entropy_replicas,
                                           RngStream(config.seed, 0, f"entropy/N={N}"), config.workers)
        rows.append({"N": N, "estimate": report.estimate, "stderr": report.stderr, "budget": report.budget,
                     "stationary_prediction": report.stationary_prediction, "identity_gap": report.identity_gap,
                     "bookkeeping_error": report.bookkeeping_error, **{f"term_{k}": v for k, v in report.terms.items()}})
    return rows


def budget_line(config: ExperimentConfig, pipeline: TiltPipeline) -> Tuple[float, float]:
    """(-(1+eps) I(nu + 2 delta), level used); falls back to nu(1 + 2 delta) when nu + 2 delta is infeasible."""
    level = config.nu + 2 * config.delta
    try:
        solution = solve_constrained(pipeline.theta, level, config.domain.shape, config.domain.r_D, config.big_r,
                                     config.solver.h, config.d, solver_options(config),
                                     initial=pipeline.solution.phi)
    except InfeasibleLevelError:
        level = config.nu * (1 + 2 * config.delta)
        logger.warning(f"nu + 2 delta is infeasible; budget uses I({level:g})")
        solution = solve_constrained(pipeline.theta, level, config.domain.shape, config.domain.r_D, config.big_r,
                                     config.solver.h, config.d, solver_options(config),
                                     initial=pipeline.solution.phi)
    return -(1 + config.epsilon) * solution.energy, level


def lower_bound_checks(rows: Sequence[Dict[str, Any]], budget: float, slack: float,
                       seed: Optional[int] = None) -> List[CheckRecord]:
    top = rows[-1]
    threshold = budget * (1 + slack)
    if top["normalized_bound"] is None:
        budget_check = CheckRecord("lower-bound-budget", float("nan"), threshold, "inconclusive", seed,
                                   {"reason": "tilted event frequency is zero", "N": top["N"]})
    else:
        budget_check = CheckRecord("lower-bound-budget", top["normalized_bound"], threshold,
                                   _status(top["normalized_bound"] >= threshold), seed, {"N": top["N"]})
    defined = [row for row in rows if row["normalized_bound"] is not None]
    if len(defined) < 2:
        trend = CheckRecord("lower-bound-trend", float("nan"), 0.0, "inconclusive", seed,
                            {"reason": "fewer than two scales with a defined bound"})
    else:
        margins = []
        for a, b in zip(defined, defined[1:]):
            tolerance = 3 * math.hypot(a["normalized_stderr"], b["normalized_stderr"])
            margins.append(b["normalized_bound"] - a["normalized_bound"] + tolerance)
        trend = CheckRecord("lower-bound-trend", min(margins), 0.0, _status(min(margins) >= 0), seed,
                            {"scales": [row["N"] for row in defined]})
    return [budget_check, trend]


def run_lower_bound(config: ExperimentConfig) -> ExperimentReport:
    """Typicality and entropy per N, the entropy-inequality bound and the budget line."""
    pipeline = prepare_tilt(config)
    _require_feasible(config, pipeline)
    typicality, specs = _typicality_rows(config, pipeline, config.N)
    entropy = _entropy_rows(config, specs)
    budget, level = budget_line(config, pipeline)
    rows = assemble_lower_bound(typicality, entropy, budget, config.d)
    checks = lower_bound_checks(rows, budget, config.slack, config.seed)
    logger.info(f"Lower bound at N={rows[-1]['N']}: {rows[-1]['normalized_bound']} against budget {budget:.6g}")
    return ExperimentReport("lower_bound", rows, checks,
                            {"budget_level": level, "typicality": typicality, "entropy": entropy,
                             "quasi_minimizer": pipeline.quasi_minimizer.as_dict()})


# ---- Direct check ----

def _direct_block(task) -> np.ndarray:
    F, window, gather, y, kill, n, stream = task
    rng = stream.generator()
    occupation = ReplicaOccupation(window, np.arange(n), n)
    starts = np.repeat(np.asarray(y, dtype=np.int64)[None, :], n, axis=0)
    run_walkers(starts, StopRule.killed(kill), rng, observers=[occupation])
    return event_statistics(F, occupation.fields, gather)


def run_direct_check(config: ExperimentConfig, normalized_bound: Optional[float] = None) -> ExperimentReport:
    """Naive simple-random-walk frequency of A_N against exp(N^{d-2} * bound) at a small N."""
    N = config.direct.N
    pipeline = prepare_tilt(config)
    if normalized_bound is None:
        _require_feasible(config, pipeline)
        typicality, specs = _typicality_rows(config, pipeline, [N])
        budget, _ = budget_line(config, pipeline)
        normalized_bound = assemble_lower_bound(typicality, _entropy_rows(config, specs), budget, config.d)[0][
            "normalized_bound"]
    level = config.event_level if config.event_level is not None else config.nu
    F = pipeline.F
    centers = discrete_blowup(config.domain.shape, config.domain.r_D, N, config.d).sites
    window, gather = window_gather(F, centers)
    kill = config.direct.kill_factor * (int(math.ceil(N * config.domain.r_D)) + F.radius)
    replicas = config.direct.replicas
    sizes = [min(DIRECT_BLOCK, replicas - s) for s in range(0, replicas, DIRECT_BLOCK)]
    streams = RngStream(config.seed, 0, f"direct/N={N}").spawn(len(sizes), "srw-paths")
    stats = np.concatenate(replica_map(
        _direct_block, [(F, window, gather, _origin(config), kill, n, s) for n, s in zip(sizes, streams)],
        config.workers))
    hits = int(np.sum(stats > level))
    p, lo, hi = wilson_interval(hits, replicas)
    row = {"N": N, "replicas": replicas, "hits": hits, "frequency": p, "ci_low": lo, "ci_high": hi,
           "event_level": level, "kill_radius": kill, "normalized_bound": normalized_bound}
    if normalized_bound is None:
        check = CheckRecord("direct-consistency", p, float("nan"), "inconclusive", config.seed,
                            {"reason": "bound undefined"})
    else:
        implied = math.exp(normalized_bound * float(N) ** (config.d - 2))
        row["implied_probability"] = implied
        check = CheckRecord("direct-consistency", hi, implied, _status(hi >= implied), config.seed, {"N": N})
    return ExperimentReport("direct_check", [row], [check])


# ---- Poisson concentration ----

def _concentration_block(task) -> np.ndarray:
    law, intensity, outer, F, window, gather, n, stream = task
    rng = stream.generator()
    counts = rng.poisson(intensity, size=n)
    owners = np.repeat(np.arange(n), counts)
    occupation = ReplicaOccupation(window, owners, n)
    starts = law.draw_starts(len(owners), rng)
    run_walkers(starts, StopRule.killed(outer), rng, observers=[occupation])
    return event_statistics(F, occupation.fields, gather)


def _concentration_statistics(config: ExperimentConfig, F: LocalFunctional, N: int, big_delta: float,
                              stream: RngStream) -> Tuple[WindowLaw, float, np.ndarray]:
    conc = config.concentration
    ball = enumerate_box(Box.centered(N, config.d))
    outer = int(math.ceil(conc.gamma * N))
    if outer < N + F.radius:
        raise LabError(f"U = B(0, {outer}) does not contain the windows of B(0, {N})")
    law = WindowLaw.of(ball, accuracy=1e-3)
    intensity = conc.a * (1 + big_delta) * law.capacity
    window, gather = window_gather(F, ball)
    sizes = [min(CONCENTRATION_BLOCK, conc.replicas - s) for s in range(0, conc.replicas, CONCENTRATION_BLOCK)]
    streams = stream.spawn(len(sizes), "excursions")
    stats = np.concatenate(replica_map(
        _concentration_block, [(law, intensity, outer, F, window, gather, n, s) for n, s in zip(sizes, streams)],
        config.workers))
    return law, intensity, stats


def delta_growth_check(sweep: Sequence[Dict[str, Any]], seed: Optional[int] = None) -> CheckRecord:
    """Mean margin over theta(a) grows with Delta: no significant drop, and a net rise end to end."""
    if len(sweep) < 2:
        return CheckRecord("concentration-delta-growth", float("nan"), 0.0, "inconclusive", seed,
                           {"reason": "fewer than two Delta values"})
    drops = [a["margin"] - b["margin"] - 3 * math.hypot(a["margin_stderr"], b["margin_stderr"])
             for a, b in zip(sweep, sweep[1:])]
    ok = max(drops) <= 0 and sweep[-1]["margin"] > sweep[0]["margin"]
    return CheckRecord("concentration-delta-growth", max(drops), 0.0, _status(ok), seed,
                       {"Delta": [row["Delta"] for row in sweep], "margins": [row["margin"] for row in sweep]})


def run_poisson_concentration(config: ExperimentConfig) -> ExperimentReport:
    """
    Poisson(a(1+Delta) cap(B)) walks from e~_B stopped on leaving U = B(0, gamma N):
    frequency of (1/|B|) sum_x F <= theta(a), per N, and the mean margin across
    the Delta sweep at the largest N.
    """
    conc = config.concentration
    F = get_functional(config.functional, config.d)
    if config.solver.theta == "closed-form":
        theta_a = float(closed_form_theta(F, conc.a))
    else:
        estimate = estimate_theta(F, [conc.a], config.solver.theta_replicas,
                                  RngStream(config.seed, 0, "concentration-theta"), config.workers)
        theta_a = float(estimate.estimates[0])
    rows, checks = [], []
    for N in sorted(conc.N):
        law, intensity, stats = _concentration_statistics(config, F, N, conc.big_delta,
                                                          RngStream(config.seed, 0, f"concentration/N={N}"))
        low = int(np.sum(stats <= theta_a))
        p, lo, hi = wilson_interval(low, len(stats))
        row = {"N": N, "replicas": len(stats), "capacity": law.capacity, "intensity": intensity, "theta_a": theta_a,
               "downward": low, "frequency": p, "ci_low": lo, "ci_high": hi, "mean_statistic": float(stats.mean()),
               "margin": float(stats.mean()) - theta_a}
        if F.name == "F2":
            empty = int(np.sum(stats <= 0.0))
            row["zero_events"] = empty
            row["zero_probability_exact"] = math.exp(-intensity)
            _, zlo, zhi = wilson_interval(empty, len(stats), z=4.0)
            checks.append(CheckRecord(f"concentration-vacancy-N{N}", empty / len(stats), math.exp(-intensity),
                                      _status(zlo <= math.exp(-intensity) <= zhi), config.seed))
        rows.append(row)
        logger.info(f"Concentration at N={N}: {low}/{len(stats)} at or below theta(a)={theta_a:.4g}")
    top = rows[-1]
    checks.append(CheckRecord("concentration-downward", top["frequency"], conc.threshold,
                              _status(top["frequency"] <= conc.threshold), config.seed, {"N": top["N"]}))
    checks.append(CheckRecord("concentration-mean", top["margin"], 0.0, _status(top["margin"] > 0), config.seed))
    rises = [b["frequency"] - a["frequency"] - 3 * math.hypot(_frequency_se(a), _frequency_se(b))
             for a, b in zip(rows, rows[1:])]
    if rises:
        checks.append(CheckRecord("concentration-trend", max(rises), 0.0, _status(max(rises) <= 0), config.seed))
    sweep = []
    for big_delta in conc.delta_sweep:
        _, intensity, stats = _concentration_statistics(
            config, F, top["N"], big_delta, RngStream(config.seed, 0, f"concentration-sweep/Delta={big_delta:g}"))
        mean, se = mean_and_stderr(stats)
        sweep.append({"Delta": big_delta, "N": top["N"], "intensity": intensity, "margin": mean - theta_a,
                      "margin_stderr": se})
    checks.append(delta_growth_check(sweep, config.seed))
    return ExperimentReport("concentration", rows, checks, {"delta_sweep": sweep})


# ---- Single-operation runs ----

def run_capacity(site_set: str, accuracy: float = 1e-4, d: int = 3) -> ExperimentReport:
    K = parse_site_set(site_set, d)
    eq = equilibrium_measure(K, accuracy)
    row = {"set": site_set, "sites": len(K), "capacity": eq.capacity, "error_bound": eq.error_bound,
           "truncation_radius": eq.truncation_radius}
    return ExperimentReport("capacity", [row])


def run_green(pairs: Sequence[Tuple[Sequence[int], Sequence[int]]], accuracy: float = 1e-4) -> ExperimentReport:
    table = green_table(pairs, accuracy)
    return ExperimentReport("green", table.as_rows())


def run_theta(functional: str, levels: Sequence[float], replicas: int, seed: int, d: int = 3,
              workers: Optional[int] = None) -> ExperimentReport:
    """theta estimate with its closed form (when one exists) and the structural checks."""
    F = get_functional(functional, d)
    estimate = estimate_theta(F, levels, replicas, RngStream(seed, 0, "theta"), workers)
    exact = closed_form_theta(F, estimate.levels)
    rows = estimate.as_rows(exact)
    checks = []
    if exact is not None:
        sigma = estimate.half_widths / Z95
        z = np.abs(estimate.estimates - exact) / np.where(sigma > 0, sigma, np.inf)
        checks.append(CheckRecord("theta-closed-form", float(z.max()), 3.0, _status(float(z.max()) <= 3.0), seed))
    if len(estimate.levels) >= 3:
        checks.extend(theta_property_check(F, estimate))
    return ExperimentReport("theta", rows, checks, {"method": estimate.method, "monotone": estimate.monotone})


def run_solve(config: ExperimentConfig) -> ExperimentReport:
    """I_{D,R} at nu, nu(1+delta) and nu(1+2 delta), checked for increase."""
    F = get_functional(config.functional, config.d)
    theta = theta_for(config, F)
    nus = [config.nu * (1 + k * config.delta) for k in range(3)]
    solutions = rate_function_curve(theta, nus, config.domain.shape, config.domain.r_D, config.big_r,
                                    config.solver.h, config.d, solver_options(config), config.workers or 1)
    rows = [s.summary() for s in solutions]
    energies = [s.energy for s in solutions]
    increasing = all(b > a for a, b in zip(energies, energies[1:]))
    checks = [CheckRecord("rate-increasing", min(b - a for a, b in zip(energies, energies[1:])), 0.0,
                          _status(increasing)),
              CheckRecord("solver-converged", float(sum(s.converged for s in solutions)), float(len(solutions)),
                          _status(all(s.converged for s in solutions)))]
    return ExperimentReport("solve", rows, checks)


def run_quasimin(config: ExperimentConfig, out_dir: Optional[Union[str, Path]] = None) -> ExperimentReport:
    pipeline = prepare_tilt(config)
    qm = pipeline.quasi_minimizer
    extras = {"solution": pipeline.solution.summary()}
    if out_dir is not None:
        extras["grid_file"] = qm.phi.save(Path(out_dir) / "quasi_minimizer.npz").name
    checks = [CheckRecord("quasimin-positive", float(qm.phi.minimum_inside()), 0.0, _status(qm.positive)),
              CheckRecord("quasimin-window", qm.constraint, qm.window[0], _status(qm.in_window),
                          details={"window": list(qm.window)}),
              CheckRecord("quasimin-radial", max(qm.radial_upper_excess, qm.radial_lower_deficit), 0.05,
                          _status(qm.radial_ok))]
    return ExperimentReport("quasimin", [qm.as_dict()], checks, extras)


def run_tilt_entropy(config: ExperimentConfig) -> ExperimentReport:
    """Relative entropy per N against the budget and the stationary prediction, with the tilt constants checked."""
    pipeline = prepare_tilt(config)
    specs = {N: _tilt(config, pipeline.quasi_minimizer.phi, N) for N in config.N}
    rows = _entropy_rows(config, specs)
    checks = []
    for row in rows:
        N = row["N"]
        slack = 3 * row["stderr"] + math.log(N) ** 2
        gap = abs(row["estimate"] - row["stationary_prediction"])
        checks.append(CheckRecord(f"entropy-N{N}", gap, slack, _status(gap <= slack), config.seed))
        scale = max(1.0, abs(row["budget"]))
        checks.append(CheckRecord(f"gauss-green-N{N}", row["identity_gap"], 1e-10 * scale,
                                  _status(row["identity_gap"] <= 1e-10 * scale)))
    checks.extend(technical_bound_checks(list(specs.values()), config.seed))
    bounds = [spec.bounds for spec in specs.values()]
    return ExperimentReport("tilt_entropy", rows, checks, {"technical_bounds": bounds})


# ---- Excursion runs ----

def excursion_tilt(config: ExperimentConfig, N: int) -> TiltSpec:
    if config.tilt.profile == "radial":
        phi = radial_profile(config.tilt.a, config.big_r, config.d, config.solver.h)
    elif config.tilt.profile == "ground-state":
        phi = ground_state_profile(config.big_r, config.d, config.solver.h)
    else:
        phi = prepare_tilt(config).quasi_minimizer.phi
    return _tilt(config, phi, N)


def excursion_scaffold(config: ExperimentConfig, spec: TiltSpec):
    sc = config.scaffold
    x0 = sc.x0 if sc.x0 is not None else [0] * config.d
    if config.tilt.profile == "radial":
        domain = ("ball", config.tilt.a, config.delta)
    else:
        domain = (config.domain.shape, config.domain.r_D, config.delta)
    return build_scaffold(x0, spec.N, sc.delta_tilde, exponents=sc.exponents if sc.mode == "exponents" else None,
                          radii=sc.radii if sc.mode == "direct" else None, spec=spec, eta=sc.eta, domain=domain,
                          d=config.d)


def _hitting_row(spec: TiltSpec, scaffold, qsd) -> Dict[str, Any]:
    return {"N": spec.N, **hitting_distribution_comparison(spec, scaffold, qsd).as_dict()}


def _hitting_at(config: ExperimentConfig, N: int) -> Dict[str, Any]:
    spec = excursion_tilt(config, N)
    scaffold = excursion_scaffold(config, spec)
    return _hitting_row(spec, scaffold, compute_qsd(spec, scaffold))


def tv_start(config: ExperimentConfig, scaffold) -> Tuple[int, ...]:
    """Configured start, or x0 + (radius of A2 + 1) e1: the site next to x0 along e1 outside A2."""
    if config.excursions.tv_start is not None:
        return tuple(config.excursions.tv_start)
    return tuple(int(c) + (scaffold.radii[1] + 1 if k == 0 else 0) for k, c in enumerate(scaffold.x0))


def run_qsd(config: ExperimentConfig) -> ExperimentReport:
    """QSD exactness, conditional convergence and the hitting-law comparison under N-doubling."""
    exc = config.excursions
    N = exc.N
    spec = excursion_tilt(config, N)
    scaffold = excursion_scaffold(config, spec)
    qsd = compute_qsd(spec, scaffold)
    fixed = qsd_fixed_point_error(spec, qsd)
    times = sorted(set(exc.tv_times) | {float(spec.t_star)})
    start = tv_start(config, scaffold)
    profile = conditional_tv_profile(spec, scaffold, qsd, start, times)
    at_star = next(row["tv"] for row in profile if row["t"] == float(spec.t_star))
    checks = [CheckRecord("qsd-residual", qsd.residual, 1e-10, _status(qsd.residual <= 1e-10)),
              CheckRecord("qsd-fixed-point", fixed, 1e-8, _status(fixed <= 1e-8)),
              CheckRecord("qsd-positive", float(qsd.sigma.min()), 0.0, _status(float(qsd.sigma.min()) > 0)),
              CheckRecord("qsd-tv-at-t-star", at_star, 1e-3, _status(at_star <= 1e-3), details={"start": list(start)})]
    small, large = exc.hitting_scales or (N, 2 * N)
    hitting = []
    try:
        hitting.append(_hitting_row(spec, scaffold, qsd) if small == N else _hitting_at(config, small))
        hitting.append(_hitting_at(config, large))
    except LabError as e:
        logger.warning(f"Hitting comparison at N={small}->{large} not available: {str(e)}")
        checks.append(CheckRecord("hitting-trend", float("nan"), 0.0, "inconclusive", config.seed,
                                  {"scales": [small, large], "reason": str(e)}))
    if len(hitting) == 2:
        worst = max(hitting[1][k] - hitting[0][k] for k in ("hit_vs_srw", "hit_vs_tilted", "tilted_vs_srw"))
        checks.append(CheckRecord("hitting-trend", worst, 0.0, _status(worst <= 0), config.seed,
                                  {"scales": [small, large]}))
    return ExperimentReport("qsd", profile, checks, {"eigenvalue": qsd.eigenvalue, "states": len(qsd.sites),
                                                     "hitting": hitting, "tv_start": list(start),
                                                     "scaffold": scaffold.as_dict()})


def run_couple_check(config: ExperimentConfig) -> ExperimentReport:
    """Excursion counts, the three coupling comparisons and the swapped-intensity controls."""
    exc = config.excursions
    spec = excursion_tilt(config, exc.N)
    scaffold = excursion_scaffold(config, spec)
    stream = RngStream(config.seed, 0, "couple-check")
    start = tuple(exc.start) if exc.start is not None else default_count_start(scaffold)
    checks = excursion_count_experiment(spec, scaffold, start, exc.replicas, stream.child("counts").generator())
    qsd = qsd_sampler(spec, scaffold)
    report = coupling_chain_check(spec, scaffold, exc.replicas, stream.child("chain").generator(), qsd=qsd,
                                  delta=exc.delta, alpha=exc.alpha)
    checks.extend(report.records)
    diagnostics = []
    if exc.control:
        control, swap = negative_control(spec, scaffold, qsd, exc.replicas, stream.child("control").generator(),
                                         exc.alpha, exc.control_factor, exc.swap_replicas)
        checks.append(control)
        diagnostics.append(swap)
    for check in checks + diagnostics:
        check.seed = config.seed
    rows = [check.to_dict() for check in checks + diagnostics]
    for row in rows:
        row.pop("details")
    extras = {"scaffold": scaffold.as_dict(), "count_start": list(start), "sigma": type(qsd).__name__,
              "diagnostics": [check.to_dict() for check in diagnostics]}
    if isinstance(qsd, SurvivalQsd):
        extras["sigma_survival"] = qsd.survival
    return ExperimentReport("couple_check", rows, checks, extras)


# ---- Artifacts ----

def write_csv(path: Union[str, Path], rows: Sequence[Dict[str, Any]]) -> Path:
    path = Path(path)
    columns: List[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _plain(v) for k, v in row.items()})
    return path


def _plain(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value


def write_report(report: ExperimentReport, out_dir: Union[str, Path]) -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = write_csv(out / f"{report.name}.csv", report.rows)
    json_path = out / f"{report.name}.json"
    json_path.write_text(json.dumps(_plain(report.to_dict()), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return [csv_path, json_path]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Union[str, Path], command: str, files: Sequence[Path],
                   config: Optional[ExperimentConfig] = None, seed: Optional[int] = None,
                   argv: Optional[Sequence[str]] = None, config_path: Optional[Union[str, Path]] = None) -> Path:
    """
    Plain-text run manifest: command line, output directory, config (path,
    hash and an embedded copy), seed, versions, formats and artifact hashes.
    """
    out = Path(out_dir)
    files = list(files)
    lines = [f"command: {command}"]
    if argv is not None:
        lines.append(f"argv: {shlex.join(argv)}")
    lines.append(f"out_dir: {out}")
    if config is not None:
        lines.append(f"experiment: {config.experiment}")
        lines.append(f"config_path: {config_path if config_path is not None else 'none'}")
        lines.append(f"config_sha256: {config.source_sha256 or 'none'}")
        if config.source_text is not None:
            embedded = out / EMBEDDED_CONFIG
            embedded.write_text(config.source_text, encoding="utf-8")
            files.append(embedded)
        seed = config.seed
    lines.append(f"seed: {seed if seed is not None else 'none'}")
    lines.append(f"python: {platform.python_version()}")
    lines.append(f"numpy: {np.__version__}")
    lines.append(f"scipy: {scipy.__version__}")
    lines.append(f"pydantic: {pydantic.VERSION}")
    lines.append(f"formats: {REPORT_FORMAT} {GRID_FORMAT} {TILT_FORMAT}")
    for path in sorted(files, key=lambda p: Path(p).name):
        lines.append(f"file: {Path(path).name} {_sha256(Path(path))}")
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_manifest(path: Union[str, Path]) -> Dict[str, Any]:
    """Manifest fields; `argv` comes back as a list and `files` maps names to hashes."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"manifest {path} does not exist")
    fields: Dict[str, Any] = {"files": {}}
    for line in path.read_text(encoding="utf-8").splitlines():
        key, _, value = line.partition(": ")
        if key == "file":
            name, _, digest = value.rpartition(" ")
            fields["files"][name] = digest
        elif key == "argv":
            fields["argv"] = shlex.split(value)
        else:
            fields[key] = value
    if "argv" not in fields:
        raise ConfigurationError(f"manifest {path} records no command line")
    return fields
