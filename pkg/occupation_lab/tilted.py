# occupation_lab/tilted.py
"""
Tilted and confined walks driven by a positive profile phi on B_R.

phi_N(x) = phi(x/N) on U^N, the lattice sites of N·B_R where phi_N > 0;
f = phi_N / ||phi_N||, pi = f², v = -Δphi_N / phi_N, S_N = (1+eps) ||phi_N||².
The confined walk has conductances (1/2d) phi_N(x) phi_N(y) and speed measure
phi_N²; the tilted walk follows it up to S_N and is a simple random walk after.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.sparse import diags
from scipy.sparse.linalg import ArpackNoConvergence, eigsh, expm_multiply, lobpcg

from .errors import InsufficientReplicasError, TiltError
from .lattice import Box, BoxArray, SiteIndex, internal_boundary, unit_vectors
from .rng import RngStream, replica_map
from .stats import Z95, CheckRecord, mean_and_stderr
from .variational import GridFunction
from .walks import (OccupationField, ProductConductances, StopCause, StopRule, WalkObserver, WalkResult,
                    generator_matrix, run_walkers, simulate_conductance_walk, simulate_srw_until)

logger = logging.getLogger("occupation-lab.tilted")

EXACT_STATE_LIMIT = 100_000
MIN_ENTROPY_REPLICAS = 100
ENTROPY_BLOCK = 500
STABILITY_FACTOR = 1.5
BOUNDARY_MARGIN = 2.0
TILT_FORMAT = "occupation-lab/tilt/1"


def regeneration_time(N: int) -> int:
    """t_* = ceil(N² (ln N)²)."""
    return int(math.ceil(N * N * math.log(N) ** 2))


class TiltSpec:
    """Blow-up of a profile phi at scale N with time budget S_N = (1+eps) ||phi_N||²."""

    def __init__(self, phi: GridFunction, N: int, epsilon: float, big_r: Optional[float] = None,
                 r_D: Optional[float] = None, order: int = 1):
        if int(N) != N or N < 2:
            raise TiltError(f"scale N must be an integer >= 2, got {N}")
        if not 0 < epsilon < 1:
            raise TiltError(f"epsilon must lie in (0, 1), got {epsilon}")
        if order not in (1, 3, 5):
            raise TiltError(f"spline order must be 1, 3 or 5, got {order}")
        big_r = phi.radius if big_r is None else float(big_r)
        if abs(big_r - phi.radius) > 1e-12:
            raise TiltError(f"profile radius {phi.radius} does not match R={big_r}")
        r_D = phi.meta.get("r_D") if r_D is None else r_D
        if r_D is not None and not big_r > 4 * r_D:
            raise TiltError(f"R={big_r} must exceed 4 r_D = {4 * r_D}")
        if phi.minimum_inside() <= 0:
            raise TiltError("profile vanishes at an interior grid node")
        self.phi = phi
        self.N = int(N)
        self.epsilon = float(epsilon)
        self.order = int(order)
        self.big_r = big_r
        self.r_D = r_D
        total = math.fsum(self.f ** 2)
        if abs(total - 1.0) > 1e-12:
            raise TiltError(f"normalised tilt has squared mass {total}")
        logger.info(f"Tilt at N={self.N}: |U^N|={len(self.sites)}, S_N={self.S_N:.6g}, t*={self.t_star}")

    @property
    def d(self) -> int:
        return self.phi.d

    @cached_property
    def box(self) -> Box:
        return Box.centered(int(math.ceil(self.N * self.big_r)), self.d)

    @cached_property
    def phi_n_box(self) -> BoxArray:
        """phi_N on the box around N·B_R by spline interpolation of the given order, zero off U^N."""
        M = self.box.radius
        axis = np.arange(-M, M + 1)
        grids = np.meshgrid(*([axis] * self.d), indexing="ij")
        n = self.phi.half_width
        coords = [g / (self.N * self.phi.h) + n for g in grids]
        values = map_coordinates(self.phi.values, coords, order=self.order, mode="constant", cval=0.0)
        norm = np.sqrt(sum(g.astype(float) ** 2 for g in grids))
        values[norm >= self.N * self.big_r] = 0.0
        values[values < 0] = 0.0
        return BoxArray(self.box.lower, values)

    def phi_n(self, points) -> np.ndarray:
        return self.phi_n_box.at(points)

    @cached_property
    def sites(self) -> np.ndarray:
        return np.argwhere(self.phi_n_box.values > 0) + self.phi_n_box.origin

    @cached_property
    def index(self) -> SiteIndex:
        return SiteIndex(self.sites, self.d)

    @cached_property
    def phi_sites(self) -> np.ndarray:
        return self.phi_n_box.values[tuple((self.sites - self.phi_n_box.origin).T)]

    @cached_property
    def norm2(self) -> float:
        return math.fsum(self.phi_sites ** 2)

    @cached_property
    def f(self) -> np.ndarray:
        return self.phi_sites / math.sqrt(self.norm2)

    @cached_property
    def pi(self) -> np.ndarray:
        return self.f ** 2

    @cached_property
    def v(self) -> np.ndarray:
        lap = self.phi_n_box.laplacian()
        return -lap.at(self.sites) / self.phi_sites

    @cached_property
    def S_N(self) -> float:
        return (1.0 + self.epsilon) * self.norm2

    @property
    def t_star(self) -> int:
        return regeneration_time(self.N)

    def conductances(self) -> ProductConductances:
        return ProductConductances(self.phi_n_box, name=f"tilt(N={self.N})")

    def lookup(self, sites) -> np.ndarray:
        return self.index.lookup(sites)

    def require_inside(self, y) -> int:
        pos = int(self.lookup(np.asarray(y))[0])
        if pos < 0:
            raise TiltError(f"start {tuple(np.asarray(y).tolist())} is outside U^N")
        return pos

    def energy(self) -> float:
        """E_{Z^d}(phi_N, phi_N)."""
        return self.phi_n_box.dirichlet_energy()

    def budget(self) -> float:
        return (1.0 + self.epsilon) * self.energy()

    def stationary_prediction(self) -> float:
        """S_N Σ v pi, which equals the budget by the discrete Gauss-Green identity."""
        return self.S_N * math.fsum(self.v * self.pi)

    def technical_bounds(self, eta: float = 0.25) -> Dict[str, float]:
        """Empirical constants of the size, boundary and potential bounds for phi_N."""
        N, d = self.N, self.d
        boundary = self.index.lookup(internal_boundary(self.index))
        norm = np.sqrt((self.sites.astype(float) ** 2).sum(axis=1))
        core = norm < (1 - eta) * N * self.big_r
        return {
            "N": N,
            "phi_max": float(self.phi_sites.max()),
            "phi_min_times_N2": float(self.phi_sites.min() * N ** 2),
            "boundary_max_times_N_over_max": float(self.phi_sites[boundary].max() * N / self.phi_sites.max()),
            "norm2_over_Nd": self.norm2 / N ** d,
            "v_max_times_N2": float(self.v.max() * N ** 2),
            "v_core_min_times_N2": float(self.v[core].min() * N ** 2) if core.any() else float("nan"),
            "S_N_over_Nd": self.S_N / N ** d,
            "states": int(len(self.sites)),
        }

    @cached_property
    def bounds(self) -> Dict[str, float]:
        return self.technical_bounds()

    def boundary_constant(self) -> float:
        """C in phi_N <= (C/N) max phi on the internal boundary, from the profile slope over its maximum."""
        gradient = np.gradient(self.phi.values, self.phi.h)
        slope = float(np.sqrt(sum(g ** 2 for g in gradient)).max())
        return BOUNDARY_MARGIN * slope / float(self.phi.values.max())


def build_tilt(phi: GridFunction, N: int, epsilon: float, big_r: Optional[float] = None,
               r_D: Optional[float] = None, order: int = 1) -> TiltSpec:
    """Validated tilt at scale N; its size, boundary and potential constants are kept on `spec.bounds`."""
    spec = TiltSpec(phi, N, epsilon, big_r, r_D, order)
    constants = ", ".join(f"{k}={v:.4g}" for k, v in spec.bounds.items() if k != "N")
    logger.info(f"Tilt constants at N={spec.N}: {constants}")
    return spec


def _doubling_growth(lo_N: int, lo: float, hi_N: int, hi: float, floor: float) -> float:
    """Growth of a constant from scale lo_N to hi_N rescaled to one doubling of N."""
    return ((hi + floor) / (lo + floor)) ** (math.log(2) / math.log(hi_N / lo_N))


def technical_bound_checks(specs: Sequence[TiltSpec], seed: Optional[int] = None) -> List[CheckRecord]:
    """
    Boundary smallness per scale, and stability of the two potential constants
    max v N² and max(0, -min_core v N²) across scales.
    """
    specs = sorted(specs, key=lambda s: s.N)
    checks = []
    for spec in specs:
        stat = spec.bounds["boundary_max_times_N_over_max"]
        limit = spec.boundary_constant()
        checks.append(CheckRecord(f"tilt-boundary-N{spec.N}", stat, limit, "pass" if stat <= limit else "fail", seed,
                                  {"phi_min_times_N2": spec.bounds["phi_min_times_N2"]}))
    constants = [(s.N, s.bounds["v_max_times_N2"], -s.bounds["v_core_min_times_N2"]) for s in specs]
    if len(constants) < 2 or any(not math.isfinite(c) for _, up, low in constants for c in (up, low)):
        checks.append(CheckRecord("tilt-potential-stable", float("nan"), STABILITY_FACTOR, "inconclusive", seed,
                                  {"constants": constants, "reason": "needs two scales with a nonempty core"}))
        return checks
    floor = max(0.1 * max(abs(up) for _, up, _ in constants), 1e-9)
    growth = max(max(_doubling_growth(a[0], max(a[1], 0.0), b[0], max(b[1], 0.0), floor),
                     _doubling_growth(a[0], max(a[2], 0.0), b[0], max(b[2], 0.0), floor))
                 for a, b in zip(constants, constants[1:]))
    checks.append(CheckRecord("tilt-potential-stable", growth, STABILITY_FACTOR,
                              "pass" if growth <= STABILITY_FACTOR else "fail", seed, {"constants": constants}))
    return checks


# ---- Sampling ----

def simulate_confined(spec: TiltSpec, y, T: float, rng: np.random.Generator) -> WalkResult:
    """Confined walk from y up to time T, with its path and occupation field."""
    spec.require_inside(y)
    if T > spec.S_N * (1 + 1e-12):
        logger.warning(f"Confined horizon {T:g} exceeds S_N={spec.S_N:g}")
    return simulate_conductance_walk(spec.conductances(), y, StopRule.at_time(T), rng)


@dataclass
class TiltedPath:
    confined: WalkResult
    tail: WalkResult
    release_site: np.ndarray
    release_time: float
    field: OccupationField

    @property
    def total_time(self) -> float:
        return self.confined.elapsed + self.tail.elapsed


def simulate_tilted(spec: TiltSpec, y, rng: np.random.Generator, tail_kill_radius: Optional[int] = None,
                    tail_horizon: Optional[float] = None) -> TiltedPath:
    """
    Confined dynamics on [0, S_N], then a simple random walk.

    The holding in progress at S_N is cut and the tail starts with a fresh
    exponential clock, which has the same law by memorylessness. The tail is
    killed at sup-radius tail_kill_radius (default 2 ceil(N R)).
    """
    confined = simulate_confined(spec, y, spec.S_N, rng)
    kill = tail_kill_radius if tail_kill_radius is not None else 2 * spec.box.radius
    stop = StopRule.killed(kill, (0,) * spec.d, horizon=tail_horizon)
    tail = simulate_srw_until(confined.final_site, stop, rng)
    field = confined.field + tail.field
    return TiltedPath(confined, tail, confined.final_site, confined.elapsed, field)


@dataclass
class TiltedBatch:
    release_sites: np.ndarray
    tail_sites: np.ndarray
    release_time: float
    tail_time: float


def simulate_tilted_batch(spec: TiltSpec, starts, rng: np.random.Generator, tail_time: float) -> TiltedBatch:
    """Many tilted walks: positions at S_N and tail_time after release."""
    starts = np.atleast_2d(np.asarray(starts, dtype=np.int64))
    if np.any(spec.lookup(starts) < 0):
        raise TiltError("every start must lie in U^N")
    confined = run_walkers(starts, StopRule.at_time(spec.S_N), rng, spec=spec.conductances())
    tail = run_walkers(confined.final_sites, StopRule.at_time(tail_time), rng)
    return TiltedBatch(confined.final_sites, tail.final_sites, spec.S_N, tail_time)


class PotentialIntegral(WalkObserver):
    """∫ v(X_s) ds per walker, and when `split` is set its parts on [0, split) and [split, ∞) accumulated apart."""

    def __init__(self, index: SiteIndex, values: np.ndarray, split: Optional[float] = None):
        self.index = index
        self.values = values
        self.split = split

    def start(self, n_walkers):
        self.total = np.zeros(n_walkers)
        self.before = np.zeros(n_walkers)
        self.after = np.zeros(n_walkers)

    def on_hold(self, ids, sites, t0, hold):
        pos = self.index.lookup(sites)
        v = np.where(pos >= 0, self.values[np.maximum(pos, 0)], 0.0)
        np.add.at(self.total, ids, v * hold)
        if self.split is not None:
            early = np.clip(np.minimum(t0 + hold, self.split) - t0, 0.0, None)
            late = np.clip(t0 + hold - np.maximum(t0, self.split), 0.0, None)
            np.add.at(self.before, ids, v * early)
            np.add.at(self.after, ids, v * late)


# ---- Relative entropy ----

@dataclass
class EntropyReport:
    estimate: float
    stderr: float
    ci_low: float
    ci_high: float
    budget: float
    stationary_prediction: float
    identity_gap: float
    terms: Dict[str, float]
    bookkeeping_error: float
    replicas: int
    N: int
    normalized: Dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


def _entropy_block(task) -> np.ndarray:
    spec, pos, n, stream = task
    rng = stream.generator() if isinstance(stream, RngStream) else stream
    integral = PotentialIntegral(spec.index, spec.v, split=float(spec.t_star))
    starts = np.repeat(spec.sites[pos][None, :], n, axis=0)
    batch = run_walkers(starts, StopRule.at_time(spec.S_N), rng, spec=spec.conductances(), observers=[integral])
    final = spec.lookup(batch.final_sites)
    boundary = np.log(spec.f[final]) - math.log(spec.f[pos])
    return np.stack([boundary, integral.before, integral.after, integral.total])


def estimate_relative_entropy(spec: TiltSpec, y, replicas: int, rng: Union[RngStream, int, np.random.Generator],
                              workers: Optional[int] = None) -> EntropyReport:
    """
    Monte-Carlo E[log M_{S_N}] along confined paths from y, where
    log M = log f(X_{S_N}) - log f(y) + ∫_0^{S_N} v(X_s) ds,
    split into the boundary term, the integral before t_* and the integral after.
    """
    if replicas < MIN_ENTROPY_REPLICAS:
        raise InsufficientReplicasError(f"relative entropy needs at least {MIN_ENTROPY_REPLICAS} replicas")
    pos = spec.require_inside(y)
    if isinstance(rng, np.random.Generator):
        blocks = [_entropy_block((spec, pos, replicas, rng))]
    else:
        stream = rng if isinstance(rng, RngStream) else RngStream(int(rng), 0, "entropy")
        sizes = [min(ENTROPY_BLOCK, replicas - s) for s in range(0, replicas, ENTROPY_BLOCK)]
        streams = stream.spawn(len(sizes), "entropy-paths")
        blocks = replica_map(_entropy_block, [(spec, pos, n, s) for n, s in zip(sizes, streams)], workers)
    boundary, before, after, total = np.concatenate(blocks, axis=1)
    log_m = boundary + total
    split = boundary + before + after
    bookkeeping = float(np.max(np.abs(split - log_m)))
    mean, se = mean_and_stderr(log_m)
    budget = spec.budget()
    prediction = spec.stationary_prediction()
    scale = spec.N ** (spec.d - 2)
    terms = {"boundary": float(boundary.mean()), "pre_regeneration": float(before.mean()),
             "stationary_window": float(after.mean())}
    normalized = {"estimate": mean / scale, "budget": budget / scale, "stationary_prediction": prediction / scale}
    logger.info(f"Relative entropy at N={spec.N}: {mean:.6g} ± {Z95 * se:.3g} (budget {budget:.6g})")
    return EntropyReport(mean, se, mean - Z95 * se, mean + Z95 * se, budget, prediction,
                         abs(prediction - budget), terms, bookkeeping, replicas, spec.N, normalized)


def martingale_check(spec: TiltSpec, y, T: float, replicas: int, rng: np.random.Generator) -> CheckRecord:
    """E[M_T] = 1 under the simple random walk, M stopped at zero when the walk leaves U^N."""
    pos = spec.require_inside(y)
    integral = PotentialIntegral(spec.index, spec.v)
    starts = np.repeat(spec.sites[pos][None, :], replicas, axis=0)
    batch = run_walkers(starts, StopRule(exit=spec.index, horizon=float(T)), rng, observers=[integral])
    survived = batch.mask(StopCause.TIME)
    weights = np.zeros(replicas)
    final = spec.lookup(batch.final_sites[survived])
    weights[survived] = spec.f[final] / spec.f[pos] * np.exp(integral.total[survived])
    mean, se = mean_and_stderr(weights)
    z = (mean - 1.0) / se if se > 0 else 0.0
    return CheckRecord("martingale-mean", float(z), 4.0, "pass" if abs(z) <= 4.0 else "fail",
                       details={"mean": mean, "stderr": se, "T": float(T), "survival": float(survived.mean())})


def generator_consistency(spec: TiltSpec, y, dts: Sequence[float], replicas: int,
                          rng: np.random.Generator) -> CheckRecord:
    """Drift of the generator on coordinate functions against (E[X_dt] - y)/dt."""
    pos = spec.require_inside(y)
    y = spec.sites[pos]
    cond = spec.conductances()
    w = cond.weights(y[None, :])[0]
    speed = cond.speed(y[None, :])[0]
    offsets = unit_vectors(spec.d)
    drift = (w[:, None] * offsets).sum(axis=0) / speed
    neighbourhood = np.vstack([y[None, :], y + offsets])
    local_rate = float(np.max(cond.weights(neighbourhood).sum(axis=1) / np.maximum(cond.speed(neighbourhood), 1e-300)))
    rows, ok = [], True
    starts = np.repeat(y[None, :], replicas, axis=0)
    for dt in dts:
        batch = run_walkers(starts, StopRule.at_time(float(dt)), rng, spec=cond)
        disp = (batch.final_sites - y).astype(float)
        estimate = disp.mean(axis=0) / dt
        se = disp.std(axis=0, ddof=1) / math.sqrt(replicas) / dt
        allowance = 4 * se + dt * local_rate ** 2
        good = bool(np.all(np.abs(estimate - drift) <= allowance))
        ok &= good
        rows.append({"dt": float(dt), "estimate": estimate.tolist(), "stderr": se.tolist(), "ok": good})
    err = max(float(np.max(np.abs(np.array(r["estimate"]) - drift))) for r in rows)
    return CheckRecord("generator-consistency", err, 0.0, "pass" if ok else "fail",
                       details={"drift": drift.tolist(), "rows": rows, "local_rate": local_rate})


# ---- Spectral diagnostics ----

@dataclass
class SpectralReport:
    states: int
    exact: bool
    gap: Optional[float]
    gap_times_n2: Optional[float]
    mixing: List[Dict[str, float]]
    monotone_pi_constant: float

    def as_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


def _spectral_gap(Q, pi: np.ndarray) -> float:
    root = np.sqrt(pi)
    S = (diags(root) @ Q @ diags(1.0 / root)).tocsc()
    S = -(S + S.T) / 2
    try:
        values = eigsh(S, k=2, sigma=-1e-9, which="LM", return_eigenvectors=False)
        return float(np.sort(values)[1])
    except ArpackNoConvergence:
        logger.warning("Shift-invert eigensolve did not converge; retrying with LOBPCG")
        rng = np.random.default_rng(0)
        X = rng.standard_normal((S.shape[0], 1))
        X -= root[:, None] * (root @ X)
        values, _ = lobpcg(S, X, Y=root[:, None], largest=False, tol=1e-9, maxiter=2000)
        return float(values[0])


def _monotone_pi_constant(spec: TiltSpec, rng: np.random.Generator, pairs: int = 1000) -> float:
    norm = np.sqrt((spec.sites.astype(float) ** 2).sum(axis=1))
    a = rng.integers(0, len(norm), size=pairs)
    b = rng.integers(0, len(norm), size=pairs)
    swap = norm[a] > norm[b]
    a[swap], b[swap] = b[swap], a[swap]
    return float(np.min(spec.pi[a] / spec.pi[b]))


def _mixing_panel(spec: TiltSpec, rng: np.random.Generator, extra: int = 8) -> np.ndarray:
    norm = np.sqrt((spec.sites.astype(float) ** 2).sum(axis=1))
    panel = [int(np.argmin(norm)), int(np.argmax(norm)), int(np.argmin(spec.pi))]
    panel += rng.integers(0, len(norm), size=extra).tolist()
    return np.unique(panel)


def spectral_diagnostics(spec: TiltSpec, rng: Optional[np.random.Generator] = None,
                         exact_limit: int = EXACT_STATE_LIMIT, mc_replicas: int = 2000) -> SpectralReport:
    """
    Spectral gap of the confined generator on l²(pi) and sup_{x,y} |P_x[X_t = y] - pi(y)|
    at t_*/4, t_*/2 and t_*, the sup over x taken on a panel of starts
    (centre, outermost site, smallest pi, random sites).
    """
    rng = rng if rng is not None else RngStream(0, 0, "spectral").generator()
    states = len(spec.sites)
    times = [spec.t_star / 4, spec.t_star / 2, float(spec.t_star)]
    panel = _mixing_panel(spec, rng)
    monotone = _monotone_pi_constant(spec, rng)
    if states > exact_limit:
        logger.warning(f"{states} states exceed the exact limit {exact_limit}; estimating mixing by simulation")
        return SpectralReport(states, False, None, None, _mc_mixing(spec, panel, times, mc_replicas, rng), monotone)
    Q = generator_matrix(spec.conductances(), spec.sites)
    gap = _spectral_gap(Q, spec.pi)
    rows = []
    for t in times:
        worst = 0.0
        for x in panel:
            start = np.zeros(states)
            start[x] = 1.0
            law = expm_multiply(Q.T * t, start)
            worst = max(worst, float(np.max(np.abs(law - spec.pi))))
        rows.append({"t": t, "sup_tv": worst})
    logger.info(f"Spectral gap at N={spec.N}: {gap:.6g} (gap N² = {gap * spec.N ** 2:.4g})")
    return SpectralReport(states, True, gap, gap * spec.N ** 2, rows, monotone)


def _mc_mixing(spec: TiltSpec, panel: np.ndarray, times: Sequence[float], replicas: int,
               rng: np.random.Generator) -> List[Dict[str, float]]:
    """Upper confidence bound on sup_y |P_x[X_t = y] - pi(y)| from simulated end points."""
    rows = []
    for t in times:
        worst = 0.0
        for x in panel:
            starts = np.repeat(spec.sites[x][None, :], replicas, axis=0)
            batch = run_walkers(starts, StopRule.at_time(t), rng, spec=spec.conductances())
            counts = np.bincount(spec.lookup(batch.final_sites), minlength=len(spec.sites)) / replicas
            band = 3 * np.sqrt(spec.pi * (1 - spec.pi) / replicas)
            worst = max(worst, float(np.max(np.abs(counts - spec.pi) + band)))
        rows.append({"t": float(t), "sup_tv": worst})
    return rows


# ---- Persistence ----

def save_tilt(spec: TiltSpec, path: Union[str, Path]) -> Path:
    """JSON record next to the profile's .npz file."""
    path = Path(path)
    grid_path = path.with_suffix(".npz")
    spec.phi.save(grid_path)
    record = {"format": TILT_FORMAT, "grid": grid_path.name, "N": spec.N, "epsilon": spec.epsilon,
              "R": spec.big_r, "r_D": spec.r_D, "order": spec.order}
    path.write_text(json.dumps(record, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_tilt(path: Union[str, Path]) -> TiltSpec:
    path = Path(path)
    record = json.loads(path.read_text(encoding="utf-8"))
    if record.get("format") != TILT_FORMAT:
        raise TiltError(f"{path} is not a tilt file")
    phi = GridFunction.load(path.parent / record["grid"])
    return TiltSpec(phi, record["N"], record["epsilon"], record["R"], record.get("r_D"), record.get("order", 1))


def radial_profile(a: float, big_r: float, d: int = 3, h: float = 0.25) -> GridFunction:
    """
    1 on |x| <= a and (|x|^{2-d} - R^{2-d}) / (a^{2-d} - R^{2-d}) outside:
    a positive profile on B_R that is harmonic off B_a.
    """
    def fn(x):
        norm = np.sqrt((x ** 2).sum(axis=1))
        out = np.ones(len(x))
        far = norm > a
        out[far] = (norm[far] ** (2 - d) - big_r ** (2 - d)) / (a ** (2 - d) - big_r ** (2 - d))
        return out

    return GridFunction.from_function(fn, d, h, big_r, meta={"kind": "radial", "a": a, "r_D": a})


def ground_state_profile(big_r: float, d: int = 3, h: float = 0.25) -> GridFunction:
    """
    sin(pi |x| / R) / (pi |x| / R), the smooth Dirichlet ground state of B_R in three dimensions.

    Nodes past R keep the negative continuation so the spline of phi_N has no
    kink at the sphere; TiltSpec zeroes everything off U^N.
    """
    n = int(round(big_r / h))
    grid = GridFunction(d, h, big_r, np.zeros((2 * n + 1,) * d), nonnegative=False, meta={"kind": "ground-state"})
    u = np.pi * np.sqrt((grid.nodes() ** 2).sum(axis=1)) / big_r
    grid.values = np.sinc(u / np.pi).reshape(grid.values.shape)
    return grid
