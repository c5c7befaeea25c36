# occupation_lab/walks.py
"""
Continuous-time walks on Z^d.

Two engines share one stop-rule vocabulary:

* `simulate_srw_until` runs a single rate-1 simple random walk in vectorized
  chunks (jumps and holding times are drawn in blocks, the stopping index is
  located with array searches).
* `run_walkers` advances many walkers in lockstep, one jump per iteration,
  for the simple walk or any `ConductanceSpec`. Observers see every holding
  interval and may stop walkers early.

Holding intervals are reported as (site, holding time) in visit order. The
site where a walk stops carries no holding unless the walk stopped on its
time horizon.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import expm_multiply

from .errors import ConductanceError, StopRuleError, TruncationError
from .lattice import BoxArray, SiteIndex, as_sites, check_dimension, sup_distance, unit_vectors
from .stats import wilson_interval

logger = logging.getLogger("occupation-lab.walks")

STEP_CAP = 10 ** 9
KILL_FACTOR = 32
MAX_CHUNK = 1 << 16


class StopCause(str, Enum):
    HIT = "hit"
    EXIT = "exit"
    KILLED = "killed"
    TIME = "time"
    OBSERVER = "observer"


# integer codes used inside the engines; 0 means "still running"
CAUSE_CODES = {StopCause.HIT: 1, StopCause.EXIT: 2, StopCause.KILLED: 3, StopCause.TIME: 4, StopCause.OBSERVER: 5}
CAUSES = {code: cause for cause, code in CAUSE_CODES.items()}


def kill_radius_for(region_radius: int) -> int:
    return KILL_FACTOR * max(1, int(region_radius))


def kill_bias_bound(region_radius: int, kill_radius: int, d: int) -> float:
    """Upper bound on the probability of returning to B(0, r) after reaching sup-distance R_kill."""
    reach = (region_radius + 1) * math.sqrt(d)
    return min(1.0, (reach / kill_radius) ** (d - 2))


@dataclass(frozen=True)
class PathEvent:
    site: Tuple[int, ...]
    holding_time: float


@dataclass
class OccupationField:
    """Total holding time per site; support is lexicographically ordered."""
    support: np.ndarray
    values: np.ndarray

    @classmethod
    def empty(cls, d: int) -> "OccupationField":
        return cls(np.zeros((0, d), dtype=np.int64), np.zeros(0))

    @classmethod
    def from_events(cls, sites: np.ndarray, holding: np.ndarray, d: Optional[int] = None) -> "OccupationField":
        sites = np.asarray(sites, dtype=np.int64)
        if len(sites) == 0:
            return cls.empty(d or sites.shape[-1])
        support, inverse = np.unique(sites, axis=0, return_inverse=True)
        values = np.bincount(inverse.reshape(-1), weights=holding, minlength=len(support))
        return cls(support, values)

    @property
    def d(self) -> int:
        return self.support.shape[1]

    def __add__(self, other: "OccupationField") -> "OccupationField":
        return OccupationField.from_events(
            np.concatenate([self.support, other.support]),
            np.concatenate([self.values, other.values]),
            self.d,
        )

    def total(self) -> float:
        return math.fsum(self.values)

    def value_at(self, points) -> np.ndarray:
        if len(self.support) == 0:
            return np.zeros(len(np.atleast_2d(points)))
        pos = SiteIndex(self.support).lookup(points)
        out = np.zeros(len(pos))
        out[pos >= 0] = self.values[pos[pos >= 0]]
        return out

    def on_window(self, window) -> np.ndarray:
        """Values aligned with the lexicographic order of `window`."""
        return self.value_at(window.sites if isinstance(window, SiteIndex) else as_sites(window))

    def restrict(self, sites) -> "OccupationField":
        keep = SiteIndex(sites, self.d).contains(self.support) if len(self.support) else np.zeros(0, bool)
        return OccupationField(self.support[keep], self.values[keep])


def _index(sites) -> Optional[SiteIndex]:
    if sites is None or isinstance(sites, SiteIndex):
        return sites
    return SiteIndex(sites)


@dataclass
class StopRule:
    """
    When a walk stops.

    hit     stop on arrival in this set (H_K); with strict=True time 0 does not count
    exit    stop on arrival outside this set (T_K)
    horizon stop at this time; a holding in progress is cut
    kill    stop on arrival at sup-distance > kill_radius from kill_center

    Priority when several site conditions fire together: hit, exit, kill.
    A site condition and the horizon at the same instant resolve to the site condition.
    """
    hit: Optional[SiteIndex] = None
    exit: Optional[SiteIndex] = None
    horizon: Optional[float] = None
    kill_radius: Optional[int] = None
    kill_center: Optional[Tuple[int, ...]] = None
    strict: bool = False

    def __post_init__(self):
        self.hit = _index(self.hit)
        self.exit = _index(self.exit)
        if self.hit is None and self.exit is None and self.horizon is None and self.kill_radius is None:
            raise StopRuleError("stop rule has no stopping condition")
        if self.horizon is not None and (not np.isfinite(self.horizon) or self.horizon < 0):
            raise StopRuleError(f"time horizon must be finite and nonnegative, got {self.horizon}")
        if self.kill_radius is not None and self.kill_radius < 0:
            raise StopRuleError(f"kill radius must be nonnegative, got {self.kill_radius}")
        if self.hit is not None and len(self.hit) == 0:
            raise StopRuleError("hitting an empty set never happens")
        if self.hit is not None and self.exit is None and self.horizon is None and self.kill_radius is None:
            raise StopRuleError("a hitting rule needs a kill radius, exit set or horizon (the walk is transient)")
        if self.kill_radius is not None and self.kill_center is None:
            for index in (self.hit, self.exit):
                if index is not None:
                    self.kill_center = (0,) * index.d
                    break
        if self.kill_center is not None:
            self.kill_center = tuple(int(c) for c in self.kill_center)

    @classmethod
    def hitting(cls, K, kill_radius: Optional[int] = None, strict: bool = False, **kwargs) -> "StopRule":
        index = _index(K)
        if kill_radius is None and "exit" not in kwargs and "horizon" not in kwargs:
            kill_radius = kill_radius_for(index.radius) + int(np.abs(index.center).max())
        return cls(hit=index, kill_radius=kill_radius, strict=strict, **kwargs)

    @classmethod
    def exiting(cls, K, **kwargs) -> "StopRule":
        return cls(exit=_index(K), **kwargs)

    @classmethod
    def at_time(cls, T: float, **kwargs) -> "StopRule":
        return cls(horizon=float(T), **kwargs)

    @classmethod
    def killed(cls, radius: int, center=None, **kwargs) -> "StopRule":
        return cls(kill_radius=int(radius), kill_center=center, **kwargs)

    def classify(self, sites: np.ndarray, at_start: bool = False) -> np.ndarray:
        """Stop code per site (0 = keep going)."""
        codes = np.zeros(len(sites), dtype=np.int8)
        if self.kill_radius is not None:
            center = self.kill_center or (0,) * sites.shape[1]
            codes[sup_distance(sites, center) > self.kill_radius] = CAUSE_CODES[StopCause.KILLED]
        if self.exit is not None:
            codes[~self.exit.contains(sites)] = CAUSE_CODES[StopCause.EXIT]
        if self.hit is not None and not (at_start and self.strict):
            codes[self.hit.contains(sites)] = CAUSE_CODES[StopCause.HIT]
        return codes


@dataclass
class WalkResult:
    """One stopped trajectory."""
    start: np.ndarray
    final_site: np.ndarray
    cause: StopCause
    elapsed: float
    steps: int
    field: OccupationField
    sites: Optional[np.ndarray] = None
    holding: Optional[np.ndarray] = None
    window_values: Optional[np.ndarray] = None

    def events(self) -> List[PathEvent]:
        if self.sites is None:
            raise ValueError("path was not recorded")
        return [PathEvent(tuple(int(c) for c in s), float(h)) for s, h in zip(self.sites, self.holding)]

    def occupation_field(self) -> OccupationField:
        return self.field


def simulate_srw_until(start, stop: StopRule, rng: np.random.Generator, record_path: bool = True,
                       window: Optional[SiteIndex] = None, step_cap: int = STEP_CAP) -> WalkResult:
    """
    Run the rate-1 simple random walk from `start` until `stop` fires.

    Raises:
        TruncationError: if `step_cap` jumps happen first; `partial` holds the walk so far.
    """
    pos = np.asarray(start, dtype=np.int64).copy()
    d = check_dimension(len(pos))
    offsets = unit_vectors(d)
    window = _index(window)
    window_values = np.zeros(len(window)) if window is not None else None
    seq_parts: List[np.ndarray] = []
    hold_parts: List[np.ndarray] = []
    field_acc = OccupationField.empty(d)

    def record(held, holds):
        nonlocal field_acc
        keep = holds > 0
        held, holds = held[keep], holds[keep]
        if record_path:
            seq_parts.append(held)
            hold_parts.append(holds)
        else:
            field_acc = field_acc + OccupationField.from_events(held, holds, d)
        if window is not None and len(held):
            idx = window.lookup(held)
            np.add.at(window_values, idx[idx >= 0], holds[idx >= 0])

    def finish(final, cause, steps):
        if record_path:
            sites = np.concatenate(seq_parts) if seq_parts else np.zeros((0, d), dtype=np.int64)
            holding = np.concatenate(hold_parts) if hold_parts else np.zeros(0)
            occupation = OccupationField.from_events(sites, holding, d)
            elapsed = math.fsum(holding)
        else:
            sites = holding = None
            occupation = field_acc
            elapsed = occupation.total()
        return WalkResult(np.asarray(start, dtype=np.int64), np.asarray(final), cause, elapsed, steps,
                          occupation, sites, holding, window_values)

    code = stop.classify(pos[None, :], at_start=True)[0]
    if code:
        return finish(pos, CAUSES[int(code)], 0)
    if stop.horizon == 0:
        return finish(pos, StopCause.TIME, 0)

    t = 0.0
    steps = 0
    chunk = 64
    while steps < step_cap:
        n = min(chunk, step_cap - steps)
        dirs = rng.integers(0, 2 * d, size=n)
        holds = rng.standard_exponential(n)
        path = pos + np.cumsum(offsets[dirs], axis=0)
        held = np.vstack([pos[None, :], path[:-1]])
        ends = t + np.cumsum(holds)
        codes = stop.classify(path)
        fired = np.flatnonzero(codes)
        k_site = int(fired[0]) if len(fired) else n
        k_time = int(np.searchsorted(ends, stop.horizon, side="right")) if stop.horizon is not None else n
        if k_time < n and k_time <= k_site:
            previous = ends[k_time - 1] if k_time > 0 else t
            cut = holds[:k_time + 1].copy()
            cut[-1] = stop.horizon - previous
            record(held[:k_time + 1], cut)
            return finish(held[k_time], StopCause.TIME, steps + k_time)
        if k_site < n:
            record(held[:k_site + 1], holds[:k_site + 1])
            return finish(path[k_site], CAUSES[int(codes[k_site])], steps + k_site + 1)
        record(held, holds)
        pos = path[-1]
        t = float(ends[-1])
        steps += n
        chunk = min(2 * chunk, MAX_CHUNK)

    partial = finish(pos, None, steps)
    logger.warning(f"Walk from {tuple(partial.start)} truncated after {steps} steps")
    raise TruncationError(f"stop rule did not fire within {step_cap} steps", partial=partial)


# ---- Conductances ----

class ConductanceSpec:
    """
    Nearest-neighbour conductances mu_{x,x+e} and a speed measure nu_x.

    `weights(sites)` returns an (n, 2d) array in `unit_vectors` order;
    `speed(sites)` returns (n,). Zero weights mean the edge is absent.
    """
    name = "conductances"

    def __init__(self, d: int, bounds: Optional[Tuple[float, float, float, float]] = None):
        self.d = check_dimension(d)
        self.bounds = bounds

    def weights(self, sites: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def speed(self, sites: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def validate(self, region, atol: float = 1e-12) -> None:
        """Check positivity, symmetry and declared bounds on `region`."""
        sites = region.sites if isinstance(region, SiteIndex) else as_sites(region, self.d)
        w = self.weights(sites)
        nu = self.speed(sites)
        if np.any(w < 0):
            raise ConductanceError(f"{self.name}: negative conductance on the region")
        if np.any(w.sum(axis=1) <= 0):
            raise ConductanceError(f"{self.name}: site with no positive conductance")
        if np.any(nu <= 0):
            raise ConductanceError(f"{self.name}: nonpositive speed measure")
        offsets = unit_vectors(self.d)
        for k in range(0, 2 * self.d, 2):
            forward = w[:, k]
            backward = self.weights(sites + offsets[k])[:, k + 1]
            if not np.allclose(forward, backward, rtol=0, atol=atol):
                raise ConductanceError(f"{self.name}: conductances are not symmetric along axis {k // 2 + 1}")
        if self.bounds is not None:
            lam, big_lam, c_low, c_high = self.bounds
            positive = w[w > 0]
            if positive.min() < lam - atol or positive.max() > big_lam + atol:
                raise ConductanceError(f"{self.name}: conductances leave [{lam}, {big_lam}]")
            if nu.min() < c_low - atol or nu.max() > c_high + atol:
                raise ConductanceError(f"{self.name}: speed measure leaves [{c_low}, {c_high}]")


class ConstantConductances(ConductanceSpec):
    def __init__(self, d: int, mu: Optional[float] = None, nu: float = 1.0):
        mu = 1.0 / (2 * d) if mu is None else float(mu)
        if mu <= 0 or nu <= 0:
            raise ConductanceError(f"constant conductances need mu > 0 and nu > 0, got {mu}, {nu}")
        super().__init__(d, bounds=(mu, mu, nu, nu))
        self.mu = mu
        self.nu = float(nu)
        self.name = f"constant(mu={mu:g}, nu={nu:g})"

    def weights(self, sites):
        return np.full((len(sites), 2 * self.d), self.mu)

    def speed(self, sites):
        return np.full(len(sites), self.nu)


class ProductConductances(ConductanceSpec):
    """mu_{x,y} = (1/2d) phi(x) phi(y), nu_x = phi(x)^2 for a nonnegative lattice function phi."""

    def __init__(self, phi: BoxArray, name: str = "product"):
        super().__init__(phi.d)
        if np.any(phi.values < 0):
            raise ConductanceError("product conductances need a nonnegative function")
        self.phi = phi
        self.name = name

    def weights(self, sites):
        here = self.phi.at(sites)
        offsets = unit_vectors(self.d)
        return np.stack([here * self.phi.at(sites + e) for e in offsets], axis=1) / (2 * self.d)

    def speed(self, sites):
        return self.phi.at(sites) ** 2


def generator_matrix(spec: Optional[ConductanceSpec], sites, killed: bool = False) -> sparse.csr_matrix:
    """
    Generator of the walk restricted to `sites`.

    Off-diagonal rates are mu_{x,y}/nu_x. With killed=False edges leaving the
    patch are dropped (reflecting truncation); with killed=True they count
    towards the diagonal, so rows sum to minus the killing rate.
    """
    index = SiteIndex(sites)
    d = index.d
    spec = spec or ConstantConductances(d)
    w = spec.weights(index.sites)
    nu = spec.speed(index.sites)
    n = len(index)
    rows, cols, vals = [], [], []
    inside_rate = np.zeros(n)
    for k, e in enumerate(unit_vectors(d)):
        nb = index.lookup(index.sites + e)
        ok = (nb >= 0) & (w[:, k] > 0)
        rate = w[ok, k] / nu[ok]
        rows.append(np.flatnonzero(ok))
        cols.append(nb[ok])
        vals.append(rate)
        inside_rate[ok] += rate
    diagonal = w.sum(axis=1) / nu if killed else inside_rate
    Q = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return (Q.tocsr() - sparse.diags(diagonal)).tocsr()


def exact_exit_tail(spec: Optional[ConductanceSpec], start, region, t: float) -> float:
    """P_start[T_region > t] from the killed generator's matrix exponential."""
    index = SiteIndex(region)
    pos = int(index.lookup(start)[0])
    if pos < 0:
        return 0.0
    if t <= 0:
        return 1.0
    Q = generator_matrix(spec, index.sites, killed=True)
    survival = expm_multiply(Q * float(t), np.ones(len(index)))
    return float(np.clip(survival[pos], 0.0, 1.0))


# ---- Lockstep batch engine ----

class WalkObserver:
    """Hook called on every holding interval of a batch; set `finished[i]` to stop walker i."""
    finished: Optional[np.ndarray] = None

    def start(self, n_walkers: int) -> None:
        pass

    def on_hold(self, ids: np.ndarray, sites: np.ndarray, t0: np.ndarray, hold: np.ndarray) -> None:
        pass


class PathRecorder(WalkObserver):
    def start(self, n_walkers):
        self._ids, self._sites, self._holds, self._t0 = [], [], [], []

    def on_hold(self, ids, sites, t0, hold):
        self._ids.append(ids)
        self._sites.append(sites)
        self._holds.append(hold)
        self._t0.append(t0)

    def paths(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Per-walker (sites, holding) in visit order."""
        if not self._ids:
            return []
        ids = np.concatenate(self._ids)
        order = np.argsort(ids, kind="stable")
        ids = ids[order]
        sites = np.concatenate(self._sites)[order]
        holds = np.concatenate(self._holds)[order]
        n = int(ids.max()) + 1
        bounds = np.searchsorted(ids, np.arange(n + 1))
        return [(sites[bounds[i]:bounds[i + 1]], holds[bounds[i]:bounds[i + 1]]) for i in range(n)]


class WindowOccupation(WalkObserver):
    """Dense (walkers x window sites) occupation accumulator."""

    def __init__(self, window):
        self.index = _index(window)

    def start(self, n_walkers):
        self.fields = np.zeros((n_walkers, len(self.index)))

    def on_hold(self, ids, sites, t0, hold):
        pos = self.index.lookup(sites)
        ok = pos >= 0
        if ok.any():
            np.add.at(self.fields, (ids[ok], pos[ok]), hold[ok])


@dataclass
class BatchResult:
    starts: np.ndarray
    final_sites: np.ndarray
    codes: np.ndarray
    elapsed: np.ndarray
    steps: np.ndarray

    def __len__(self) -> int:
        return len(self.codes)

    def causes(self) -> List[Optional[StopCause]]:
        return [CAUSES.get(int(c)) for c in self.codes]

    def mask(self, cause: StopCause) -> np.ndarray:
        return self.codes == CAUSE_CODES[cause]


def _draw_moves(spec: Optional[ConductanceSpec], sites: np.ndarray, rng: np.random.Generator, d: int):
    m = len(sites)
    if spec is None:
        return rng.integers(0, 2 * d, size=m), rng.standard_exponential(m)
    w = spec.weights(sites)
    cum = np.cumsum(w, axis=1)
    total = cum[:, -1]
    if np.any(total <= 0):
        raise ConductanceError(f"{spec.name}: walker reached a site with no positive conductance")
    u = rng.random(m) * total
    dirs = (cum <= u[:, None]).sum(axis=1)
    last_positive = 2 * d - 1 - np.argmax(w[:, ::-1] > 0, axis=1)
    dirs = np.minimum(dirs, last_positive)
    hold = rng.standard_exponential(m) * spec.speed(sites) / total
    return dirs, hold


def run_walkers(starts, stop: StopRule, rng: np.random.Generator, spec: Optional[ConductanceSpec] = None,
                observers: Sequence[WalkObserver] = (), step_cap: int = STEP_CAP,
                start_times: Optional[np.ndarray] = None) -> BatchResult:
    """
    Advance independent walkers in lockstep until each one stops.

    spec=None is the rate-1 simple random walk. Holding times with mean
    nu_x/M_x and jump probabilities mu_{x,y}/M_x otherwise. The horizon of
    `stop` is an absolute time; `start_times` lets a batch continue earlier walks.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=np.int64))
    n, d = starts.shape
    check_dimension(d)
    offsets = unit_vectors(d)
    pos = starts.copy()
    t = np.zeros(n) if start_times is None else np.asarray(start_times, dtype=float).copy()
    codes = np.zeros(n, dtype=np.int8)
    steps = np.zeros(n, dtype=np.int64)
    for obs in observers:
        obs.start(n)

    codes[:] = stop.classify(pos, at_start=True)
    if stop.horizon is not None:
        codes[(codes == 0) & (t >= stop.horizon)] = CAUSE_CODES[StopCause.TIME]
    alive = np.flatnonzero(codes == 0)
    while len(alive):
        p = pos[alive]
        dirs, hold = _draw_moves(spec, p, rng, d)
        timed = np.zeros(len(alive), dtype=bool)
        if stop.horizon is not None:
            timed = t[alive] + hold > stop.horizon
            hold[timed] = stop.horizon - t[alive][timed]
        positive = hold > 0
        for obs in observers:
            obs.on_hold(alive[positive], p[positive], t[alive][positive], hold[positive])
        t[alive] += hold
        t[alive[timed]] = stop.horizon if stop.horizon is not None else t[alive[timed]]
        codes[alive[timed]] = CAUSE_CODES[StopCause.TIME]
        halted = timed.copy()
        for obs in observers:
            if obs.finished is not None:
                by_obs = obs.finished[alive] & ~halted
                codes[alive[by_obs]] = CAUSE_CODES[StopCause.OBSERVER]
                halted |= by_obs
        movers = alive[~halted]
        new = pos[movers] + offsets[dirs[~halted]]
        pos[movers] = new
        steps[movers] += 1
        fired = stop.classify(new)
        codes[movers] = fired
        if stop.horizon is not None:
            at_horizon = (fired == 0) & (t[movers] >= stop.horizon)
            codes[movers[at_horizon]] = CAUSE_CODES[StopCause.TIME]
        alive = movers[codes[movers] == 0]
        if len(alive) and steps[alive].max() >= step_cap:
            partial = BatchResult(starts, pos.copy(), codes.copy(), t.copy(), steps.copy())
            logger.warning(f"Batch of {n} walkers truncated with {len(alive)} still running")
            raise TruncationError(f"{len(alive)} walkers exceeded {step_cap} steps", partial=partial)
    return BatchResult(starts, pos, codes, t, steps)


def simulate_conductance_walk(spec: ConductanceSpec, start, stop: StopRule, rng: np.random.Generator,
                              window: Optional[SiteIndex] = None, step_cap: int = STEP_CAP) -> WalkResult:
    """Single conductance walk with its full path."""
    recorder = PathRecorder()
    observers: List[WalkObserver] = [recorder]
    occupation = None
    if window is not None:
        occupation = WindowOccupation(window)
        observers.append(occupation)
    try:
        batch = run_walkers([start], stop, rng, spec=spec, observers=observers, step_cap=step_cap)
    except TruncationError as e:
        e.partial = _single_result(start, e.partial, recorder, occupation)
        raise
    return _single_result(start, batch, recorder, occupation)


def _single_result(start, batch: BatchResult, recorder: PathRecorder, occupation) -> WalkResult:
    d = batch.starts.shape[1]
    paths = recorder.paths()
    sites, holding = paths[0] if paths else (np.zeros((0, d), dtype=np.int64), np.zeros(0))
    return WalkResult(
        start=np.asarray(start, dtype=np.int64),
        final_site=batch.final_sites[0],
        cause=CAUSES.get(int(batch.codes[0])),
        elapsed=math.fsum(holding),
        steps=int(batch.steps[0]),
        field=OccupationField.from_events(sites, holding, d),
        sites=sites,
        holding=holding,
        window_values=occupation.fields[0] if occupation is not None else None,
    )


# ---- Exit-time tails ----

@dataclass
class ExitTailEstimate:
    estimate: float
    ci_low: float
    ci_high: float
    worst_start: Tuple[int, ...]
    replicas: int
    threshold: float
    per_start: dict = field(default_factory=dict)


def empirical_exit_tail(spec: Optional[ConductanceSpec], start_set, region, threshold: float,
                        replicas: int, rng: np.random.Generator) -> ExitTailEstimate:
    """
    Worst case over start sites of P_x[T_region > threshold], with a Wilson 95% interval.
    """
    if replicas <= 0:
        raise ValueError("empirical_exit_tail needs at least one replica")
    starts = as_sites(start_set)
    stop = StopRule(exit=SiteIndex(region), horizon=float(threshold))
    per_start = {}
    worst = None
    for x in starts:
        batch = run_walkers(np.repeat(x[None, :], replicas, axis=0), stop, rng, spec=spec)
        survived = int(batch.mask(StopCause.TIME).sum())
        p, lo, hi = wilson_interval(survived, replicas)
        per_start[tuple(int(c) for c in x)] = (p, lo, hi)
        if worst is None or p > worst[1][0]:
            worst = (tuple(int(c) for c in x), (p, lo, hi))
    logger.info(f"Exit tail over {len(starts)} starts at threshold {threshold:g}: worst {worst[1][0]:.4g}")
    return ExitTailEstimate(worst[1][0], worst[1][1], worst[1][2], worst[0], replicas, float(threshold), per_start)
