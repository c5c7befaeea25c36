# occupation_lab/potential.py
"""
Discrete potential theory of the simple random walk and of walks among
conductances: Green function, equilibrium measure, capacity, last-exit
hitting probabilities and the variational capacity.

Every harmonic solve lives on a sup-norm box B(c, R). The walk is absorbed on
the target set and the values just outside the box are taken from the
far-field Green asymptotic c_g |z|^{2-d}, which is much more accurate than a
zero boundary at the same R. The unknown capacity in the far-field value is
eliminated by superposing two solves.
"""
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.integrate import quad
from scipy.sparse.linalg import cg
from scipy.special import gamma, ive

from .errors import AccuracyError, ConvergenceError, LabError, TiltError, TrialFunctionError
from .lattice import Box, BoxArray, SiteIndex, as_sites, check_dimension, enumerate_box, internal_boundary, unit_vectors
from .walks import ConductanceSpec, StopRule, WindowOccupation, kill_bias_bound, kill_radius_for, run_walkers

logger = logging.getLogger("occupation-lab.potential")

MAX_UNKNOWNS = 8_000_000
CG_RTOL = 1e-10
MIN_TRUNCATION = 8
RADIUS_FACTOR = 8


def green_constant(d: int) -> float:
    """c_g = (d/2) Gamma(d/2 - 1) pi^{-d/2}, so g(0, z) ~ c_g |z|^{2-d}."""
    check_dimension(d)
    return (d / 2) * gamma(d / 2 - 1) * math.pi ** (-d / 2)


def lattice_green_series(z, d: Optional[int] = None) -> float:
    """
    g(0, z) from the coordinate-wise Bessel representation
    g(0, z) = int_0^inf prod_i e^{-t/d} I_{z_i}(t/d) dt.
    """
    z = np.abs(np.atleast_1d(np.asarray(z, dtype=np.int64)))
    d = check_dimension(d or len(z))

    def integrand(t):
        return float(np.prod([ive(k, t / d) for k in z]))

    split = max(10.0, float((z ** 2).sum()))
    total = quad(integrand, 0.0, split, limit=400, epsabs=1e-14, epsrel=1e-12)[0]
    lo = split
    for _ in range(6):
        hi = lo * 10
        total += quad(integrand, lo, hi, limit=400, epsabs=1e-14, epsrel=1e-12)[0]
        lo = hi
    # prod ive ~ (2 pi t/d)^{-d/2} far out
    total += (d / (2 * math.pi)) ** (d / 2) * lo ** (1 - d / 2) / (d / 2 - 1)
    return total


def truncation_for_accuracy(accuracy: float, d: int) -> int:
    """Box radius whose far-field boundary error R^{-d} is below `accuracy`."""
    if accuracy <= 0:
        raise ValueError(f"accuracy must be positive, got {accuracy}")
    radius = max(MIN_TRUNCATION, int(math.ceil(accuracy ** (-1.0 / d))))
    if (2 * radius + 1) ** d > MAX_UNKNOWNS:
        raise AccuracyError(
            f"accuracy {accuracy:g} needs truncation radius {radius}, beyond the memory cap of {MAX_UNKNOWNS} unknowns",
            required_radius=radius,
        )
    return radius


class _BoxSystem:
    """Weighted graph Laplacian of B(center, R) with the far-field boundary layer."""

    def __init__(self, center, radius: int, d: int, conductances: Optional[ConductanceSpec] = None):
        side = 2 * radius + 1
        if side ** d > MAX_UNKNOWNS:
            raise AccuracyError(
                f"truncation radius {radius} exceeds the memory cap of {MAX_UNKNOWNS} unknowns",
                required_radius=radius,
            )
        self.box = Box(tuple(int(c) for c in center), radius)
        self.d = d
        self.sites = enumerate_box(self.box)
        size = len(self.sites)
        weights = None if conductances is None else conductances.weights(self.sites)
        grid = np.arange(size).reshape((side,) * d)
        rows, cols, vals = [], [], []
        for a in range(d):
            head = [slice(None)] * d
            head[a] = slice(0, -1)
            src = grid[tuple(head)].ravel()
            dst = src + side ** (d - 1 - a)
            rows.append(src)
            cols.append(dst)
            vals.append(np.full(len(src), 1.0 / (2 * d)) if weights is None else weights[src, 2 * a])
        adj = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                shape=(size, size)).tocsr()
        self.adj = (adj + adj.T).tocsr()
        self.mass = np.ones(size) if weights is None else weights.sum(axis=1)
        # far-field boundary term: sum over edges leaving the box of mu * c_g |y - c|^{2-d}
        cg_const = green_constant(d)
        center_arr = np.asarray(center, dtype=float)
        self.far_field = np.zeros(size)
        for k, e in enumerate(unit_vectors(d)):
            axis = k // 2
            edge = side - 1 if e[axis] > 0 else 0
            face = [slice(None)] * d
            face[axis] = edge
            idx = grid[tuple(face)].ravel()
            outside = (self.sites[idx] + e).astype(float)
            dist = np.sqrt(((outside - center_arr) ** 2).sum(axis=1))
            w = 1.0 / (2 * d) if weights is None else weights[idx, k]
            self.far_field[idx] += w * cg_const * dist ** (2 - d)

    def operator(self, unknown: np.ndarray) -> sparse.csr_matrix:
        full = (sparse.diags(self.mass) - self.adj).tocsr()
        return full[unknown][:, unknown]


def _solve_spd(A: sparse.csr_matrix, b: np.ndarray, label: str) -> np.ndarray:
    if not np.any(b):
        return np.zeros_like(b)
    precond = sparse.diags(1.0 / A.diagonal())
    x, info = cg(A, b, rtol=CG_RTOL, atol=0.0, maxiter=20 * A.shape[0], M=precond)
    if info != 0:
        residual = float(np.linalg.norm(A @ x - b) / np.linalg.norm(b))
        raise ConvergenceError(f"{label}: conjugate gradient stopped with relative residual {residual:.3g}",
                               residual=residual)
    return x


@lru_cache(maxsize=16)
def _green_box(d: int, radius: int) -> np.ndarray:
    """g(0, .) on B(0, R) as a dense (2R+1)^d array."""
    system = _BoxSystem((0,) * d, radius, d)
    unknown = np.ones(len(system.sites), dtype=bool)
    rhs = system.far_field.copy()
    rhs[len(system.sites) // 2] += 1.0
    values = _solve_spd(system.operator(unknown), rhs, f"green solve R={radius}")
    logger.debug(f"Green solve d={d} R={radius}: g(0,0)={values[len(values) // 2]:.8f}")
    return values.reshape((2 * radius + 1,) * d)


def _green_values(z: np.ndarray, accuracy: float) -> Tuple[np.ndarray, np.ndarray]:
    """g(0, z) for rows of z; returns values and a boolean mask of far-field rows."""
    z = np.atleast_2d(np.asarray(z, dtype=np.int64))
    d = check_dimension(z.shape[1])
    radius = truncation_for_accuracy(accuracy, d)
    # lattice symmetries: sign flips and coordinate permutations
    canonical = -np.sort(-np.abs(z), axis=1)
    far = canonical[:, 0] > radius
    out = np.empty(len(z))
    if (~far).any():
        table = _green_box(d, radius)
        out[~far] = table[tuple((canonical[~far] + radius).T)]
    if far.any():
        dist = np.sqrt((canonical[far].astype(float) ** 2).sum(axis=1))
        out[far] = green_constant(d) * dist ** (2 - d)
    return out, far


def green_function(x, y, accuracy: float = 1e-4) -> float:
    """g(x, y) within `accuracy`; exactly symmetric in x and y."""
    diff = np.asarray(y, dtype=np.int64) - np.asarray(x, dtype=np.int64)
    return float(_green_values(diff[None, :], accuracy)[0][0])


@dataclass
class GreenTable:
    pairs: np.ndarray
    values: np.ndarray
    method: str
    error_bound: float

    def as_rows(self) -> List[dict]:
        return [
            {"x": tuple(int(c) for c in p[0]), "y": tuple(int(c) for c in p[1]), "g": float(v)}
            for p, v in zip(self.pairs, self.values)
        ]


def green_table(pairs, accuracy: float = 1e-4, method: str = "solve", rng: Optional[np.random.Generator] = None,
                replicas: int = 10_000) -> GreenTable:
    """
    g for many (x, y) pairs.

    method "solve" uses one truncated solve, "series" the Bessel integral,
    "monte-carlo" the mean occupation of killed walks (needs rng).
    """
    pairs = np.asarray(pairs, dtype=np.int64)
    if pairs.ndim != 3 or pairs.shape[1] != 2:
        raise ValueError("pairs must have shape (n, 2, d)")
    d = check_dimension(pairs.shape[2])
    diffs = pairs[:, 1] - pairs[:, 0]
    if method == "solve":
        values, _ = _green_values(diffs, accuracy)
        bound = float(truncation_for_accuracy(accuracy, d) ** (-d))
    elif method == "series":
        values = np.array([lattice_green_series(z, d) for z in diffs])
        bound = 1e-8
    elif method == "monte-carlo":
        if rng is None:
            raise ValueError("monte-carlo Green estimates need a random generator")
        values, bound = _green_monte_carlo(diffs, rng, replicas)
    else:
        raise ValueError(f"unknown Green method {method!r}")
    logger.info(f"Green table: {len(pairs)} pairs by {method}, error bound {bound:.2g}")
    return GreenTable(pairs, values, method, bound)


def _green_monte_carlo(diffs: np.ndarray, rng: np.random.Generator, replicas: int) -> Tuple[np.ndarray, float]:
    d = diffs.shape[1]
    targets = as_sites(diffs, d)
    reach = int(np.abs(targets).max())
    kill = kill_radius_for(reach)
    occupation = WindowOccupation(targets)
    run_walkers(np.zeros((replicas, d), dtype=np.int64), StopRule.killed(kill, (0,) * d), rng,
                observers=[occupation])
    means = occupation.fields.mean(axis=0)
    stderr = occupation.fields.std(axis=0, ddof=1) / math.sqrt(replicas)
    index = SiteIndex(targets)
    values = means[index.lookup(diffs)]
    bound = float(3 * stderr.max() + kill_bias_bound(reach, kill, d) * values.max())
    return values, bound


# ---- Equilibrium measure and capacity ----

@dataclass
class EquilibriumMeasure:
    sites: np.ndarray
    mass: np.ndarray
    capacity: float
    truncation_radius: int
    error_bound: float

    @property
    def support(self) -> np.ndarray:
        return self.sites[self.mass > 0]

    def normalized(self) -> np.ndarray:
        return self.mass / self.capacity

    def at(self, points) -> np.ndarray:
        pos = SiteIndex(self.sites).lookup(points)
        out = np.zeros(len(pos))
        out[pos >= 0] = self.mass[pos[pos >= 0]]
        return out


@dataclass
class _EscapeSolution:
    mass: np.ndarray
    capacity: float


def _escape_solve(K: SiteIndex, radius: int, conductances: Optional[ConductanceSpec] = None,
                  mass_scale: float = 1.0) -> _EscapeSolution:
    """
    Equilibrium measure of K on B(center(K), radius).

    h0 is 1 on K and 0 beyond the box; h1 is 0 on K and c_g|z - c|^{2-d} beyond
    the box. The hitting probability is h0 + a h1 with a = cap/mass_scale,
    and cap = cap0 - a kappa closes the system.
    """
    system = _BoxSystem(K.center, radius, K.d, conductances)
    in_K = K.contains(system.sites)
    unknown = ~in_K
    A = system.operator(unknown)
    coupling = system.adj[unknown][:, in_K]
    h0 = _solve_spd(A, coupling @ np.ones(in_K.sum()), f"escape solve R={radius}")
    h1 = _solve_spd(A, system.far_field[unknown], f"far-field solve R={radius}")
    back = coupling.T.tocsr()
    e0 = back @ (1.0 - h0)
    e1 = back @ h1
    cap0 = math.fsum(e0)
    kappa = math.fsum(e1)
    capacity = cap0 / (1.0 + kappa / mass_scale)
    mass = np.clip(e0 - (capacity / mass_scale) * e1, 0.0, None)
    return _EscapeSolution(mass=mass, capacity=float(mass.sum()))


_EQUILIBRIUM_CACHE = {}


def equilibrium_measure(K, accuracy: float = 1e-4, radius_factor: int = RADIUS_FACTOR) -> EquilibriumMeasure:
    """
    e_K(x) = P_x[no return to K] on K, with relative accuracy `accuracy` on cap(K).

    The truncation radius starts at radius_factor * radius(K) and grows by half
    until two successive capacities agree to `accuracy`.
    """
    index = K if isinstance(K, SiteIndex) else SiteIndex(K)
    if len(index) == 0:
        raise LabError("equilibrium measure of the empty set is undefined")
    key = (index.key(), float(accuracy), int(radius_factor))
    if key in _EQUILIBRIUM_CACHE:
        return _EQUILIBRIUM_CACHE[key]
    outer = max(MIN_TRUNCATION, radius_factor * max(1, index.radius))
    inner = max(index.radius + 2, outer // 2)
    coarse = _escape_solve(index, inner)
    while True:
        fine = _escape_solve(index, outer)
        error = abs(fine.capacity - coarse.capacity)
        logger.debug(f"cap R={outer}: {fine.capacity:.8f} (change {error:.2e})")
        if error <= accuracy * fine.capacity:
            break
        coarse = fine
        outer = int(math.ceil(1.5 * outer))
        if (2 * outer + 1) ** index.d > MAX_UNKNOWNS:
            raise AccuracyError(
                f"capacity accuracy {accuracy:g} needs truncation radius {outer}, beyond the memory cap",
                required_radius=outer,
            )
    result = EquilibriumMeasure(index.sites, fine.mass, fine.capacity, outer, error)
    _EQUILIBRIUM_CACHE[key] = result
    logger.info(f"Capacity of {len(index)} sites: {result.capacity:.6f} (R={outer}, error {error:.2e})")
    return result


def capacity(K, accuracy: float = 1e-4) -> float:
    return equilibrium_measure(K, accuracy).capacity


def last_exit_hit_prob(x, A, accuracy: float = 1e-4) -> float:
    """P_x[H_A < inf] = sum_y g(x, y) e_A(y)."""
    eq = equilibrium_measure(A, accuracy)
    support = eq.sites[eq.mass > 0]
    g, _ = _green_values(support - np.asarray(x, dtype=np.int64), accuracy)
    return float(np.dot(g, eq.mass[eq.mass > 0]))


def hit_probabilities(points, A, accuracy: float = 1e-4) -> np.ndarray:
    """Vectorized last_exit_hit_prob over many starting points."""
    eq = equilibrium_measure(A, accuracy)
    keep = eq.mass > 0
    support, mass = eq.sites[keep], eq.mass[keep]
    points = np.atleast_2d(np.asarray(points, dtype=np.int64))
    out = np.empty(len(points))
    for i, x in enumerate(points):
        out[i] = np.dot(_green_values(support - x, accuracy)[0], mass)
    return np.clip(out, 0.0, 1.0)


def box_capacity_profile(radii: Sequence[int], d: int = 3, accuracy: float = 1e-3,
                         radius_factor: int = 4) -> List[dict]:
    """cap(B(0, n)) and n * min over the internal boundary of e_{B(0,n)} for each n."""
    rows = []
    for n in radii:
        eq = equilibrium_measure(enumerate_box(Box.centered(int(n), d)), accuracy, radius_factor)
        boundary = SiteIndex(eq.sites).lookup(internal_boundary(eq.sites))
        rows.append({
            "radius": int(n),
            "capacity": eq.capacity,
            "min_boundary_mass_times_radius": float(eq.mass[boundary].min() * max(1, n)),
            "truncation_radius": eq.truncation_radius,
        })
    return rows


# ---- Variational capacity ----

def indicator_trial(K, margin: int = 1) -> BoxArray:
    index = SiteIndex(K)
    box = Box(tuple(index.center), index.radius + margin)
    return BoxArray.from_sites(index.sites, 1.0, box)


def green_trial(center, radius: int, accuracy: float = 1e-4) -> BoxArray:
    """(g(x,c) - m)_+ / (g(0,0) - m) on B(c, radius), m the largest value on the outer face."""
    center = np.asarray(center, dtype=np.int64)
    d = len(center)
    box = Box(tuple(center), radius)
    sites = box.sites()
    g, _ = _green_values(sites - center, accuracy)
    on_face = np.abs(sites - center).max(axis=1) == radius
    floor = g[on_face].max()
    top = g[np.all(sites == center, axis=1)][0]
    values = np.clip((g - floor) / (top - floor), 0.0, 1.0)
    return BoxArray.from_sites(sites, values, box)


def capacity_variational(K, trials: Sequence[BoxArray], atol: float = 1e-12) -> float:
    """Minimum Dirichlet energy over trial functions that equal 1 on K."""
    index = SiteIndex(K)
    if not trials:
        raise TrialFunctionError("variational capacity needs at least one trial function")
    best = math.inf
    for i, trial in enumerate(trials):
        if not np.allclose(trial.at(index.sites), 1.0, rtol=0, atol=atol):
            raise TrialFunctionError(f"trial function {i} does not equal 1 on K")
        best = min(best, trial.dirichlet_energy())
    return best


# ---- Tilted potential theory ----

def periodized(values_at, x0, patch_radius: int):
    """phi^per(x) = phi(x0 + wrap(x - x0)), period 2 rho + 3, agreeing with phi on B(x0, rho + 1)."""
    x0 = np.asarray(x0, dtype=np.int64)
    period = 2 * patch_radius + 3

    def phi_per(points):
        rel = np.asarray(points, dtype=np.int64) - x0
        wrapped = np.mod(rel + patch_radius + 1, period) - (patch_radius + 1)
        return values_at(x0 + wrapped)

    return phi_per


class PeriodizedConductances(ConductanceSpec):
    """mu_{x,y} = (1/2d) phi^per(x) phi^per(y), nu_x = phi^per(x)^2."""

    def __init__(self, phi_per, d: int):
        super().__init__(d)
        self.phi_per = phi_per
        self.name = "periodized tilt"

    def weights(self, sites):
        here = self.phi_per(sites)
        return np.stack([here * self.phi_per(sites + e) for e in unit_vectors(self.d)], axis=1) / (2 * self.d)

    def speed(self, sites):
        return self.phi_per(sites) ** 2


@dataclass
class TiltedEquilibrium:
    sites: np.ndarray
    mass: np.ndarray
    capacity: float
    escape: np.ndarray
    natural_mass: np.ndarray
    phi_x0: float
    srw_capacity: float
    capacity_gap: float
    relative_gap: float
    normalized_sup_ratio: float
    truncation_radius: int
    details: dict = field(default_factory=dict)

    def normalized(self) -> np.ndarray:
        return self.mass / self.capacity


def tilted_equilibrium(K, tilt, x0, patch_radius: int, accuracy: float = 1e-3,
                       radius_factor: int = RADIUS_FACTOR) -> TiltedEquilibrium:
    """
    Equilibrium measure of K under the periodized tilt conductances, compared
    with phi_N(x0)^2 times the simple-walk equilibrium measure.

    `tilt` needs `phi_n(points)` and `d`.
    """
    index = K if isinstance(K, SiteIndex) else SiteIndex(K)
    x0 = np.asarray(x0, dtype=np.int64)
    patch = enumerate_box(Box(tuple(x0), patch_radius + 1))
    if not SiteIndex(patch).contains(index.sites).all():
        raise TiltError(f"K must lie inside the periodization patch B(x0, {patch_radius + 1})")
    patch_values = tilt.phi_n(patch)
    if np.any(patch_values <= 0):
        raise TiltError("tilt is not strictly positive on the periodization patch")
    phi_per = periodized(tilt.phi_n, x0, patch_radius)
    conductances = PeriodizedConductances(phi_per, tilt.d)
    mass_scale = float(np.mean(patch_values ** 2))

    srw = equilibrium_measure(index, accuracy, radius_factor)
    radius = srw.truncation_radius
    tilted = _escape_solve(index, radius, conductances, mass_scale)
    natural = conductances.weights(index.sites).sum(axis=1)
    phi_x0 = float(tilt.phi_n(x0[None, :])[0])
    scaled = phi_x0 ** 2 * srw.capacity
    gap = abs(scaled - tilted.capacity)
    support = srw.mass > 0
    ratio = (tilted.mass[support] / tilted.capacity) / (srw.mass[support] / srw.capacity)
    result = TiltedEquilibrium(
        sites=index.sites,
        mass=tilted.mass,
        capacity=tilted.capacity,
        escape=tilted.mass / natural,
        natural_mass=natural,
        phi_x0=phi_x0,
        srw_capacity=srw.capacity,
        capacity_gap=gap,
        relative_gap=gap / scaled,
        normalized_sup_ratio=float(np.abs(ratio - 1.0).max()),
        truncation_radius=radius,
        details={"mass_scale": mass_scale, "patch_radius": int(patch_radius)},
    )
    logger.info(
        f"Tilted capacity {result.capacity:.6f} vs phi^2 cap {scaled:.6f} "
        f"(relative gap {result.relative_gap:.3g}, sup ratio {result.normalized_sup_ratio:.3g})"
    )
    return result
