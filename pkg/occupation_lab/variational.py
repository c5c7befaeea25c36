# occupation_lab/variational.py
"""
Grid solver for the constrained Dirichlet problem

    I_{D,r}(nu) = min (1/2d) ∫ |∇phi|²  subject to  mean_D theta(phi²) >= nu,

over functions vanishing outside the euclidean ball B_r, and the
quasi-minimizer built from its solution.

Discretisation: nodes x = (i - n) h on a cube, unknowns at nodes with
|x| < r. The energy is h^{d-2}/(2d) times the sum over grid edges of squared
differences, which is (1/2d) ∫ |∇phi|² to second order; the constraint is the
plain average of theta(phi²) over the nodes of D.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.interpolate import PchipInterpolator, RegularGridInterpolator
from scipy.ndimage import map_coordinates, uniform_filter
from scipy.optimize import Bounds, brentq, minimize
from scipy.sparse.linalg import factorized

from .errors import ConvergenceError, InfeasibleLevelError, LatticeError, ThetaModelError
from .lattice import SHAPES, check_dimension, circumradius, continuum_contains, continuum_distance
from .potential import green_function
from .rng import replica_map

logger = logging.getLogger("occupation-lab.variational")

GRID_FORMAT = "occupation-lab/grid-function/1"
MAX_OUTER = 40
EIGEN_MAX_ITER = 5000


# ---- Grid functions ----

class GridFunction:
    """
    Values on the nodes x = (i - n) h, i = 0..2n, of [-r, r]^d; zero at nodes with |x| >= r.
    """

    def __init__(self, d: int, h: float, radius: float, values: np.ndarray, nonnegative: bool = True,
                 meta: Optional[Dict[str, Any]] = None):
        self.d = check_dimension(d)
        if h <= 0 or radius <= 0:
            raise LatticeError(f"grid spacing and radius must be positive, got h={h}, r={radius}")
        self.h = float(h)
        self.radius = float(radius)
        if abs(radius / h - round(radius / h)) > 1e-9:
            raise LatticeError(f"radius {radius} must be a whole number of grid steps {h}")
        self.values = np.asarray(values, dtype=float)
        n = self.half_width
        if self.values.shape != (2 * n + 1,) * self.d:
            raise LatticeError(f"expected {(2 * n + 1,) * self.d} grid values, got {self.values.shape}")
        self.nonnegative = nonnegative
        self.meta = dict(meta or {})

    @property
    def half_width(self) -> int:
        return int(round(self.radius / self.h))

    @property
    def axis(self) -> np.ndarray:
        n = self.half_width
        return (np.arange(2 * n + 1) - n) * self.h

    def nodes(self) -> np.ndarray:
        grids = np.meshgrid(*([self.axis] * self.d), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    @classmethod
    def from_function(cls, fn: Callable[[np.ndarray], np.ndarray], d: int, h: float, radius: float,
                      meta: Optional[Dict[str, Any]] = None) -> "GridFunction":
        """Sample fn on the grid nodes inside B_radius."""
        empty = cls(d, h, radius, np.zeros((2 * int(round(radius / h)) + 1,) * d), meta=meta)
        x = empty.nodes()
        inside = np.sqrt((x ** 2).sum(axis=1)) < radius
        values = np.zeros(len(x))
        values[inside] = fn(x[inside])
        empty.values = values.reshape(empty.values.shape)
        return empty

    def evaluate(self, points) -> np.ndarray:
        """Multilinear interpolation; zero outside the grid cube."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        interpolator = RegularGridInterpolator([self.axis] * self.d, self.values,
                                               bounds_error=False, fill_value=0.0)
        return interpolator(pts)

    def energy(self) -> float:
        """h^{d-2}/(2d) Σ_edges (Δφ)², the grid approximation of (1/2d) ∫ |∇φ|²."""
        padded = np.pad(self.values, 1)
        total = math.fsum(float((np.diff(padded, axis=a) ** 2).sum()) for a in range(self.d))
        return self.h ** (self.d - 2) * total / (2 * self.d)

    def minimum_inside(self) -> float:
        x = self.nodes()
        inside = np.sqrt((x ** 2).sum(axis=1)) < self.radius - 1e-12
        return float(self.values.ravel()[inside].min())

    def scaled(self, factor: float) -> "GridFunction":
        return GridFunction(self.d, self.h, self.radius, self.values * factor, self.nonnegative, self.meta)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        header = {"format": GRID_FORMAT, "d": self.d, "h": self.h, "radius": self.radius,
                  "nonnegative": self.nonnegative, "meta": self.meta}
        with open(path, "wb") as handle:
            np.savez(handle, values=self.values.ravel(), header=json.dumps(header, sort_keys=True))
        logger.info(f"Saved grid function ({self.values.size} nodes) to {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "GridFunction":
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            flat = data["values"]
        if header.get("format") != GRID_FORMAT:
            raise LatticeError(f"{path} is not a grid-function file")
        n = int(round(header["radius"] / header["h"]))
        values = flat.reshape((2 * n + 1,) * header["d"])
        return cls(header["d"], header["h"], header["radius"], values, header["nonnegative"], header["meta"])


# ---- Theta models ----

@dataclass(frozen=True)
class ThetaModel:
    """
    theta and theta' on [0, inf): "linear" (slope * u), "f2" (1 - exp(-u/g00))
    or "interpolated" (monotone cubic through estimated points, flat past the last level).
    """
    kind: str
    slope: float = 1.0
    g00: float = 1.0
    levels: Tuple[float, ...] = ()
    values: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("linear", "f2", "interpolated"):
            raise ThetaModelError(f"unknown theta model {self.kind!r}")
        if self.kind == "linear" and self.slope <= 0:
            raise ThetaModelError("linear theta needs a positive slope")
        if self.kind == "f2" and self.g00 <= 0:
            raise ThetaModelError("g(0,0) must be positive")
        if self.kind == "interpolated":
            levels, values = np.asarray(self.levels), np.asarray(self.values)
            if len(levels) < 2 or len(levels) != len(values):
                raise ThetaModelError("interpolated theta needs at least two (level, value) points")
            if levels[0] != 0.0 or values[0] != 0.0:
                raise ThetaModelError("interpolated theta must pass through (0, 0)")
            if np.any(np.diff(levels) <= 0):
                raise ThetaModelError("theta levels must be strictly increasing")
            if np.any(np.diff(values) < 0):
                raise ThetaModelError("theta estimate is not monotone; refusing to build a model")

    @classmethod
    def linear(cls, slope: float = 1.0) -> "ThetaModel":
        return cls("linear", slope=slope)

    @classmethod
    def closed_form_f2(cls, g00: Optional[float] = None) -> "ThetaModel":
        if g00 is None:
            g00 = green_function((0, 0, 0), (0, 0, 0))
        return cls("f2", g00=float(g00))

    @classmethod
    def interpolated(cls, levels: Sequence[float], values: Sequence[float]) -> "ThetaModel":
        levels = np.asarray(levels, dtype=float)
        values = np.asarray(values, dtype=float)
        if len(levels) and levels[0] > 0:
            levels, values = np.r_[0.0, levels], np.r_[0.0, values]
        return cls("interpolated", levels=tuple(levels), values=tuple(values))

    @classmethod
    def from_estimate(cls, estimate) -> "ThetaModel":
        return cls.interpolated(estimate.levels, estimate.estimates)

    @property
    def name(self) -> str:
        if self.kind == "linear":
            return "linear" if self.slope == 1.0 else f"linear:{self.slope:g}"
        if self.kind == "f2":
            return "F2"
        return f"interpolated:{len(self.levels)}"

    def _pchip(self) -> PchipInterpolator:
        return PchipInterpolator(np.asarray(self.levels), np.asarray(self.values), extrapolate=False)

    @property
    def theta_infinity(self) -> float:
        if self.kind == "linear":
            return math.inf
        if self.kind == "f2":
            return 1.0
        return float(self.values[-1])

    @property
    def lipschitz(self) -> float:
        if self.kind == "linear":
            return self.slope
        if self.kind == "f2":
            return 1.0 / self.g00
        return float(np.max(self.derivative(np.linspace(0.0, self.levels[-1], 2001))))

    def __call__(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.kind == "linear":
            return self.slope * u
        if self.kind == "f2":
            return -np.expm1(-u / self.g00)
        top = self.levels[-1]
        return np.where(u >= top, self.values[-1], np.nan_to_num(self._pchip()(np.minimum(u, top))))

    def derivative(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.kind == "linear":
            return np.full_like(u, self.slope)
        if self.kind == "f2":
            return np.exp(-u / self.g00) / self.g00
        top = self.levels[-1]
        slope = np.nan_to_num(self._pchip().derivative()(np.minimum(u, top)))
        return np.where(u >= top, 0.0, np.clip(slope, 0.0, None))

    def inverse(self, nu: float) -> float:
        """Smallest u with theta(u) = nu."""
        if not 0 <= nu < self.theta_infinity:
            raise InfeasibleLevelError(f"level {nu} is outside [0, {self.theta_infinity})")
        if self.kind == "linear":
            return nu / self.slope
        if self.kind == "f2":
            return -self.g00 * math.log1p(-nu)
        return brentq(lambda u: float(self(u)) - nu, 0.0, self.levels[-1], xtol=1e-14)


# ---- Discrete problem ----

class _Grid:
    """Interior nodes of B_r, the Dirichlet graph Laplacian on them and the nodes of D."""

    def __init__(self, d: int, h: float, r: float, shape: str, r_D: float):
        self.d, self.h, self.r, self.shape, self.r_D = d, h, r, shape, r_D
        self.template = GridFunction(d, h, r, np.zeros((2 * int(round(r / h)) + 1,) * d))
        x = self.template.nodes()
        self.full_shape = self.template.values.shape
        self.norm = np.sqrt((x ** 2).sum(axis=1))
        self.interior = np.flatnonzero(self.norm < r - 1e-12)
        self.points = x[self.interior]
        self.in_D = np.flatnonzero(continuum_contains(shape, r_D, self.points))
        if len(self.in_D) == 0:
            raise LatticeError(f"grid spacing {h} does not resolve D ({shape}, radius {r_D})")
        self.n_D = len(self.in_D)
        self.c = h ** (d - 2) / (2 * d)
        self.laplacian = self._dirichlet_laplacian()

    def _dirichlet_laplacian(self) -> sparse.csr_matrix:
        position = np.full(int(np.prod(self.full_shape)), -1, dtype=np.int64)
        position[self.interior] = np.arange(len(self.interior))
        multi = np.array(np.unravel_index(self.interior, self.full_shape)).T
        rows, cols = [], []
        for a in range(self.d):
            for step in (1, -1):
                nb = multi.copy()
                nb[:, a] += step
                ok = (nb[:, a] >= 0) & (nb[:, a] < self.full_shape[a])
                target = np.full(len(multi), -1, dtype=np.int64)
                target[ok] = position[np.ravel_multi_index(tuple(nb[ok].T), self.full_shape)]
                keep = target >= 0
                rows.append(np.flatnonzero(keep))
                cols.append(target[keep])
        rows, cols = np.concatenate(rows), np.concatenate(cols)
        m = len(self.interior)
        adjacency = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(m, m))
        return (2 * self.d * sparse.identity(m, format="csr") - adjacency).tocsr()

    def energy(self, x: np.ndarray) -> float:
        return self.c * float(x @ (self.laplacian @ x))

    def constraint(self, x: np.ndarray, theta: ThetaModel) -> float:
        return float(np.mean(theta(x[self.in_D] ** 2)))

    def constraint_grad(self, x: np.ndarray, theta: ThetaModel) -> np.ndarray:
        grad = np.zeros_like(x)
        xd = x[self.in_D]
        grad[self.in_D] = 2 * xd * theta.derivative(xd ** 2) / self.n_D
        return grad

    def to_function(self, x: np.ndarray, meta: Optional[Dict[str, Any]] = None) -> GridFunction:
        full = np.zeros(int(np.prod(self.full_shape)))
        full[self.interior] = x
        return GridFunction(self.d, self.h, self.r, full.reshape(self.full_shape), meta=meta)

    def from_function(self, phi: GridFunction) -> np.ndarray:
        if phi.values.shape == self.full_shape and abs(phi.h - self.h) < 1e-12:
            return phi.values.ravel()[self.interior].copy()
        return phi.evaluate(self.points)


@lru_cache(maxsize=16)
def _grid(d: int, h: float, r: float, shape: str, r_D: float) -> _Grid:
    if shape not in SHAPES:
        raise LatticeError(f"unsupported domain shape {shape!r}; expected one of {SHAPES}")
    if r <= circumradius(shape, r_D, d):
        raise LatticeError(f"ball radius r={r} must exceed the circumradius of D ({shape}, radius {r_D})")
    logger.debug(f"Building grid d={d} h={h} r={r} for {shape} D of radius {r_D}")
    return _Grid(d, h, r, shape, r_D)


def harmonic_profile(shape: str, r_D: float, r: float, h: float, d: int = 3) -> GridFunction:
    """Discrete exit-problem function: 1 on D, harmonic in B_r minus D, 0 on the sphere |x| = r."""
    grid = _grid(d, h, r, shape, r_D)
    return grid.to_function(_harmonic_extension(grid, grid.in_D, np.ones(grid.n_D)),
                            meta={"kind": "harmonic-profile", "shape": shape, "r_D": r_D})


def _harmonic_extension(grid: _Grid, fixed: np.ndarray, fixed_values: np.ndarray) -> np.ndarray:
    m = len(grid.interior)
    free = np.setdiff1d(np.arange(m), fixed)
    x = np.zeros(m)
    x[fixed] = fixed_values
    if len(free):
        L = grid.laplacian
        rhs = -(L[free][:, fixed] @ fixed_values)
        x[free] = factorized(L[free][:, free].tocsc())(rhs)
    return x


# ---- Eigen oracle ----

@dataclass
class EigenOracle:
    """Smallest generalized eigenvalue of (grid Laplacian, indicator of D) and the energy it predicts."""
    eigenvalue: float
    vector: GridFunction
    energy_per_level: float
    iterations: int

    def predicted_energy(self, nu: float, slope: float = 1.0) -> float:
        return self.energy_per_level * nu / slope


def eigen_oracle(shape: str, r_D: float, r: float, h: float, d: int = 3, tol: float = 1e-13) -> EigenOracle:
    """
    Inverse power iteration for L v = mu M v with M = diag(1_D).

    For theta(u) = u the constrained minimum is h^{d-2}/(2d) mu_1 nu |D ∩ grid|.
    """
    grid = _grid(d, h, r, shape, r_D)
    solve = factorized(grid.laplacian.tocsc())
    mask = np.zeros(len(grid.interior))
    mask[grid.in_D] = 1.0
    v = solve(mask)
    mu = math.inf
    for it in range(1, EIGEN_MAX_ITER + 1):
        v = solve(mask * v)
        v /= math.sqrt(float((mask * v * v).sum()))
        new_mu = float(v @ (grid.laplacian @ v))
        if abs(new_mu - mu) <= tol * new_mu:
            mu = new_mu
            break
        mu = new_mu
    else:
        raise ConvergenceError(f"eigen oracle did not converge in {EIGEN_MAX_ITER} iterations", residual=abs(new_mu - mu))
    v = np.abs(v) * math.sqrt(grid.n_D)
    logger.debug(f"Eigen oracle mu={mu:.10g} after {it} iterations on {len(grid.interior)} nodes")
    return EigenOracle(mu, grid.to_function(v, meta={"kind": "eigenvector"}), grid.c * mu * grid.n_D, it)


# ---- Constrained solve ----

@dataclass
class SolverOptions:
    constraint_tol: float = 1e-6
    energy_rtol: float = 1e-5
    kkt_tol: float = 1e-3
    feasibility_margin: float = 1e-3
    inner_maxiter: int = 5000
    gtol: float = 1e-10
    nonnegative: bool = True


@dataclass
class VariationalSolution:
    phi: GridFunction
    energy: float
    constraint: float
    nu: float
    multiplier: float
    kkt_residual: float
    converged: bool
    theta: str
    shape: str
    r_D: float
    log: List[Dict[str, float]] = field(default_factory=list)

    def summary(self) -> Dict[str, Any]:
        return {"nu": self.nu, "energy": self.energy, "constraint": self.constraint,
                "multiplier": self.multiplier, "kkt_residual": self.kkt_residual,
                "converged": self.converged, "theta": self.theta, "shape": self.shape,
                "r_D": self.r_D, "r": self.phi.radius, "h": self.phi.h,
                "min_interior": self.phi.minimum_inside()}


def _check_level(theta: ThetaModel, nu: float, opts: SolverOptions) -> None:
    if not nu > 0:
        raise InfeasibleLevelError(f"constraint level must be positive, got {nu}")
    top = theta.theta_infinity
    if math.isfinite(top) and nu >= top - opts.feasibility_margin * top:
        raise InfeasibleLevelError(f"level {nu} is not below theta_inf={top:g} minus the feasibility margin")


def _scale_to_level(grid: _Grid, x: np.ndarray, theta: ThetaModel, nu: float) -> np.ndarray:
    """Multiply x by the unique s > 0 with mean_D theta((s x)²) = nu."""
    def gap(s):
        return grid.constraint(s * x, theta) - nu

    if not np.any(x[grid.in_D] != 0):
        raise ConvergenceError("iterate vanishes on D; cannot meet the constraint")
    hi = 1.0
    for _ in range(200):
        if gap(hi) >= 0:
            break
        hi *= 2.0
    else:
        raise InfeasibleLevelError(f"cannot reach level {nu} by scaling")
    lo = 0.0
    return brentq(gap, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps) * x


def _kkt(grid: _Grid, x: np.ndarray, theta: ThetaModel) -> Tuple[float, float]:
    grad_e = 2 * grid.c * (grid.laplacian @ x)
    grad_c = grid.constraint_grad(x, theta)
    free = x > 0
    ge, gc = grad_e[free], grad_c[free]
    denom = float(gc @ gc)
    if denom == 0.0:
        return 0.0, math.inf
    lam = float(ge @ gc) / denom
    norm = float(np.linalg.norm(ge))
    return lam, float(np.linalg.norm(ge - lam * gc)) / norm if norm > 0 else 0.0


def solve_constrained(theta: ThetaModel, nu: float, shape: str = "ball", r_D: float = 1.0, r: float = 4.0,
                      h: float = 0.25, d: int = 3, opts: Optional[SolverOptions] = None,
                      initial: Optional[GridFunction] = None) -> VariationalSolution:
    """
    Augmented-Lagrangian minimisation of the grid energy under mean_D theta(phi²) = nu.

    Inner problems run L-BFGS-B with the bound phi >= 0; the final iterate is
    rescaled onto the constraint surface exactly.
    """
    opts = opts or SolverOptions()
    _check_level(theta, nu, opts)
    grid = _grid(d, h, r, shape, r_D)
    if initial is not None:
        x = np.clip(grid.from_function(initial), 0.0, None)
    else:
        x = np.sqrt(theta.inverse(nu)) * _harmonic_extension(grid, grid.in_D, np.ones(grid.n_D))
    x = _scale_to_level(grid, x, theta, nu)
    e_scale = max(grid.energy(x), 1e-300)
    lam, rho = 1.0, 10.0
    bounds = Bounds(np.zeros_like(x), np.full_like(x, np.inf)) if opts.nonnegative else None
    log: List[Dict[str, float]] = []
    energy_prev, gap_prev = math.inf, math.inf
    converged = False

    for outer in range(1, MAX_OUTER + 1):
        def objective(z, lam=lam, rho=rho):
            Lz = grid.laplacian @ z
            energy = grid.c * float(z @ Lz)
            gap = (grid.constraint(z, theta) - nu) / nu
            value = energy / e_scale - lam * gap + 0.5 * rho * gap * gap
            grad = 2 * grid.c * Lz / e_scale + (rho * gap - lam) * grid.constraint_grad(z, theta) / nu
            return value, grad

        result = minimize(objective, x, jac=True, method="L-BFGS-B", bounds=bounds,
                          options={"maxiter": opts.inner_maxiter, "ftol": 1e-15, "gtol": opts.gtol})
        x = result.x
        energy = grid.energy(x)
        gap = (grid.constraint(x, theta) - nu) / nu
        log.append({"outer": outer, "energy": energy, "constraint_gap": gap, "lambda": lam, "rho": rho,
                    "inner_iterations": int(result.nit)})
        logger.debug(f"AL step {outer}: energy={energy:.10g} gap={gap:.3e} lambda={lam:.6g} rho={rho:g}")
        if abs(gap) <= opts.constraint_tol and abs(energy - energy_prev) <= opts.energy_rtol * energy:
            converged = True
            break
        lam -= rho * gap
        if abs(gap) > 0.25 * abs(gap_prev):
            rho = min(rho * 10.0, 1e10)
        energy_prev, gap_prev = energy, gap

    x = _scale_to_level(grid, x, theta, nu)
    multiplier, residual = _kkt(grid, x, theta)
    converged = bool(converged and residual <= opts.kkt_tol)
    if not converged:
        logger.warning(f"Constrained solve at nu={nu:g} stopped with KKT residual {residual:.3e}")
    energy = grid.energy(x)
    meta = {"kind": "minimizer", "nu": nu, "theta": theta.name, "shape": shape, "r_D": r_D}
    logger.info(f"Solved I(nu={nu:g}) = {energy:.8g} on {len(x)} nodes (KKT residual {residual:.2e})")
    return VariationalSolution(grid.to_function(x, meta), energy, grid.constraint(x, theta), nu, multiplier,
                               residual, converged, theta.name, shape, r_D, log)


def _solve_task(task) -> VariationalSolution:
    theta, nu, shape, r_D, r, h, d, opts = task
    return solve_constrained(theta, nu, shape, r_D, r, h, d, opts)


def rate_function_curve(theta: ThetaModel, nus: Sequence[float], shape: str = "ball", r_D: float = 1.0,
                        r: float = 4.0, h: float = 0.25, d: int = 3, opts: Optional[SolverOptions] = None,
                        workers: int = 1) -> List[VariationalSolution]:
    """I_{D,r} on an increasing nu grid; warm starts when serial, cold starts across workers."""
    nus = sorted(float(v) for v in nus)
    if workers > 1:
        solutions = replica_map(_solve_task, [(theta, nu, shape, r_D, r, h, d, opts) for nu in nus], workers)
    else:
        solutions, previous = [], None
        for nu in nus:
            previous = solve_constrained(theta, nu, shape, r_D, r, h, d, opts, initial=previous.phi if previous else None)
            solutions.append(previous)
    tol = (opts or SolverOptions()).energy_rtol
    for a, b in zip(solutions, solutions[1:]):
        if b.energy < a.energy * (1 - tol):
            logger.warning(f"Rate curve not increasing between nu={a.nu:g} and nu={b.nu:g}")
    return solutions


# ---- Quasi-minimizer ----

@dataclass
class QuasiMinimizerReport:
    phi: GridFunction
    delta: float
    epsilon: float
    constraint: float
    window: Tuple[float, float]
    in_window: bool
    positive: bool
    radial_upper_excess: float
    radial_lower_deficit: float
    radial_ok: bool
    energy: float
    energy_bracket: Optional[Tuple[float, float]]
    degraded: bool

    def as_dict(self) -> Dict[str, Any]:
        out = {k: v for k, v in self.__dict__.items() if k != "phi"}
        out["window"] = list(self.window)
        out["energy_bracket"] = list(self.energy_bracket) if self.energy_bracket else None
        return out


def _mollify(grid: _Grid, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Box average of radius epsilon (at least one grid step), restricted back to the interior."""
    k = max(1, int(round(epsilon / grid.h)))
    full = np.zeros(int(np.prod(grid.full_shape)))
    full[grid.interior] = x
    smooth = uniform_filter(full.reshape(grid.full_shape), size=2 * k + 1, mode="constant")
    return smooth.ravel()[grid.interior]


def _radial_bounds(grid: _Grid, x: np.ndarray, s: float) -> Tuple[float, float]:
    """Largest excess over the harmonic upper envelope and deficit under the lower one, for s < |x| < r."""
    norm = grid.norm[grid.interior]
    band = np.abs(norm - s) <= grid.h
    outside = norm > s + grid.h
    if not band.any() or not outside.any():
        return 0.0, 0.0
    d, r = grid.d, grid.r
    envelope = (r ** (2 - d) - norm[outside] ** (2 - d)) / (r ** (2 - d) - s ** (2 - d))
    top, bottom = x[band].max(), x[band].min()
    upper = float(np.max(x[outside] / top - envelope)) if top > 0 else 0.0
    lower = float(np.max(bottom / top * envelope - x[outside] / top)) if top > 0 else 0.0
    return upper, lower


def build_quasi_minimizer(solution: VariationalSolution, delta: float, theta: ThetaModel,
                          opts: Optional[SolverOptions] = None, grid_tol: float = 0.05,
                          bracket: bool = False) -> QuasiMinimizerReport:
    """
    Positive function on B_r, harmonic outside D^delta, with
    nu(1+delta) <= mean_D theta(phi²) <= nu(1+2 delta).

    Discrete construction: solve at nu(1+3delta/2), add epsilon times the
    harmonic profile, box-average at scale epsilon and re-solve harmonically
    outside D^delta. epsilon runs through delta/2, delta/4, ...; when no
    candidate lands in the window the closest one is returned flagged degraded.
    """
    phi = solution.phi
    shape, r_D, nu = solution.shape, solution.r_D, solution.nu
    if not 0 < delta < min(1.0, r_D / 2):
        raise ValueError(f"delta must lie in (0, min(1, r_D/2)), got {delta}")
    grid = _grid(phi.d, phi.h, phi.radius, shape, r_D)
    window = (nu * (1 + delta), nu * (1 + 2 * delta))
    target = solve_constrained(theta, nu * (1 + 1.5 * delta), shape, r_D, phi.radius, phi.h, phi.d, opts,
                               initial=phi)
    psi = grid.from_function(target.phi)
    profile = _harmonic_extension(grid, grid.in_D, np.ones(grid.n_D))
    outer = np.flatnonzero(continuum_distance(shape, r_D, grid.points) <= delta)
    s = circumradius(shape, r_D, phi.d) + delta

    best = None
    for j in range(1, 7):
        eps = delta / 2 ** j
        smooth = _mollify(grid, psi + eps * profile, eps)
        x = _harmonic_extension(grid, outer, smooth[outer])
        value = grid.constraint(x, theta)
        miss = max(window[0] - value, value - window[1], 0.0)
        if best is None or miss < best[0]:
            best = (miss, eps, x, value)
        if miss == 0.0:
            break
    miss, eps, x, value = best
    upper, lower = _radial_bounds(grid, x, s)
    positive = bool(np.all(x > 0))
    radial_ok = upper <= grid_tol and lower <= grid_tol
    energy_bracket = None
    if bracket:
        lo = solve_constrained(theta, window[0], shape, r_D, phi.radius, phi.h, phi.d, opts, initial=target.phi)
        hi = solve_constrained(theta, window[1], shape, r_D, phi.radius, phi.h, phi.d, opts, initial=lo.phi)
        energy_bracket = (lo.energy, hi.energy)
    degraded = miss > 0.0
    if degraded:
        logger.warning(f"Quasi-minimizer constraint {value:.6g} misses the window [{window[0]:.6g}, {window[1]:.6g}]")
    result = grid.to_function(x, meta={"kind": "quasi-minimizer", "nu": nu, "delta": delta, "epsilon": eps,
                                       "theta": theta.name, "shape": shape, "r_D": r_D})
    return QuasiMinimizerReport(result, delta, eps, value, window, not degraded, positive, upper, lower,
                                radial_ok, grid.energy(x), energy_bracket, degraded)


# ---- Lattice blow-up energy ----

@dataclass
class DiscreteEnergy:
    energy: float
    scaled: float
    continuum_target: float
    N: int

    @property
    def relative_gap(self) -> float:
        return abs(self.energy / self.continuum_target - 1.0) if self.continuum_target else 0.0


def discrete_energy(phi: GridFunction, N: int) -> DiscreteEnergy:
    """
    E_{Z^d}(phi_N, phi_N) for phi_N(x) = phi(x/N), streamed one lattice slab at a time.

    continuum_target is N^{d-2} times the grid energy of phi, the Riemann-sum limit.
    """
    if int(N) != N or N < 1:
        raise LatticeError(f"blow-up factor must be a positive integer, got {N}")
    d, n = phi.d, phi.half_width
    M = int(math.ceil(N * phi.radius))
    axis = np.arange(-M, M + 1)
    scale = 1.0 / (N * phi.h)
    rest = np.meshgrid(*([axis] * (d - 1)), indexing="ij")
    rest_idx = [g.ravel() * scale + n for g in rest]

    def slab(x0):
        coords = [np.full(rest_idx[0].shape, x0 * scale + n)] + rest_idx
        values = map_coordinates(phi.values, coords, order=1, mode="constant", cval=0.0)
        return values.reshape((len(axis),) * (d - 1))

    total = 0.0
    previous = slab(axis[0])
    for a in range(d - 1):
        total += float((np.diff(previous, axis=a) ** 2).sum())
    for x0 in axis[1:]:
        current = slab(x0)
        total += float(((current - previous) ** 2).sum())
        for a in range(d - 1):
            total += float((np.diff(current, axis=a) ** 2).sum())
        previous = current
    energy = total / (2 * d)
    scaled = energy / N ** (d - 2)
    return DiscreteEnergy(energy, scaled, phi.energy() * N ** (d - 2), int(N))
