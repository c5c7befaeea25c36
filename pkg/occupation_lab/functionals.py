# occupation_lab/functionals.py
"""
Local functionals of an occupation field and their interlacement averages
theta(u) = E[F(L^u restricted to B(0, r))].
"""
import logging
import math
from dataclasses import dataclass
from functools import partial
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy import ndimage
from scipy.interpolate import PchipInterpolator

from .errors import RegistrationError
from .interlacements import WindowLaw, sample_occupation_fields
from .lattice import Box, BoxArray, as_sites, enumerate_box
from .potential import equilibrium_measure, green_function
from .rng import RngStream, replica_map
from .stats import Z95, CheckRecord, batch_means

logger = logging.getLogger("occupation-lab.functionals")

FUZZ_PAIRS = 1000
THETA_BLOCK = 2000


@dataclass(frozen=True)
class LocalFunctional:
    """
    F acting on windows of B(0, radius), each window a vector in the
    lexicographic order of B(0, radius).
    """
    name: str
    radius: int
    evaluator: Callable[[np.ndarray], np.ndarray]
    monotone: bool = True
    vanishes_at_zero: bool = True
    growth_constant: float = 1.0
    bound: Optional[float] = None
    d: int = 3

    @property
    def bounded(self) -> bool:
        return self.bound is not None

    @property
    def window_size(self) -> int:
        return (2 * self.radius + 1) ** self.d

    def window(self) -> np.ndarray:
        return enumerate_box(Box.centered(self.radius, self.d))

    def __call__(self, windows) -> np.ndarray:
        arr = np.asarray(windows, dtype=float)
        single = arr.ndim == 1
        arr = np.atleast_2d(arr)
        if arr.shape[1] != self.window_size:
            raise ValueError(f"{self.name} expects windows of {self.window_size} sites, got {arr.shape[1]}")
        out = np.asarray(self.evaluator(arr), dtype=float)
        return out[0] if single else out


def _center_value(windows: np.ndarray) -> np.ndarray:
    return windows[:, windows.shape[1] // 2]


def _center_occupied(windows: np.ndarray) -> np.ndarray:
    return (windows[:, windows.shape[1] // 2] > 0).astype(float)


def _shielded(windows: np.ndarray, radius: int, d: int) -> np.ndarray:
    """1 when the zero set of the window does not connect the centre to the outer shell."""
    side = 2 * radius + 1
    zero = (windows == 0).reshape((len(windows),) + (side,) * d)
    structure = np.zeros((3,) * (d + 1), dtype=bool)
    structure[1] = ndimage.generate_binary_structure(d, 1)
    labels, count = ndimage.label(zero, structure=structure)
    flat = labels.reshape(len(windows), -1)
    shell = np.abs(enumerate_box(Box.centered(radius, d))).max(axis=1) == radius
    reaches_shell = np.zeros(count + 1, dtype=bool)
    reaches_shell[flat[:, shell].ravel()] = True
    reaches_shell[0] = False
    return (~reaches_shell[flat[:, flat.shape[1] // 2]]).astype(float)


def builtin_functional(which: str, radius: Optional[int] = None, d: int = 3) -> LocalFunctional:
    """F1 (occupation at 0), F2 (0 is visited) or F3 (0 is cut off from the shell of B(0, r))."""
    if which == "F1":
        return LocalFunctional("F1", 0, _center_value, growth_constant=1.0, bound=None, d=d)
    if which == "F2":
        return LocalFunctional("F2", 0, _center_occupied, growth_constant=1.0, bound=1.0, d=d)
    if which == "F3":
        if radius is None or radius < 1:
            raise RegistrationError(f"F3 needs a radius >= 1, got {radius}")
        return LocalFunctional(f"F3:r={radius}", int(radius), partial(_shielded, radius=int(radius), d=d),
                               growth_constant=1.0, bound=1.0, d=d)
    raise RegistrationError(f"unknown builtin functional {which!r}")


def fuzz_contract(F: LocalFunctional, pairs: int = FUZZ_PAIRS, seed: int = 0, atol: float = 1e-12) -> List[str]:
    """Violations of the regularity contract found on random window pairs."""
    rng = RngStream(seed, 0, f"fuzz/{F.name}").generator()
    m = F.window_size
    problems = []
    if F.vanishes_at_zero and abs(F(np.zeros(m))) > atol:
        problems.append("F(0) != 0")
    occupied = rng.random((pairs, m)) < rng.uniform(0.05, 0.9, size=(pairs, 1))
    base = np.where(occupied, rng.exponential(1.0, size=(pairs, m)), 0.0)
    extra_occupied = rng.random((pairs, m)) < rng.uniform(0.0, 0.5, size=(pairs, 1))
    extra = np.where(extra_occupied, rng.exponential(0.5, size=(pairs, m)), 0.0)
    f_base = F(base)
    f_sum = F(base + extra)
    if np.any(f_base < -atol) or np.any(f_sum < -atol):
        problems.append("F takes negative values")
    if F.monotone and np.any(f_sum < f_base - atol):
        problems.append("F is not non-decreasing")
    nonzero = np.any(extra != 0, axis=1).astype(float)
    allowance = F.growth_constant * (nonzero + extra.sum(axis=1))
    if np.any(f_sum > f_base + allowance + atol):
        problems.append(f"growth bound with c1={F.growth_constant} fails")
    if F.bound is not None and (np.any(f_base > F.bound + atol) or np.any(f_sum > F.bound + atol)):
        problems.append(f"F exceeds its declared bound {F.bound}")
    return problems


_REGISTRY: Dict[str, LocalFunctional] = {}


def register_functional(F: LocalFunctional) -> LocalFunctional:
    problems = fuzz_contract(F)
    if problems:
        raise RegistrationError(f"functional {F.name} rejected: {'; '.join(problems)}")
    _REGISTRY[F.name] = F
    logger.info(f"Registered functional {F.name} (radius {F.radius})")
    return F


def get_functional(name: str, d: int = 3) -> LocalFunctional:
    """Resolve "F1", "F2", "F3:r=<radius>" or a registered name."""
    if name in _REGISTRY and _REGISTRY[name].d == d:
        return _REGISTRY[name]
    if name in ("F1", "F2"):
        return register_functional(builtin_functional(name, d=d))
    if name.startswith("F3"):
        _, _, spec = name.partition(":")
        key, _, value = spec.partition("=")
        if key.strip() != "r" or not value.strip().isdigit():
            raise RegistrationError(f"cannot parse functional {name!r}; expected F3:r=<radius>")
        return register_functional(builtin_functional("F3", int(value), d=d))
    raise RegistrationError(f"unknown functional {name!r}")


# ---- theta ----

@dataclass
class ThetaEstimate:
    functional: str
    radius: int
    levels: np.ndarray
    estimates: np.ndarray
    half_widths: np.ndarray
    replicas: int
    method: str
    bound: Optional[float] = None
    monotone: bool = True

    def as_rows(self, closed_form: Optional[np.ndarray] = None) -> List[dict]:
        rows = []
        for i, u in enumerate(self.levels):
            row = {"u": float(u), "theta": float(self.estimates[i]), "ci_half_width": float(self.half_widths[i])}
            if closed_form is not None:
                row["closed_form"] = float(closed_form[i])
            rows.append(row)
        return rows


def _theta_block(task) -> np.ndarray:
    F, levels, replicas, stream = task
    rng = stream.generator()
    law = WindowLaw.of(F.window())
    fields, _ = sample_occupation_fields(levels, law.index, replicas, rng, law=law)
    return np.stack([F(fields[i]) for i in range(len(levels))])


def estimate_theta(F: LocalFunctional, levels: Sequence[float], replicas: int,
                   rng: Union[RngStream, int], workers: Optional[int] = None) -> ThetaEstimate:
    """
    Monte-Carlo theta(u) on a level grid with the shared-thinning sampler.

    Replicas are processed in fixed blocks, each with its own stream, so the
    result does not depend on the worker count.
    """
    levels = np.sort(np.asarray(levels, dtype=float))
    if np.any(levels < 0):
        raise ValueError("levels must be nonnegative")
    if replicas < 2:
        raise ValueError("theta estimation needs at least two replicas")
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng), 0, "theta")
    sizes = [min(THETA_BLOCK, replicas - start) for start in range(0, replicas, THETA_BLOCK)]
    streams = stream.spawn(len(sizes), f"theta/{F.name}")
    blocks = replica_map(_theta_block, [(F, levels, n, s) for n, s in zip(sizes, streams)], workers)
    values = np.concatenate(blocks, axis=1)
    estimates = values.mean(axis=1)
    if F.bounded:
        method = "normal"
        half = Z95 * values.std(axis=1, ddof=1) / math.sqrt(replicas)
    else:
        method = "batch-means"
        logger.warning(f"{F.name} is unbounded; using the batch-means interval")
        half = np.array([batch_means(row)[1] for row in values])
    monotone = bool(np.all(np.diff(estimates) >= 0))
    logger.info(f"theta for {F.name} at {len(levels)} levels from {replicas} replicas ({method})")
    return ThetaEstimate(F.name, F.radius, levels, estimates, half, replicas, method, F.bound, monotone)


def closed_form_theta(F: Union[LocalFunctional, str], u, g00: Optional[float] = None):
    """theta_1(u) = u, theta_2(u) = 1 - exp(-u/g(0,0)); None for functionals without a closed form."""
    name = F if isinstance(F, str) else F.name
    u = np.asarray(u, dtype=float)
    if name == "F1":
        return u
    if name == "F2":
        d = 3 if isinstance(F, str) else F.d
        g00 = g00 if g00 is not None else green_function((0,) * d, (0,) * d)
        return -np.expm1(-u / g00)
    return None


def theta_infinity(F: LocalFunctional, estimate: Optional[ThetaEstimate] = None) -> float:
    """sup_u theta(u): infinite for unbounded F, else read off the estimate at its largest level."""
    if not F.bounded:
        return math.inf
    if F.name == "F2" or F.name.startswith("F3") or estimate is None:
        return float(F.bound)
    top = float(estimate.estimates[-1])
    if F.bound - top >= 0.01 * F.bound:
        logger.warning(f"theta({estimate.levels[-1]:g}) = {top:.4f} is not within 1% of the bound; raise u_max")
    return top


def theta_property_check(F: LocalFunctional, estimate: ThetaEstimate, inflation: float = 1.0) -> List[CheckRecord]:
    """
    Lipschitz upper bound, lower increment bound and strict increase of an estimated theta.

    c2 = c1 (cap(B(0, r)) + |B(0, r)|); the lower bound compares
    theta(u' - u) exp(-u cap(B(0, r))) with theta(u') - theta(u).
    """
    if len(estimate.levels) < 3:
        raise ValueError("theta property check needs at least three levels")
    window = F.window()
    cap = equilibrium_measure(window).capacity
    c2 = F.growth_constant * (cap + len(window))
    levels, theta, half = estimate.levels, estimate.estimates, estimate.half_widths * inflation
    if levels[0] > 0:
        levels, theta, half = np.r_[0.0, levels], np.r_[0.0, theta], np.r_[0.0, half]
    interpolant = PchipInterpolator(levels, theta)
    records = []
    upper_ok = lower_ok = increase_ok = True
    slopes, lower_gaps = [], []
    for i in range(len(levels) - 1):
        u, u2 = levels[i], levels[i + 1]
        du = u2 - u
        increment = theta[i + 1] - theta[i]
        slack = half[i] + half[i + 1]
        slopes.append(increment / du)
        upper_ok &= increment <= c2 * du + slack
        lower = float(interpolant(du)) * math.exp(-u * cap)
        lower_gaps.append(increment - lower)
        lower_ok &= lower <= increment + slack + float(np.interp(du, levels, half))
        increase_ok &= increment > -slack
    records.append(CheckRecord("theta-lipschitz", max(slopes), c2, "pass" if upper_ok else "fail",
                               details={"slopes": slopes, "capacity": cap}))
    records.append(CheckRecord("theta-lower-increment", min(lower_gaps), 0.0, "pass" if lower_ok else "fail",
                               details={"gaps": lower_gaps}))
    records.append(CheckRecord("theta-increasing", float(np.min(np.diff(theta))), 0.0,
                               "pass" if increase_ok else "fail"))
    return records


def closed_form_increment_bounds(u: float, h: float, g00: Optional[float] = None) -> dict:
    """Both sides of theta(h) e^{-u cap} <= theta(u+h) - theta(u) for F2, where they coincide."""
    g00 = g00 if g00 is not None else green_function((0, 0, 0), (0, 0, 0))
    lower = float(closed_form_theta("F2", h, g00)) * math.exp(-u / g00)
    increment = float(closed_form_theta("F2", u + h, g00) - closed_form_theta("F2", u, g00))
    return {"lower": lower, "increment": increment, "upper_slope_bound": 1.0 / g00 + 1.0}


def functional_average(F: LocalFunctional, field_box: BoxArray, centers) -> float:
    """(1/|centers|) sum over centers x of F applied to the field window around x."""
    centers = as_sites(centers, field_box.d)
    offsets = F.window()
    points = (centers[:, None, :] + offsets[None, :, :]).reshape(-1, field_box.d)
    windows = field_box.at(points).reshape(len(centers), len(offsets))
    return float(F(windows).mean())
