# occupation_lab/lattice.py
"""
Lattice geometry on Z^d: sup-norm boxes, boundaries, discrete blow-ups and
dense lattice functions.

Every site-indexed vector in the package uses lexicographic site order, which
is what np.unique(axis=0), np.argwhere and C-order flattening of a box all
produce.
"""
import logging
import re
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from .errors import LatticeError

logger = logging.getLogger("occupation-lab.lattice")

MIN_DIMENSION = 3
COORD_LIMIT = 2 ** 40
SHAPES = ("box", "ball")


def check_dimension(d: int) -> int:
    if int(d) != d or d < MIN_DIMENSION:
        raise LatticeError(f"lattice dimension must be an integer >= {MIN_DIMENSION}, got {d}")
    return int(d)


def unit_vectors(d: int) -> np.ndarray:
    """Neighbour offsets in the fixed order +e1, -e1, +e2, -e2, ..."""
    offsets = np.zeros((2 * d, d), dtype=np.int64)
    for a in range(d):
        offsets[2 * a, a] = 1
        offsets[2 * a + 1, a] = -1
    return offsets


def as_sites(points, d: Optional[int] = None) -> np.ndarray:
    """Coerce to a lexicographically sorted, duplicate-free (n, d) int64 array."""
    arr = np.asarray(points, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1) if arr.size else arr.reshape(0, d or MIN_DIMENSION)
    if d is not None and arr.shape[1] != d:
        raise LatticeError(f"expected sites of dimension {d}, got {arr.shape[1]}")
    check_dimension(arr.shape[1])
    if arr.size and np.abs(arr).max() > COORD_LIMIT:
        raise LatticeError("site coordinates exceed the supported range")
    if len(arr) == 0:
        return arr
    return np.unique(arr, axis=0)


def sup_distance(points: np.ndarray, center) -> np.ndarray:
    return np.abs(np.asarray(points) - np.asarray(center)).max(axis=-1)


@dataclass(frozen=True)
class Box:
    """Closed sup-norm ball B(center, radius)."""
    center: Tuple[int, ...]
    radius: int

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(int(c) for c in self.center))
        check_dimension(len(self.center))
        if int(self.radius) != self.radius or self.radius < 0:
            raise LatticeError(f"box radius must be a nonnegative integer, got {self.radius}")
        object.__setattr__(self, "radius", int(self.radius))
        if max(abs(c) for c in self.center) + self.radius > COORD_LIMIT:
            raise LatticeError("box coordinates overflow the supported range")

    @classmethod
    def centered(cls, radius: int, d: int = 3) -> "Box":
        return cls((0,) * check_dimension(d), radius)

    @property
    def d(self) -> int:
        return len(self.center)

    @property
    def size(self) -> int:
        return (2 * self.radius + 1) ** self.d

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.center, dtype=np.int64) - self.radius

    def contains(self, points) -> np.ndarray:
        return sup_distance(np.atleast_2d(points), self.center) <= self.radius

    def sites(self) -> np.ndarray:
        return enumerate_box(self)


def enumerate_box(b: Box) -> np.ndarray:
    axes = [np.arange(c - b.radius, c + b.radius + 1, dtype=np.int64) for c in b.center]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1)


class SiteIndex:
    """
    Finite site set with O(1) membership and position lookup.

    A dense table over the bounding box maps each site to its position in the
    lexicographic site list (-1 elsewhere).
    """

    def __init__(self, sites, d: Optional[int] = None):
        self.sites = as_sites(sites, d)
        if len(self.sites) == 0:
            self.d = d or MIN_DIMENSION
            self.lower = np.zeros(self.d, dtype=np.int64)
            self.shape = np.zeros(self.d, dtype=np.int64)
            self._table = np.full((1,) * self.d, -1, dtype=np.int64)
            return
        self.d = self.sites.shape[1]
        self.lower = self.sites.min(axis=0)
        self.shape = self.sites.max(axis=0) - self.lower + 1
        self._table = np.full(tuple(self.shape), -1, dtype=np.int64)
        self._table[tuple((self.sites - self.lower).T)] = np.arange(len(self.sites))

    def __len__(self) -> int:
        return len(self.sites)

    def lookup(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.int64))
        out = np.full(len(pts), -1, dtype=np.int64)
        if len(self.sites) == 0:
            return out
        rel = pts - self.lower
        inside = np.all((rel >= 0) & (rel < self.shape), axis=1)
        out[inside] = self._table[tuple(rel[inside].T)]
        return out

    def contains(self, points) -> np.ndarray:
        return self.lookup(points) >= 0

    @cached_property
    def center(self) -> np.ndarray:
        lo, hi = self.sites.min(axis=0), self.sites.max(axis=0)
        return (lo + hi) // 2

    @cached_property
    def radius(self) -> int:
        return int(sup_distance(self.sites, self.center).max())

    def key(self) -> bytes:
        return self.sites.tobytes() + bytes([self.d])


def internal_boundary(K) -> np.ndarray:
    """Sites of K with at least one nearest neighbour outside K."""
    index = K if isinstance(K, SiteIndex) else SiteIndex(K)
    if len(index) == 0:
        return index.sites
    sites = index.sites
    on_boundary = np.zeros(len(sites), dtype=bool)
    for e in unit_vectors(index.d):
        on_boundary |= ~index.contains(sites + e)
    return sites[on_boundary]


def external_boundary(K) -> np.ndarray:
    """Sites outside K adjacent to K."""
    index = K if isinstance(K, SiteIndex) else SiteIndex(K)
    if len(index) == 0:
        return index.sites
    candidates = np.concatenate([index.sites + e for e in unit_vectors(index.d)])
    candidates = candidates[~index.contains(candidates)]
    return as_sites(candidates, index.d)


def neighbourhood(K, radius: int) -> np.ndarray:
    """K + B(0, radius), the sup-norm enlargement of K."""
    index = K if isinstance(K, SiteIndex) else SiteIndex(K)
    offsets = enumerate_box(Box.centered(radius, index.d))
    grown = (index.sites[:, None, :] + offsets[None, :, :]).reshape(-1, index.d)
    return as_sites(grown, index.d)


@dataclass(frozen=True)
class DiscreteDomain:
    shape: str
    scale: float
    blowup: int
    sites: np.ndarray

    @property
    def d(self) -> int:
        return self.sites.shape[1]

    def __len__(self) -> int:
        return len(self.sites)

    def contains_continuum(self, points) -> np.ndarray:
        return continuum_contains(self.shape, self.scale, np.atleast_2d(points))


def continuum_contains(shape: str, radius: float, points: np.ndarray) -> np.ndarray:
    """Membership in the closed continuum shape of the given radius."""
    tol = 1e-12 * max(1.0, radius)
    if shape == "box":
        return np.abs(points).max(axis=-1) <= radius + tol
    if shape == "ball":
        return np.sqrt((points ** 2).sum(axis=-1)) <= radius + tol
    raise LatticeError(f"unsupported domain shape {shape!r}; expected one of {SHAPES}")


def continuum_distance(shape: str, radius: float, points: np.ndarray) -> np.ndarray:
    """Euclidean distance from points to the closed shape (0 inside)."""
    if shape == "box":
        excess = np.clip(np.abs(points) - radius, 0.0, None)
        return np.sqrt((excess ** 2).sum(axis=-1))
    if shape == "ball":
        return np.clip(np.sqrt((points ** 2).sum(axis=-1)) - radius, 0.0, None)
    raise LatticeError(f"unsupported domain shape {shape!r}; expected one of {SHAPES}")


def circumradius(shape: str, radius: float, d: int) -> float:
    return radius * np.sqrt(d) if shape == "box" else radius


def discrete_blowup(shape: str, r_D: float, N: int, d: int = 3) -> DiscreteDomain:
    """(N·D) ∩ Z^d for D the closed box [-r_D, r_D]^d or the closed euclidean ball of radius r_D."""
    check_dimension(d)
    if shape not in SHAPES:
        raise LatticeError(f"unsupported domain shape {shape!r}; expected one of {SHAPES}")
    if int(N) != N or N < 1:
        raise LatticeError(f"blow-up factor must be a positive integer, got {N}")
    if r_D <= 0:
        raise LatticeError(f"domain radius must be positive, got {r_D}")
    extent = int(np.floor(N * r_D * (1 + 1e-12)))
    candidates = enumerate_box(Box.centered(extent, d))
    keep = continuum_contains(shape, N * r_D, candidates.astype(float))
    return DiscreteDomain(shape=shape, scale=float(r_D), blowup=int(N), sites=candidates[keep])


class BoxArray:
    """
    Real lattice function stored densely on a box, zero outside.

    `origin` is the lattice site of values[0, ..., 0].
    """

    def __init__(self, origin, values: np.ndarray):
        self.origin = np.asarray(origin, dtype=np.int64)
        self.values = np.asarray(values, dtype=float)
        if self.values.ndim != len(self.origin):
            raise LatticeError("BoxArray values must have one axis per lattice dimension")
        check_dimension(len(self.origin))

    @classmethod
    def zeros(cls, box: Box) -> "BoxArray":
        return cls(box.lower, np.zeros((2 * box.radius + 1,) * box.d))

    @classmethod
    def from_sites(cls, sites, values, box: Optional[Box] = None) -> "BoxArray":
        sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
        if box is None:
            center = (sites.min(axis=0) + sites.max(axis=0)) // 2
            box = Box(tuple(center), int(sup_distance(sites, center).max()))
        out = cls.zeros(box)
        out.values[tuple((sites - out.origin).T)] = values
        return out

    @property
    def d(self) -> int:
        return len(self.origin)

    def at(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.int64))
        rel = pts - self.origin
        inside = np.all((rel >= 0) & (rel < np.array(self.values.shape)), axis=1)
        out = np.zeros(len(pts))
        out[inside] = self.values[tuple(rel[inside].T)]
        return out

    def dirichlet_energy(self) -> float:
        """E(h,h) = (1/2d) Σ over unordered nearest-neighbour edges of (h(y)-h(x))^2."""
        padded = np.pad(self.values, 1)
        total = sum(float((np.diff(padded, axis=a) ** 2).sum()) for a in range(self.d))
        return total / (2 * self.d)

    def laplacian(self) -> "BoxArray":
        """Δh(x) = (1/2d) Σ_{y~x} (h(y) - h(x)) on the box grown by one layer."""
        padded = np.pad(self.values, 2)
        inner = tuple(slice(1, -1) for _ in range(self.d))
        lap = -2 * self.d * padded[inner]
        for a in range(self.d):
            lap = lap + np.roll(padded, 1, axis=a)[inner] + np.roll(padded, -1, axis=a)[inner]
        return BoxArray(self.origin - 1, lap / (2 * self.d))

    def gauss_green_defect(self) -> float:
        """E(h,h) + Σ h·Δh, which vanishes for finitely supported h."""
        lap = self.laplacian()
        core = tuple(slice(1, -1) for _ in range(self.d))
        return self.dirichlet_energy() + float((self.values * lap.values[core]).sum())

    def total(self) -> float:
        return float(self.values.sum())


_BOX_PATTERN = re.compile(r"^B\(\s*(\(.*?\)|-?\d+)\s*,\s*(\d+)\s*\)$")


def _parse_point(text: str, d: int) -> Tuple[int, ...]:
    text = text.strip()
    if text == "0":
        return (0,) * d
    unit = re.fullmatch(r"(-?)e(\d+)", text)
    if unit:
        axis = int(unit.group(2)) - 1
        if not 0 <= axis < d:
            raise LatticeError(f"unit vector {text} out of range for d={d}")
        point = [0] * d
        point[axis] = -1 if unit.group(1) else 1
        return tuple(point)
    inner = text.strip("()")
    coords = tuple(int(c) for c in inner.split(",") if c.strip())
    if len(coords) != d:
        raise LatticeError(f"point {text} does not have {d} coordinates")
    return coords


def parse_site_set(text: str, d: int = 3) -> np.ndarray:
    """
    Parse a site-set literal.

    Accepted forms: "B(0,4)", "B((1,0,0),2)", "{0}", "{0,e1}", "{(0,0,0),(1,0,0)}".
    """
    check_dimension(d)
    text = text.strip()
    match = _BOX_PATTERN.match(text)
    if match:
        return enumerate_box(Box(_parse_point(match.group(1), d), int(match.group(2))))
    if text.startswith("{") and text.endswith("}"):
        body = text[1:-1]
        tokens = re.findall(r"\([^)]*\)|-?e\d+|-?\d+", body)
        if not tokens:
            raise LatticeError(f"empty site set literal {text!r}")
        return as_sites([_parse_point(t, d) for t in tokens], d)
    raise LatticeError(f"cannot parse site set {text!r}")


def sites_to_strings(sites: Iterable[Sequence[int]]) -> list:
    return ["(" + ",".join(str(int(c)) for c in s) + ")" for s in sites]
