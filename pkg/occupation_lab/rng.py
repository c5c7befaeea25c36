# occupation_lab/rng.py
"""
Counter-based random streams keyed by (seed, replica, purpose), and an
ordered replica map for deterministic parallel Monte Carlo.
"""
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, TypeVar, Union

import numpy as np

from .settings import default_workers

logger = logging.getLogger("occupation-lab.rng")

T = TypeVar("T")
R = TypeVar("R")

SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    """
    Key of an independent random stream.

    Streams with distinct keys are statistically independent; equal keys
    reproduce the same sequence bit for bit (Philox is counter based).
    """
    seed: int
    replica: int = 0
    purpose: str = "default"

    def __post_init__(self):
        if self.seed < 0 or self.replica < 0:
            raise ValueError("seed and replica must be nonnegative")

    def generator(self) -> np.random.Generator:
        tag = zlib.crc32(self.purpose.encode("utf-8"))
        sequence = np.random.SeedSequence(entropy=self.seed & SEED_MASK, spawn_key=(self.replica, tag))
        return np.random.Generator(np.random.Philox(sequence))

    def child(self, purpose: str) -> "RngStream":
        return RngStream(self.seed, self.replica, f"{self.purpose}/{purpose}")

    def spawn(self, n: int, purpose: str) -> List["RngStream"]:
        """n replica streams under this stream's purpose, replicas 0..n-1."""
        name = f"{self.purpose}/{purpose}/r{self.replica}"
        return [RngStream(self.seed, i, name) for i in range(int(n))]


def as_generator(rng: Union[RngStream, np.random.Generator, int, None]) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if rng is None:
        raise ValueError("a random stream is required")
    return RngStream(int(rng)).generator()


def replica_streams(seed: int, purpose: str, n: int) -> List[RngStream]:
    return [RngStream(seed, i, purpose) for i in range(int(n))]


def chunked(items: Sequence[T], n_chunks: int) -> List[List[T]]:
    n_chunks = max(1, min(n_chunks, len(items)))
    bounds = np.linspace(0, len(items), n_chunks + 1).astype(int)
    return [list(items[bounds[i]:bounds[i + 1]]) for i in range(n_chunks)]


def replica_map(fn: Callable[[T], R], tasks: Iterable[T], workers: Optional[int] = None) -> List[R]:
    """
    Apply fn to every task and return results in task order.

    With more than one worker the tasks run in a process pool; fn and the
    tasks must then be picklable. Results are always merged in input order.
    """
    tasks = list(tasks)
    workers = default_workers() if workers is None else workers
    if workers <= 1 or len(tasks) <= 1:
        return [fn(task) for task in tasks]
    logger.debug(f"Dispatching {len(tasks)} replica tasks to {workers} workers")
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))
