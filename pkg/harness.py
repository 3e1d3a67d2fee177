"""
Reproducibility plumbing shared by the simulations and studies.

Random streams are addressed by (seed, *keys) rather than drawn from a
global generator, so that a replica block always sees the same numbers no
matter which worker process runs it or in which order.
"""
from concurrent.futures import ProcessPoolExecutor
import logging
import math
import os
import zlib
from typing import Callable, Iterable, List, NamedTuple, Optional, Sequence, \
    TypeVar, Union

import numpy as np
from scipy import stats
import torch


LOGGER = logging.getLogger(__name__)

T = TypeVar('T')
R = TypeVar('R')

Key = Union[int, str]


def stream_key(key: Key) -> int:
    """Map a stream key (integer or name) to a nonnegative integer."""
    if isinstance(key, str):
        return zlib.crc32(key.encode('utf-8'))
    if key < 0:
        raise ValueError('Stream keys must be nonnegative. Got {}'.format(key))
    return int(key)


def stream_seed(seed: int, *keys: Key) -> int:
    """Derive a 63-bit seed for the stream (seed, *keys)."""
    sequence = np.random.SeedSequence(
        entropy=int(seed),
        spawn_key=tuple(stream_key(k) for k in keys))
    low, high = sequence.generate_state(2, dtype=np.uint32)
    return (int(high) & 0x7fffffff) << 32 | int(low)


def generator(seed: int, *keys: Key) -> torch.Generator:
    """Return a CPU torch generator for the stream (seed, *keys)."""
    g = torch.Generator()
    g.manual_seed(stream_seed(seed, *keys))
    return g


def default_jobs() -> int:
    return os.cpu_count() or 1


def parallel_map(
        fn: Callable[[T], R],
        items: Iterable[T],
        jobs: Optional[int] = 1) -> List[R]:
    """
    Map `fn` over `items`, in worker processes when jobs > 1.

    Results are returned in the order of `items`, so callers reduce them
    deterministically. `fn` must be picklable (a module-level function or
    a functools.partial of one).
    """
    items = list(items)
    if jobs is None:
        jobs = default_jobs()
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]

    # Workers do their own threading through the pool, not through torch.
    with ProcessPoolExecutor(max_workers=min(jobs, len(items)),
                             initializer=torch.set_num_threads,
                             initargs=(1,)) as executor:
        return list(executor.map(fn, items))


class Moments(NamedTuple):
    """
    Count, mean and centered sum of squares of a sample.

    `merge` is associative, so per-block statistics can be combined in any
    grouping and give the same result up to rounding.
    """
    count: int
    mean: float
    m2: float

    @staticmethod
    def empty() -> 'Moments':
        return Moments(0, 0.0, 0.0)

    @staticmethod
    def of(values: Union[torch.Tensor, Sequence[float]]) -> 'Moments':
        values = torch.as_tensor(values, dtype=torch.float64).flatten()
        count = values.numel()
        if count == 0:
            return Moments.empty()
        mean = values.mean().item()
        return Moments(count, mean, ((values - mean) ** 2).sum().item())

    def merge(self, other: 'Moments') -> 'Moments':
        if self.count == 0:
            return other
        if other.count == 0:
            return self
        count = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * other.count / count
        m2 = (self.m2 + other.m2
              + delta ** 2 * self.count * other.count / count)
        return Moments(count, mean, m2)

    @property
    def variance(self) -> float:
        if self.count < 2:
            return math.nan
        return self.m2 / (self.count - 1)

    @property
    def stderr(self) -> float:
        if self.count < 2:
            return math.nan
        return math.sqrt(self.variance / self.count)


def merge_all(moments: Iterable[Moments]) -> Moments:
    total = Moments.empty()
    for m in moments:
        total = total.merge(m)
    return total


class Fit(NamedTuple):
    """Least-squares line y = slope * x + intercept with 95% band."""
    slope: float
    intercept: float
    slope_stderr: float
    slope_low: float
    slope_high: float
    r2: float
    points: int


def linear_fit(
        x: Sequence[float],
        y: Sequence[float],
        confidence: float = 0.95) -> Fit:
    """
    Ordinary least-squares fit with a t-distribution confidence band on
    the slope.

    :raises ValueError: With fewer than 3 points.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 3:
        raise ValueError('A fit needs at least 3 points. Got {}'.format(
            x.size))

    result = stats.linregress(x, y)
    quantile = stats.t.ppf(0.5 + confidence / 2, x.size - 2)
    half_width = quantile * result.stderr
    return Fit(
        slope=float(result.slope),
        intercept=float(result.intercept),
        slope_stderr=float(result.stderr),
        slope_low=float(result.slope - half_width),
        slope_high=float(result.slope + half_width),
        r2=float(result.rvalue ** 2),
        points=int(x.size),
    )
