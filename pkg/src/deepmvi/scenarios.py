"""Missing-value scenario generators and block-shape statistics.

Randomness comes from numpy's PCG64 bit generator seeded explicitly, whose
stream is fixed by numpy's published algorithm, so a seed reproduces the
same mask on every platform.

Scenarios act on series in flattened, series-major order.  A block shape is
``(series_extent, time_extent)`` in that flattened order.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ConfigurationError

KINDS = ("mcar", "missdisj", "missover", "blackout", "point")
MCAR_BLOCK = 10
MCAR_FRACTION = 0.10
BLACKOUT_START = 0.05
REJECTION_CAP = 10_000


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class MissScenario:
    """What to hide.

    ``x_percent`` is the share of series that receive MCAR blocks;
    ``block_size`` is the MCAR block length (10), the Blackout extent ``s``,
    or the point-missing run length ``b``; ``miss_fraction`` applies to the
    point-missing scenario only.
    """

    kind: str
    x_percent: float = 10.0
    block_size: int = MCAR_BLOCK
    miss_fraction: float = MCAR_FRACTION
    seed: int = 0
    shuffle_series: bool = False

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ConfigurationError(f"unknown scenario {self.kind!r}; expected one of {KINDS}")
        if not 0 < self.x_percent <= 100:
            raise ConfigurationError("x_percent must lie in (0, 100]")
        if self.block_size < 1:
            raise ConfigurationError("block_size must be positive")
        if not 0 < self.miss_fraction < 1:
            raise ConfigurationError("miss_fraction must lie in (0, 1)")


@dataclass
class BlockShapeDist:
    shapes: list = field(default_factory=list)

    def __len__(self):
        return len(self.shapes)

    def counts(self) -> Counter:
        return Counter(self.shapes)

    @property
    def total_cells(self) -> int:
        return sum(a * b for a, b in self.shapes)

    def mean_time_extent(self) -> float:
        return float(np.mean([s[1] for s in self.shapes])) if self.shapes else 1.0


def _incomplete_series(n: int, x_percent: float, rng, shuffle: bool) -> np.ndarray:
    count = math.ceil(round(x_percent * n / 100.0, 9))
    order = rng.permutation(n) if shuffle else np.arange(n)
    return np.sort(order[:count])


def _place_runs(T: int, count: int, size: int, rng, forbidden=()) -> list:
    """Start offsets of ``count`` runs of length ``size`` that neither overlap
    nor touch, avoiding starts in ``forbidden``."""
    if count == 0:
        return []
    if count * size > T:
        raise CapacityError(f"{count} blocks of {size} do not fit in {T} steps")
    forbidden = set(forbidden)
    starts: list[int] = []
    taken = np.zeros(T + 2, dtype=bool)  # padded by one on each side
    attempts = 0
    while len(starts) < count and attempts < REJECTION_CAP:
        attempts += 1
        s = int(rng.integers(0, T - size + 1))
        if s in forbidden or taken[s:s + size + 2].any():
            continue
        taken[s + 1:s + size + 1] = True
        starts.append(s)
    if len(starts) < count:
        grid = np.arange(0, T - size + 1, size)
        starts = sorted(int(v) for v in rng.choice(grid, size=count, replace=False))
    return sorted(starts)


def generate(shape, scenario: MissScenario) -> np.ndarray:
    """Boolean missing mask of ``shape`` (last axis is time)."""
    shape = tuple(shape)
    T = shape[-1]
    N = int(np.prod(shape[:-1]))
    rng = make_rng(scenario.seed)
    mask = np.zeros((N, T), dtype=bool)
    kind = scenario.kind

    if kind in ("mcar", "point"):
        size = scenario.block_size if kind == "point" else MCAR_BLOCK
        frac = scenario.miss_fraction if kind == "point" else MCAR_FRACTION
        exact = frac * T / size
        count = int(math.floor(exact + 1e-9))
        if abs(exact - count) > 1e-9:
            warnings.warn(f"{frac:.0%} of {T} steps is not a whole number of "
                          f"length-{size} blocks; using {count}")
        rows = (np.arange(N) if kind == "point"
                else _incomplete_series(N, scenario.x_percent, rng, scenario.shuffle_series))
        prev_row, prev_starts = None, ()
        for r in rows:
            forbidden = prev_starts if prev_row == r - 1 else ()
            starts = _place_runs(T, count, size, rng, forbidden)
            for s in starts:
                mask[r, s:s + size] = True
            prev_row, prev_starts = r, starts
    elif kind in ("missdisj", "missover"):
        if N > T:
            raise CapacityError(f"{N} series cannot hold disjoint blocks in {T} steps")
        span = 1 if kind == "missdisj" else 2
        for i in range(N):
            mask[i, i * T // N:min((i + span) * T // N, T)] = True
    else:  # blackout
        start = int(BLACKOUT_START * T)
        if start + scenario.block_size > T:
            raise CapacityError(f"blackout of {scenario.block_size} from {start} exceeds T={T}")
        mask[:, start:start + scenario.block_size] = True
    return mask.reshape(shape)


def _runs(row: np.ndarray):
    padded = np.concatenate([[False], row, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return list(zip(edges[::2].tolist(), edges[1::2].tolist()))


def block_shapes(mask) -> BlockShapeDist:
    """Decompose a mask into maximal time runs, merging identical runs in
    consecutive series into one cuboid."""
    mask = np.asarray(mask, dtype=bool)
    flat = mask.reshape(-1, mask.shape[-1]) if mask.ndim > 1 else mask[None, :]
    shapes = []
    open_blocks: dict = {}
    for row in flat:
        runs = set(_runs(row))
        closed = [k for k in open_blocks if k not in runs]
        for k in closed:
            shapes.append((open_blocks.pop(k), k[1] - k[0]))
        for run in sorted(runs):
            open_blocks[run] = open_blocks.get(run, 0) + 1
    for k, height in open_blocks.items():
        shapes.append((height, k[1] - k[0]))
    return BlockShapeDist(sorted(shapes))


def sample_shape(dist: BlockShapeDist, rng) -> tuple:
    if not dist.shapes:
        warnings.warn("empty block-shape distribution; using a single cell")
        return (1, 1)
    return dist.shapes[int(rng.integers(len(dist.shapes)))]
