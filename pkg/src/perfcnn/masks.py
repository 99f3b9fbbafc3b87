"""Perforation masks and the nearest-neighbour map.

Four generators are provided: uniform random positions, the scattered grid,
top-N by a weight field (pooling usage counts or averaged impacts), plus the
helpers that compute pooling usage counts.  All generators are pure functions
of their arguments and seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import SpatialIndexSet

MASK_TYPES = ("uniform", "grid", "pooling", "impact")


@dataclass(frozen=True, eq=False)
class PerforationMask:
    """Positions evaluated exactly, shared by all output channels.

    ``positions`` is kept in row-major order.  ``kind`` records the generator
    and ``seed`` its seed (``None`` for deterministic generators).
    """

    positions: SpatialIndexSet
    kind: str = "custom"
    seed: int | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.positions.shape

    @property
    def N(self) -> int:
        return len(self.positions)

    @property
    def rate(self) -> float:
        return self.positions.rate

    @property
    def is_full(self) -> bool:
        return self.N == self.positions.size

    def __len__(self) -> int:
        return self.N

    def __eq__(self, other) -> bool:
        if not isinstance(other, PerforationMask):
            return NotImplemented
        return self.positions == other.positions

    def __hash__(self):
        return hash(self.positions)

    @classmethod
    def full(cls, Xo: int, Yo: int) -> "PerforationMask":
        return cls(SpatialIndexSet.full(Xo, Yo), "full")

    @classmethod
    def from_positions(cls, shape, positions, kind="custom", seed=None) -> "PerforationMask":
        return cls(SpatialIndexSet(shape, positions).sorted(), kind, seed)


def _check_n(Xo: int, Yo: int, N: int) -> None:
    if not 0 < N <= Xo * Yo:
        raise ValueError(f"N must lie in [1, {Xo * Yo}], got {N}")


def n_for_rate(omega_size: int, rate) -> int:
    """Number of exact positions for a perforation rate, rounded half up, at least one."""
    from fractions import Fraction

    keep = (1 - Fraction(rate).limit_denominator(10**6)) * omega_size
    return max(1, min(omega_size, math.floor(keep + Fraction(1, 2))))


def uniform_mask(Xo: int, Yo: int, N: int, seed: int = 0) -> PerforationMask:
    """``N`` positions drawn without replacement."""
    _check_n(Xo, Yo, N)
    rng = np.random.default_rng(seed)
    flat = np.sort(rng.choice(Xo * Yo, size=N, replace=False))
    return PerforationMask(SpatialIndexSet.from_flat((Xo, Yo), flat), "uniform", seed)


def grid_counts(Xo: int, Yo: int, N: int) -> tuple[int, int]:
    Kx = math.floor(math.sqrt(N * Xo / Yo))
    Ky = math.floor(math.sqrt(N * Yo / Xo))
    return Kx, Ky


def achievable_n(kind: str, Xo: int, Yo: int, N: int) -> int:
    """Positions a generator actually returns when asked for ``N`` (grids give ``Kx * Ky``)."""
    if kind == "grid":
        Kx, Ky = grid_counts(Xo, Yo, min(N, Xo * Yo))
        return Kx * Ky
    return N


def grid_indices(size: int, K: int, u: float) -> np.ndarray:
    """``a(i) = ceil(size / K * (i - 1 + u))`` for ``i = 1..K``."""
    if not 0 < u < 1:
        raise ValueError(f"offset u must lie in (0, 1), got {u}")
    if not 1 <= K <= size:
        raise ValueError(f"need 1 <= K <= {size}, got {K}")
    i = np.arange(K, dtype=np.float64)
    return np.ceil(size * (i + u) / K).astype(np.int64)


def _open_unit(rng: np.random.Generator) -> float:
    u = rng.random()
    while u == 0.0:
        u = rng.random()
    return u


def grid_mask(Xo: int, Yo: int, N: int, seed: int = 0) -> PerforationMask:
    """Scattered ``Kx x Ky`` grid with pseudorandom offsets.

    The actual number of positions is ``Kx * Ky``, which may be below ``N``.
    Rows and columns use independent offsets.
    """
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    N = min(N, Xo * Yo)
    Kx, Ky = grid_counts(Xo, Yo, N)
    if Kx == 0 or Ky == 0:
        raise ValueError(f"grid mask for N={N} on {Xo}x{Yo} has an empty axis (Kx={Kx}, Ky={Ky})")
    rng = np.random.default_rng(seed)
    a = grid_indices(Xo, Kx, _open_unit(rng))
    b = grid_indices(Yo, Ky, _open_unit(rng))
    xs, ys = np.meshgrid(a, b, indexing="ij")
    pos = np.stack([xs.ravel(), ys.ravel()], axis=1)
    return PerforationMask(SpatialIndexSet((Xo, Yo), pos), "grid", seed)


def pool_windows(size: int, pool: int, stride: int, pad: int = 0, ceil_mode: bool = True) -> int:
    """Number of pooling windows along one axis (Caffe-style ceil mode by default)."""
    span = size + 2 * pad - pool
    if span < 0:
        raise ValueError(f"pool of size {pool} does not fit an axis of {size} (pad {pad})")
    n = (-(-span // stride) if ceil_mode else span // stride) + 1
    # the last window must start inside the (left-padded) input
    if ceil_mode and pad > 0 and (n - 1) * stride >= size + pad:
        n -= 1
    return n


def pooling_usage_counts(Xo: int, Yo: int, pool_size: int, pool_stride: int,
                         pool_padding: int = 0, ceil_mode: bool = True) -> np.ndarray:
    """``A(x, y)``: how many pooling windows read each convolution output."""
    if pool_size < 1 or pool_stride < 1 or pool_padding < 0:
        raise ValueError("invalid pooling geometry")
    if pool_padding >= pool_size:
        raise ValueError("pool padding must be smaller than the pool size")
    counts = []
    for size in (Xo, Yo):
        nwin = pool_windows(size, pool_size, pool_stride, pool_padding, ceil_mode)
        c = np.zeros(size, dtype=np.int64)
        for w in range(nwin):
            lo = w * pool_stride - pool_padding
            hi = min(lo + pool_size, size)
            c[max(lo, 0):hi] += 1
        counts.append(c)
    return np.outer(counts[0], counts[1]).astype(np.float64)


def top_n_by_weight(W, N: int, seed: int = 0, kind: str = "weighted") -> PerforationMask:
    """Take the ``N`` highest-weight positions, breaking ties at random."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError(f"weight field must be 2-D, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise ValueError("weight field contains non-finite entries")
    Xo, Yo = W.shape
    _check_n(Xo, Yo, N)
    rng = np.random.default_rng(seed)
    tiebreak = rng.permutation(Xo * Yo)
    # primary key: weight descending; secondary: random permutation
    order = np.lexsort((tiebreak, -W.ravel()))
    flat = np.sort(order[:N])
    return PerforationMask(SpatialIndexSet.from_flat((Xo, Yo), flat), kind, seed)


def pooling_mask(Xo: int, Yo: int, N: int, pool_size: int = 3, pool_stride: int = 2,
                 pool_padding: int = 0, seed: int = 0) -> PerforationMask:
    A = pooling_usage_counts(Xo, Yo, pool_size, pool_stride, pool_padding)
    return top_n_by_weight(A, N, seed, kind="pooling")


def impact_mask(B, N: int, seed: int = 0) -> PerforationMask:
    return top_n_by_weight(B, N, seed, kind="impact")


def make_mask(kind: str, Xo: int, Yo: int, N: int, seed: int = 0, weights=None,
              pool: tuple[int, int, int] | None = (3, 2, 0)) -> PerforationMask:
    """Dispatch to a generator by name; ``weights`` feeds the impact mask."""
    if kind == "uniform":
        return uniform_mask(Xo, Yo, N, seed)
    if kind == "grid":
        return grid_mask(Xo, Yo, N, seed)
    if kind == "pooling":
        if pool is None:
            raise ValueError("pooling-structure mask needs the geometry of a following pooling layer")
        return pooling_mask(Xo, Yo, N, *pool, seed=seed)
    if kind == "impact":
        if weights is None:
            raise ValueError("impact mask needs an averaged impact field")
        return impact_mask(weights, N, seed)
    if kind == "full":
        return PerforationMask.full(Xo, Yo)
    raise ValueError(f"unknown mask type {kind!r}; expected one of {MASK_TYPES}")


# --- nearest neighbours --------------------------------------------------------

@dataclass(frozen=True)
class NeighborMap:
    """For every position of the grid, its nearest exact position.

    ``index`` holds, per row-major grid position, the position of the
    neighbour within the mask's ordering; ``targets`` holds the neighbour's
    1-based coordinates.
    """

    shape: tuple[int, int]
    index: np.ndarray
    targets: np.ndarray = field(repr=False)

    def __call__(self, x: int, y: int) -> tuple[int, int]:
        tx, ty = self.targets[(x - 1) * self.shape[1] + (y - 1)]
        return int(tx), int(ty)

    def region_sizes(self, N: int) -> np.ndarray:
        return np.bincount(self.index, minlength=N)


def neighbor_map(mask: PerforationMask | SpatialIndexSet, seed: int | None = None,
                 chunk: int = 4096) -> NeighborMap:
    """Euclidean nearest member of the mask for every grid position.

    Distance ties go to the lowest position in the mask ordering (row-major
    for generated masks) unless ``seed`` is given, in which case a seeded
    random choice among the tied candidates is made.
    """
    positions = mask.positions if isinstance(mask, PerforationMask) else mask
    if len(positions) == 0:
        raise ValueError("cannot build a neighbour map for an empty mask")
    Xo, Yo = positions.shape
    P = positions.indices
    grid = SpatialIndexSet.full(Xo, Yo).indices
    index = np.empty(len(grid), dtype=np.int64)
    rng = np.random.default_rng(seed) if seed is not None else None
    for start in range(0, len(grid), chunk):
        g = grid[start:start + chunk]
        dist = ((g[:, None, :] - P[None, :, :]) ** 2).sum(axis=2)  # exact integers
        if rng is None:
            index[start:start + chunk] = np.argmin(dist, axis=1)
        else:
            best = dist.min(axis=1, keepdims=True)
            tied = dist == best
            counts = tied.sum(axis=1)
            pick = np.floor(rng.random(len(g)) * counts).astype(np.int64)
            # position of the pick-th True in each row
            csum = np.cumsum(tied, axis=1)
            index[start:start + chunk] = np.argmax(csum > pick[:, None], axis=1)
    index.setflags(write=False)
    targets = P[index]
    targets.setflags(write=False)
    return NeighborMap((Xo, Yo), index, targets)


# --- mask files ----------------------------------------------------------------

def format_mask(mask: PerforationMask) -> str:
    Xo, Yo = mask.shape
    lines = [f"PCNM {Xo} {Yo} {mask.N}"]
    lines.extend(f"{x} {y}" for x, y in mask.positions)
    return "\n".join(lines) + "\n"


def parse_mask(text: str, kind: str = "file") -> PerforationMask:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty mask file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "PCNM":
        raise ValueError(f"bad mask header: {lines[0]!r}")
    Xo, Yo, N = (int(v) for v in head[1:])
    if len(lines) - 1 != N:
        raise ValueError(f"mask header announces {N} positions, found {len(lines) - 1}")
    pos = [tuple(int(v) for v in ln.split()) for ln in lines[1:]]
    if any(len(p) != 2 for p in pos):
        raise ValueError("each mask line must hold two integers")
    return PerforationMask(SpatialIndexSet((Xo, Yo), np.array(pos, dtype=np.int64).reshape(-1, 2)), kind)


def write_mask(path, mask: PerforationMask) -> None:
    Path(path).write_text(format_mask(mask))


def read_mask(path) -> PerforationMask:
    return parse_mask(Path(path).read_text())
