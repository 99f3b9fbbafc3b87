"""Dense tensor conventions, spatial index sets and the direct-convolution oracle.

Activations are ``numpy`` arrays of shape ``(X, Y, S)`` (height, width,
channels) stored row-major, so the flat order is ``(x, y, s)`` with ``s``
varying fastest.  Kernels are arrays of shape ``(d, d, S, T)``.  Batches add
a leading axis.  Spatial positions are 1-based everywhere in the public API.
"""

from __future__ import annotations

import struct
from fractions import Fraction
from pathlib import Path
from typing import Iterable

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent."""


def as_tensor3(values, dtype=DEFAULT_DTYPE) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    if arr.ndim != 3:
        raise ShapeError(f"expected an (X, Y, S) tensor, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite entries")
    return arr


def as_kernel(values, dtype=DEFAULT_DTYPE) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    if arr.ndim != 4 or arr.shape[0] != arr.shape[1]:
        raise ShapeError(f"expected a (d, d, S, T) kernel, got shape {arr.shape}")
    return arr


def output_shape(X: int, Y: int, d: int) -> tuple[int, int]:
    """Spatial output size of a unit-stride, unpadded convolution."""
    return X - d + 1, Y - d + 1


class SpatialIndexSet:
    """An ordered set of 1-based ``(x, y)`` positions inside an ``X' x Y'`` grid.

    Used both for the full position set and for perforation masks.  The
    order of ``indices`` is significant: lowered rows follow it.
    """

    __slots__ = ("shape", "indices", "_flat")

    def __init__(self, shape: tuple[int, int], indices):
        Xo, Yo = int(shape[0]), int(shape[1])
        if Xo < 1 or Yo < 1:
            raise ShapeError(f"grid must be non-empty, got {Xo}x{Yo}")
        idx = np.asarray(indices, dtype=np.int64).reshape(-1, 2)
        if idx.size:
            bad = (idx[:, 0] < 1) | (idx[:, 0] > Xo) | (idx[:, 1] < 1) | (idx[:, 1] > Yo)
            if bad.any():
                x, y = idx[np.argmax(bad)]
                raise IndexError(f"position ({x}, {y}) outside [1,{Xo}]x[1,{Yo}]")
        flat = (idx[:, 0] - 1) * Yo + (idx[:, 1] - 1)
        if np.unique(flat).size != flat.size:
            raise ValueError("duplicate positions in index set")
        idx.setflags(write=False)
        flat.setflags(write=False)
        self.shape = (Xo, Yo)
        self.indices = idx
        self._flat = flat

    @classmethod
    def full(cls, Xo: int, Yo: int) -> "SpatialIndexSet":
        xs, ys = np.meshgrid(np.arange(1, Xo + 1), np.arange(1, Yo + 1), indexing="ij")
        return cls((Xo, Yo), np.stack([xs.ravel(), ys.ravel()], axis=1))

    @classmethod
    def from_flat(cls, shape: tuple[int, int], flat: Iterable[int]) -> "SpatialIndexSet":
        flat = np.asarray(list(flat) if not isinstance(flat, np.ndarray) else flat, dtype=np.int64)
        Yo = shape[1]
        return cls(shape, np.stack([flat // Yo + 1, flat % Yo + 1], axis=1))

    @property
    def flat(self) -> np.ndarray:
        """0-based row-major flat indices into the ``X' x Y'`` grid."""
        return self._flat

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self):
        for x, y in self.indices:
            yield int(x), int(y)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SpatialIndexSet):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.indices, other.indices)

    def __hash__(self):
        return hash((self.shape, self.indices.tobytes()))

    def __repr__(self) -> str:
        return f"SpatialIndexSet({self.shape[0]}x{self.shape[1]}, N={len(self)})"

    def sorted(self) -> "SpatialIndexSet":
        return SpatialIndexSet(self.shape, self.indices[np.argsort(self._flat, kind="stable")])

    def as_set(self) -> set[tuple[int, int]]:
        return set(self)

    def to_grid(self) -> np.ndarray:
        """Boolean ``X' x Y'`` occupancy grid."""
        grid = np.zeros(self.shape, dtype=bool)
        grid.reshape(-1)[self._flat] = True
        return grid

    @property
    def rate(self) -> float:
        return perforation_rate(self, self.size)


def perforation_rate(I, omega_size: int) -> float:
    """Fraction of output positions that are *not* evaluated exactly."""
    n = len(I) if not isinstance(I, (int, np.integer)) else int(I)
    if omega_size <= 0:
        raise ValueError("position set must be non-empty")
    if n > omega_size:
        raise ValueError(f"|I| = {n} exceeds |Omega| = {omega_size}")
    return 1.0 - n / omega_size


def exact_rate(n: int, omega_size: int) -> Fraction:
    if n > omega_size:
        raise ValueError(f"|I| = {n} exceeds |Omega| = {omega_size}")
    return 1 - Fraction(n, omega_size)


def direct_conv(U, K) -> np.ndarray:
    """Reference convolution: unit stride, no padding, no bias.

    ``V(x, y, t) = sum_{i, j, s} K(i, j, s, t) U(x+i-1, y+j-1, s)``, evaluated
    position by position with float64 accumulation.  Deliberately slow; it
    exists to check the fast paths.
    """
    U = np.asarray(U)
    K = np.asarray(K)
    if U.ndim != 3:
        raise ShapeError(f"input must be (X, Y, S), got {U.shape}")
    if K.ndim != 4 or K.shape[0] != K.shape[1]:
        raise ShapeError(f"kernel must be (d, d, S, T), got {K.shape}")
    X, Y, S = U.shape
    d, _, Sk, T = K.shape
    if Sk != S:
        raise ShapeError(f"input has {S} channels but kernel expects {Sk}")
    if X < d or Y < d:
        raise ShapeError(f"input {X}x{Y} smaller than kernel {d}x{d}")
    Xo, Yo = output_shape(X, Y, d)
    out_dtype = np.result_type(U.dtype, K.dtype)
    U64 = U.astype(np.float64)
    K64 = K.astype(np.float64)
    V = np.zeros((Xo, Yo, T), dtype=np.float64)
    for x in range(Xo):
        for y in range(Yo):
            patch = U64[x:x + d, y:y + d, :]
            for t in range(T):
                V[x, y, t] = np.sum(patch * K64[:, :, :, t])
    return V.astype(out_dtype)


# --- binary tensor files -------------------------------------------------------

_HEADER = struct.Struct("<4sIIII")
FORMAT_VERSION = 1


def _write_array(path, magic: bytes, dims: tuple[int, int, int], values: np.ndarray) -> None:
    data = np.ascontiguousarray(values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, FORMAT_VERSION, *dims))
        fh.write(data.tobytes())


def _read_array(path, magic: bytes) -> tuple[tuple[int, int, int], np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    got, version, a, b, c = _HEADER.unpack_from(raw)
    if got != magic:
        raise ValueError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    values = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return (a, b, c), values


def write_tensor(path, U) -> None:
    """Write an ``(X, Y, S)`` tensor as a ``PCNT`` file."""
    U = np.asarray(U)
    if U.ndim != 3:
        raise ShapeError(f"expected (X, Y, S), got {U.shape}")
    _write_array(path, b"PCNT", U.shape, U)


def read_tensor(path) -> np.ndarray:
    (X, Y, S), values = _read_array(path, b"PCNT")
    if values.size != X * Y * S:
        raise ValueError(f"{path}: expected {X * Y * S} values, found {values.size}")
    return values.reshape(X, Y, S).astype(np.float32)


def kernel_to_bytes(K) -> bytes:
    K = np.asarray(K)
    d, _, S, T = K.shape
    return _HEADER.pack(b"PCNW", FORMAT_VERSION, d, S, T) + np.ascontiguousarray(K, dtype="<f4").tobytes()


def kernel_from_bytes(raw: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one ``PCNW`` record starting at ``offset``; returns (kernel, next offset)."""
    magic, version, d, S, T = _HEADER.unpack_from(raw, offset)
    if magic != b"PCNW":
        raise ValueError(f"bad magic {magic!r}, expected b'PCNW'")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported version {version}")
    n = d * d * S * T
    start = offset + _HEADER.size
    if len(raw) < start + 4 * n:
        raise ValueError("truncated kernel record")
    K = np.frombuffer(raw, dtype="<f4", count=n, offset=start).reshape(d, d, S, T)
    return K.astype(np.float32), start + 4 * n


def write_kernel(path, K) -> None:
    """Write a ``(d, d, S, T)`` kernel as a ``PCNW`` file."""
    Path(path).write_bytes(kernel_to_bytes(as_kernel(K)))


def read_kernel(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    K, end = kernel_from_bytes(raw)
    if end != len(raw):
        raise ValueError(f"{path}: trailing bytes after kernel")
    return K
