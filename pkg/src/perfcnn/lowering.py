"""Convolution lowering: row-subset im2row, the GEMM, and batch stacking.

Each data-matrix row is one ``d x d x S`` input patch flattened in
``(i, j, s)`` order with ``s`` fastest, which is exactly the row-major
flattening of a ``(d, d, S)`` block.  The matching kernel matrix is
``K.reshape(d * d * S, T)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ShapeError, SpatialIndexSet


@dataclass(frozen=True)
class DataMatrix:
    """Lowered patches plus ``(image, x, y)`` provenance of every row (1-based x, y)."""

    values: np.ndarray
    row_origin: np.ndarray

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


def _check_positions(positions: SpatialIndexSet, Xo: int, Yo: int) -> None:
    px, py = positions.shape
    if px > Xo or py > Yo:
        idx = positions.indices
        bad = (idx[:, 0] > Xo) | (idx[:, 1] > Yo)
        if bad.any():
            x, y = idx[np.argmax(bad)]
            raise IndexError(f"position ({x}, {y}) outside output grid {Xo}x{Yo}")


def patches(U: np.ndarray, d: int, stride: int = 1) -> np.ndarray:
    """Strided view of all patches: ``(..., X', Y', d, d, S)`` for ``U`` of shape ``(..., X, Y, S)``."""
    win = sliding_window_view(U, (d, d), axis=(-3, -2))  # (..., X-d+1, Y-d+1, S, d, d)
    win = win[..., ::stride, ::stride, :, :, :]
    return np.moveaxis(win, -3, -1)


def gather_rows(U: np.ndarray, d: int, flat_positions: np.ndarray, out_shape: tuple[int, int],
                stride: int = 1) -> np.ndarray:
    """Batched im2row on 0-based flat output positions.

    ``U`` is ``(B, X, Y, S)`` (already padded); the result is
    ``(B, N, d*d*S)``.  Only the selected patches are copied.
    """
    B, _, _, S = U.shape
    Xo, Yo = out_shape
    view = patches(U, d, stride)
    if view.shape[1:3] != (Xo, Yo):
        raise ShapeError(f"patch grid {view.shape[1:3]} does not match output {out_shape}")
    if flat_positions is None:
        rows = view.reshape(B, Xo * Yo, d * d * S)
        return np.ascontiguousarray(rows)
    xs = flat_positions // Yo
    ys = flat_positions % Yo
    sel = view[:, xs, ys]  # (B, N, d, d, S), a copy
    return sel.reshape(B, len(flat_positions), d * d * S)


def im2row(U, d: int, positions: SpatialIndexSet | None = None, stride: int = 1) -> DataMatrix:
    """Lower one ``(X, Y, S)`` input to a data matrix with one row per position.

    ``positions=None`` means every output position (the standard lowering).
    """
    U = np.asarray(U)
    if U.ndim != 3:
        raise ShapeError(f"expected (X, Y, S), got {U.shape}")
    X, Y, S = U.shape
    if X < d or Y < d:
        raise ShapeError(f"input {X}x{Y} smaller than kernel {d}x{d}")
    Xo, Yo = (X - d) // stride + 1, (Y - d) // stride + 1
    if positions is None:
        positions = SpatialIndexSet.full(Xo, Yo)
    _check_positions(positions, Xo, Yo)
    flat = (positions.indices[:, 0] - 1) * Yo + (positions.indices[:, 1] - 1)
    vals = gather_rows(U[None], d, flat, (Xo, Yo), stride)[0]
    origin = np.column_stack([np.zeros(len(flat), dtype=np.int64), positions.indices])
    return DataMatrix(vals, origin)


def matmul(M, K_reshaped) -> np.ndarray:
    """``rows x d^2 S`` times ``d^2 S x T``, delegated to BLAS."""
    A = M.values if isinstance(M, DataMatrix) else np.asarray(M)
    B = np.asarray(K_reshaped)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ShapeError(f"cannot multiply {A.shape} by {B.shape}")
    return A @ B


def kernel_matrix(K) -> np.ndarray:
    K = np.asarray(K)
    d, _, S, T = K.shape
    return K.reshape(d * d * S, T)


def default_stack_factor(rate) -> int:
    """``floor(1 / (1 - r))`` images per GEMM so the row count matches the dense case."""
    r = Fraction(rate).limit_denominator(10**6) if not isinstance(rate, Fraction) else rate
    if not 0 <= r < 1:
        raise ValueError(f"rate must lie in [0, 1), got {rate}")
    return math.floor(1 / (1 - r))


def stack_batch(inputs: Sequence[np.ndarray], masks: Sequence[SpatialIndexSet] | SpatialIndexSet,
                d: int, stack_factor: int | None = None) -> list[DataMatrix]:
    """Lower a mini-batch, concatenating the rows of ``stack_factor`` images per matrix.

    Returns one :class:`DataMatrix` per group of images; ``row_origin``
    carries the global image index so :func:`unstack` can undo the grouping.
    A single mask is shared by every image.
    """
    if len(inputs) == 0:
        raise ValueError("stack_batch needs at least one input")
    shape = np.shape(inputs[0])
    if any(np.shape(u) != shape for u in inputs):
        raise ShapeError("all inputs of a stacked batch must share one shape")
    if isinstance(masks, SpatialIndexSet):
        masks = [masks] * len(inputs)
    if len(masks) != len(inputs):
        raise ValueError("need one mask per input")
    if stack_factor is None:
        stack_factor = default_stack_factor(masks[0].rate)
    if stack_factor < 1:
        raise ValueError("stack_factor must be >= 1")

    groups = []
    for start in range(0, len(inputs), stack_factor):
        vals, origins = [], []
        for b in range(start, min(start + stack_factor, len(inputs))):
            dm = im2row(inputs[b], d, masks[b])
            vals.append(dm.values)
            o = dm.row_origin.copy()
            o[:, 0] = b
            origins.append(o)
        groups.append(DataMatrix(np.concatenate(vals), np.concatenate(origins)))
    return groups


def unstack(products: Sequence[np.ndarray], groups: Sequence[DataMatrix], n_images: int) -> list[np.ndarray]:
    """Split stacked GEMM results back into per-image ``N x T`` blocks (the transpose step)."""
    per_image: list[list[np.ndarray]] = [[] for _ in range(n_images)]
    for prod, dm in zip(products, groups):
        img = dm.row_origin[:, 0]
        for b in np.unique(img):
            per_image[b].append(prod[img == b])
    return [np.concatenate(p) if p else np.empty((0, 0)) for p in per_image]


def count_mults(d: int, S: int, T: int, N: int) -> int:
    """Multiplications in the lowered GEMM: ``d^2 S T N``."""
    for name, v in (("d", d), ("S", S), ("T", T), ("N", N)):
        if v <= 0:
            raise ValueError(f"{name} must be positive, got {v}")
    return int(d) * int(d) * int(S) * int(T) * int(N)
