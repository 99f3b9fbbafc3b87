"""Perforated convolutional layer and the stride baselines.

The layer evaluates the convolution through lowering on the mask rows only,
keeps the ``N x T`` exact values (compact storage), and fills the rest of the
output through an :class:`InterpolationPlan`: a sparse linear map from the
compact values to the full ``X' x Y'`` grid.  Nearest-neighbour plans are
pure index indirections, so reading them is a gather and their transpose is
a segment sum.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .core import ShapeError, SpatialIndexSet
from .lowering import count_mults, gather_rows, kernel_matrix
from .masks import PerforationMask, grid_mask, n_for_rate, neighbor_map
from .triangulation import Triangulation, delaunay

INTERPOLATIONS = ("nearest", "zero", "barycentric")


class DegenerateTriangulationWarning(UserWarning):
    pass


def _canonical_interp(name: str) -> str:
    if name == "bary":
        return "barycentric"
    if name not in INTERPOLATIONS:
        raise ValueError(f"unknown interpolation {name!r}; expected one of {INTERPOLATIONS}")
    return name


@dataclass(eq=False)
class InterpolationPlan:
    """Sparse ``|Omega| x N`` map from exact values to the dense output grid."""

    kind: str
    shape: tuple[int, int]
    matrix: sp.csr_matrix
    gather: np.ndarray | None = None  # per-position source index, nearest plans only
    degenerate: bool = False
    triangulation: Triangulation | None = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return self.matrix.shape[1]

    @property
    def is_selection(self) -> bool:
        return self.gather is not None

    def expand(self, values: np.ndarray) -> np.ndarray:
        """``(B, N, T)`` compact values to ``(B, X', Y', T)``."""
        B, N, T = values.shape
        Xo, Yo = self.shape
        if N != self.N:
            raise ShapeError(f"plan expects {self.N} exact positions, got {N}")
        if self.gather is not None:
            return values[:, self.gather, :].reshape(B, Xo, Yo, T)
        flat = np.moveaxis(values, 1, 0).reshape(N, B * T)
        dense = np.asarray(self.matrix @ flat, dtype=values.dtype)
        return np.moveaxis(dense.reshape(Xo * Yo, B, T), 0, 1).reshape(B, Xo, Yo, T)

    def reduce(self, grad: np.ndarray) -> np.ndarray:
        """Transpose of :meth:`expand`: ``(B, X', Y', T)`` gradients to ``(B, N, T)``."""
        B, Xo, Yo, T = grad.shape
        if (Xo, Yo) != self.shape:
            raise ShapeError(f"gradient grid {(Xo, Yo)} does not match plan {self.shape}")
        flat = np.moveaxis(grad.reshape(B, Xo * Yo, T), 1, 0).reshape(Xo * Yo, B * T)
        out = np.asarray(self.matrix.T @ flat, dtype=grad.dtype)
        return np.moveaxis(out.reshape(self.N, B, T), 0, 1)


def build_plan(mask: PerforationMask, interpolation: str = "nearest",
               tie_seed: int | None = None) -> InterpolationPlan:
    """Interpolation plan for a mask.

    ``zero`` leaves perforated positions at 0; ``barycentric`` uses the
    Delaunay triangulation of the mask and falls back to the nearest
    neighbour outside the hull, or everywhere when the mask is collinear.
    """
    kind = _canonical_interp(interpolation)
    Xo, Yo = mask.shape
    P, N = Xo * Yo, mask.N
    if N == 0:
        raise ValueError("empty perforation mask")
    exact = mask.positions.flat
    if kind == "zero":
        m = sp.csr_matrix((np.ones(N), (exact, np.arange(N))), shape=(P, N))
        return InterpolationPlan(kind, (Xo, Yo), m)

    nbr = neighbor_map(mask, seed=tie_seed)
    if kind == "nearest":
        m = sp.csr_matrix((np.ones(P), (np.arange(P), nbr.index)), shape=(P, N))
        return InterpolationPlan(kind, (Xo, Yo), m, gather=nbr.index.copy())

    tri = delaunay(mask.positions.indices)
    if tri.degenerate:
        warnings.warn("mask points are collinear; barycentric interpolation falls back to nearest",
                      DegenerateTriangulationWarning, stacklevel=2)
        m = sp.csr_matrix((np.ones(P), (np.arange(P), nbr.index)), shape=(P, N))
        return InterpolationPlan(kind, (Xo, Yo), m, gather=nbr.index.copy(), degenerate=True, triangulation=tri)

    grid = SpatialIndexSet.full(Xo, Yo).indices
    t, w = tri.locate(grid)
    rows, cols, vals = [], [], []
    inside = t >= 0
    is_exact = np.zeros(P, dtype=bool)
    is_exact[exact] = True
    # triangulation vertices are the mask positions in mask order
    verts = tri.triangles[t[inside]]
    pin = np.nonzero(inside & ~is_exact)[0]
    sel = ~is_exact[inside]
    for k in range(3):
        rows.append(pin)
        cols.append(verts[sel, k])
        vals.append(w[inside][sel, k])
    outside = np.nonzero(~inside & ~is_exact)[0]
    rows += [outside, exact]
    cols += [nbr.index[outside], np.arange(N)]
    vals += [np.ones(len(outside)), np.ones(N)]
    m = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(P, N))
    m.eliminate_zeros()
    return InterpolationPlan(kind, (Xo, Yo), m, triangulation=tri)


def interpolate(values_at_I, plan: InterpolationPlan) -> np.ndarray:
    """Dense output from exact values; accepts ``(N, T)`` or ``(B, N, T)``."""
    v = np.asarray(values_at_I)
    if v.ndim == 2:
        return plan.expand(v[None])[0]
    return plan.expand(v)


@dataclass(eq=False)
class CompactActivation:
    """Exact values at the mask positions plus the plan that reads them densely."""

    values: np.ndarray
    plan: InterpolationPlan

    @property
    def shape(self) -> tuple[int, ...]:
        B, _, T = self.values.shape
        return (B, *self.plan.shape, T)

    @property
    def nbytes(self) -> int:
        return self.values.nbytes

    def densify(self) -> np.ndarray:
        return self.plan.expand(self.values)


def dense_bytes(shape, itemsize: int = 4) -> int:
    return int(np.prod(shape)) * itemsize


class PerforatedConvLayer:
    """Convolution evaluated exactly on a mask and interpolated elsewhere.

    Without a mask (or with the full mask) this is an ordinary convolution.
    Inputs are ``(X, Y, S)`` or batched ``(B, X, Y, S)``.
    """

    def __init__(self, kernel, mask: PerforationMask | None = None, interpolation: str = "nearest",
                 storage: str = "compact", bias=None, stride: int = 1, pad: int = 0,
                 tie_seed: int | None = None):
        K = np.asarray(kernel)
        if K.ndim != 4 or K.shape[0] != K.shape[1]:
            raise ShapeError(f"kernel must be (d, d, S, T), got {K.shape}")
        if storage not in ("compact", "dense"):
            raise ValueError(f"storage must be 'compact' or 'dense', got {storage!r}")
        if stride < 1 or pad < 0:
            raise ValueError("stride must be >= 1 and pad >= 0")
        self.kernel = K
        self.bias = None if bias is None else np.asarray(bias)
        self.stride = int(stride)
        self.pad = int(pad)
        self.interpolation = _canonical_interp(interpolation)
        self.storage = storage
        self.tie_seed = tie_seed
        self.mask = mask
        self._plan: InterpolationPlan | None = None
        self._cache = None
        self._single = False

    @property
    def d(self) -> int:
        return self.kernel.shape[0]

    @property
    def channels(self) -> tuple[int, int]:
        return self.kernel.shape[2], self.kernel.shape[3]

    def output_shape(self, X: int, Y: int) -> tuple[int, int]:
        d, s, p = self.d, self.stride, self.pad
        if X + 2 * p < d or Y + 2 * p < d:
            raise ShapeError(f"input {X}x{Y} (pad {p}) smaller than kernel {d}x{d}")
        return (X + 2 * p - d) // s + 1, (Y + 2 * p - d) // s + 1

    @property
    def perforated(self) -> bool:
        return self.mask is not None and not self.mask.is_full

    @property
    def plan(self) -> InterpolationPlan | None:
        if self.mask is None:
            return None
        if self._plan is None:
            self._plan = build_plan(self.mask, self.interpolation, self.tie_seed)
        return self._plan

    def set_mask(self, mask: PerforationMask | None, interpolation: str | None = None) -> None:
        self.mask = mask
        if interpolation is not None:
            self.interpolation = _canonical_interp(interpolation)
        self._plan = None
        self._cache = None

    def mults(self, X: int, Y: int) -> int:
        Xo, Yo = self.output_shape(X, Y)
        N = Xo * Yo if self.mask is None else self.mask.N
        S, T = self.channels
        return count_mults(self.d, S, T, N)

    # -- forward / backward ----------------------------------------------------

    def compute_exact(self, U: np.ndarray, keep: bool = False) -> np.ndarray:
        """Exact values ``(B, N, T)`` at the mask positions (all positions without a mask)."""
        if U.ndim != 4:
            raise ShapeError(f"expected (B, X, Y, S) input, got {U.shape}")
        B, X, Y, S = U.shape
        if S != self.kernel.shape[2]:
            raise ShapeError(f"input has {S} channels but kernel expects {self.kernel.shape[2]}")
        Xo, Yo = self.output_shape(X, Y)
        if self.mask is not None and self.mask.shape != (Xo, Yo):
            raise ShapeError(f"mask grid {self.mask.shape} does not match layer output {(Xo, Yo)}")
        Up = U
        if self.pad:
            p = self.pad
            Up = np.pad(U, ((0, 0), (p, p), (p, p), (0, 0)))
        flat = None if self.mask is None or self.mask.is_full else self.mask.positions.flat
        Kmat = kernel_matrix(self.kernel)
        if keep:
            rows = gather_rows(Up, self.d, flat, (Xo, Yo), self.stride)
            N = rows.shape[1]
            out = (rows.reshape(B * N, -1) @ Kmat).reshape(B, N, -1)
            self._cache = (U.shape, rows, flat, (Xo, Yo))
        else:
            # inference: lower `stack` images per GEMM so each product has about
            # as many rows as one unperforated image, keeping the working set small
            N = Xo * Yo if flat is None else len(flat)
            stack = max(1, (Xo * Yo) // N)
            out = np.empty((B, N, Kmat.shape[1]), dtype=np.result_type(Up, Kmat))
            for b in range(0, B, stack):
                rows = gather_rows(Up[b:b + stack], self.d, flat, (Xo, Yo), self.stride)
                n = rows.shape[0]
                out[b:b + n] = (rows.reshape(n * N, -1) @ Kmat).reshape(n, N, -1)
        if self.bias is not None:
            out += self.bias
        return out

    def forward(self, U, keep: bool = True):
        """Layer output: a :class:`CompactActivation` or a dense array.

        Unperforated layers return a dense array.  Unbatched input gives
        unbatched dense output.
        """
        U = np.asarray(U)
        single = U.ndim == 3
        if single:
            U = U[None]
        exact = self.compute_exact(U, keep=keep)
        self._single = single
        B, _, T = exact.shape
        if self.mask is None or self.mask.is_full:
            Xo, Yo = self.output_shape(U.shape[1], U.shape[2])
            out = exact.reshape(B, Xo, Yo, T)
            return out[0] if single else out
        act = CompactActivation(exact, self.plan)
        if self.storage == "dense" or single:
            dense = act.densify()
            return dense[0] if single else dense
        return act

    def backward(self, grad, need_input_grad: bool = True):
        """Gradients from ``dL/dV_hat`` (dense) or ``dL/dV`` at the mask (compact).

        Returns ``(dV_exact, dK, dU, db)``; ``dU`` is ``None`` when not requested
        and ``db`` is ``None`` without a bias.
        """
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        in_shape, rows, flat, (Xo, Yo) = self._cache
        g = np.asarray(grad)
        single = getattr(self, "_single", False)
        if single:
            g = g[None]
        N = rows.shape[1]
        if g.ndim == 4:
            if g.shape[1:3] != (Xo, Yo):
                raise ShapeError(f"gradient grid {g.shape[1:3]} does not match output {(Xo, Yo)}")
            if self.mask is None or self.mask.is_full:
                gI = g.reshape(g.shape[0], Xo * Yo, -1)
                if flat is not None:
                    gI = gI[:, flat]
            else:
                gI = self.plan.reduce(g)
        elif g.ndim == 3:
            gI = g
        else:
            raise ShapeError(f"unexpected gradient shape {g.shape}")
        B, _, T = gI.shape
        if gI.shape[1] != N:
            raise ShapeError(f"gradient has {gI.shape[1]} positions, layer computed {N}")
        d, S = self.d, self.kernel.shape[2]
        g2 = gI.reshape(B * N, T)
        dK = (rows.reshape(B * N, -1).T @ g2).reshape(self.kernel.shape)
        db = gI.sum(axis=(0, 1)) if self.bias is not None else None
        dU = None
        if need_input_grad:
            drows = (g2 @ kernel_matrix(self.kernel).T).reshape(B, N, d, d, S)
            Bi, X, Y, _ = in_shape
            p, s = self.pad, self.stride
            dUp = np.zeros((Bi, X + 2 * p, Y + 2 * p, S), dtype=drows.dtype)
            if flat is None:
                xs, ys = np.divmod(np.arange(Xo * Yo), Yo)
            else:
                xs, ys = np.divmod(flat, Yo)
            for i in range(d):
                for j in range(d):
                    dUp[:, xs * s + i, ys * s + j, :] += drows[:, :, i, j, :]
            dU = dUp[:, p:p + X, p:p + Y, :] if p else dUp
            if single:
                dU = dU[0]
        if single:
            gI = gI[0]
        return gI, dK, dU, db


def strided_conv(U, K, stride: int) -> np.ndarray:
    """Convolution evaluated every ``stride`` positions; skipped outputs are dropped."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return PerforatedConvLayer(K, stride=stride).forward(np.asarray(U), keep=False)


def fractional_stride_positions(Xo: int, Yo: int, keep_rate, seed: int = 0) -> PerforationMask:
    if not 0 < float(keep_rate) <= 1:
        raise ValueError(f"keep_rate must lie in (0, 1], got {keep_rate}")
    N = n_for_rate(Xo * Yo, 1 - float(keep_rate))
    return grid_mask(Xo, Yo, N, seed)


def fractional_stride_conv(U, K, keep_rate, seed: int = 0) -> np.ndarray:
    """Convolution on a non-uniform grid chosen by the grid-mask scheme.

    Returns a ``Kx x Ky x T`` tensor: the skipped rows and columns are omitted,
    not interpolated.
    """
    U = np.asarray(U)
    K = np.asarray(K)
    X, Y, _ = U.shape
    d = K.shape[0]
    Xo, Yo = X - d + 1, Y - d + 1
    mask = fractional_stride_positions(Xo, Yo, keep_rate, seed)
    if mask.N == 0:  # pragma: no cover - grid_mask raises first
        raise ValueError("fractional stride selected no positions")
    layer = PerforatedConvLayer(K, mask=mask)
    exact = layer.compute_exact(U[None])[0]
    Kx = len(np.unique(mask.positions.indices[:, 0]))
    Ky = len(np.unique(mask.positions.indices[:, 1]))
    return exact.reshape(Kx, Ky, -1)
