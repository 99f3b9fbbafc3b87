"""
Perforating a single convolution
================================

One 5x5 convolution on a smooth random image, evaluated exactly at a
quarter of its output positions and filled in elsewhere.
"""

from fractions import Fraction

import numpy as np
from scipy.ndimage import gaussian_filter

from perfcnn.core import direct_conv
from perfcnn.masks import grid_mask, n_for_rate, neighbor_map, uniform_mask
from perfcnn.perfconv import PerforatedConvLayer

rng = np.random.default_rng(0)

# a smooth input makes neighbouring outputs similar, which is what
# interpolation relies on
U = gaussian_filter(rng.standard_normal((28, 28, 3)), sigma=(2, 2, 0)).astype(np.float32)
K = rng.standard_normal((5, 5, 3, 8)).astype(np.float32) * 0.2
V = direct_conv(U, K)
Xo, Yo = V.shape[:2]
print(f"output grid {Xo}x{Yo}, {Xo * Yo} positions")


def show(mask):
    grid = mask.positions.to_grid()
    for row in grid[:12]:
        print("  " + "".join("#" if v else "." for v in row[:24]))


# %% masks at r = 3/4
N = n_for_rate(Xo * Yo, Fraction(3, 4))
masks = {"uniform": uniform_mask(Xo, Yo, N, seed=1), "grid": grid_mask(Xo, Yo, N, seed=1)}
for name, m in masks.items():
    print(f"\n{name} mask, N = {m.N} (top-left corner)")
    show(m)

# %% each skipped position copies its nearest exact neighbour
nm = neighbor_map(masks["grid"])
print("\nnearest exact neighbour of (1, 1):", nm(1, 1))
sizes = nm.region_sizes(masks["grid"].N)
print(f"positions served per exact value: min {sizes.min()}, max {sizes.max()}")

# %% exact on the mask, approximate elsewhere
for name, m in masks.items():
    for interp in ("nearest", "barycentric", "zero"):
        layer = PerforatedConvLayer(K, mask=m, interpolation=interp)
        V_hat = layer.forward(U)
        on = m.positions.to_grid()
        exact_err = np.abs(V_hat[on] - V[on]).max()
        rel = np.linalg.norm(V_hat - V) / np.linalg.norm(V)
        print(f"{name:8s} {interp:12s} max error on I {exact_err:.1e}, relative error overall {rel:.3f}, "
              f"mults {layer.mults(28, 28):,} vs {PerforatedConvLayer(K).mults(28, 28):,}")
