"""
Counting and timing
===================

Static multiplication and activation-memory counts for the three reference
architectures, then a wall-clock comparison of one lowered convolution with
and without perforation.
"""

from fractions import Fraction

import numpy as np

from perfcnn.bench import account, layer_speedup
from perfcnn.masks import n_for_rate, uniform_mask
from perfcnn.network import alexnet_caffe, nin_cifar10, vgg16

for name, factory in (("NIN", nin_cifar10), ("AlexNet (Caffe)", alexnet_caffe), ("VGG-16", vgg16)):
    spec = factory()
    rep = account(spec)
    print(f"{name:16s} conv mults {rep.conv_mults:>15,}  activations {rep.act_bytes / 2**20:7.1f} MiB")

# %% perforate every spatial conv of NIN at r = 1/2
spec = nin_cifar10()
exact = {}
for i in spec.perforable_layers():
    Xo, Yo = spec.conv_output_grid(i)
    exact[i] = n_for_rate(Xo * Yo, Fraction(1, 2))
print()
print(account(spec, exact).format_table())

# %% timing one layer, single-threaded
rng = np.random.default_rng(0)
U = rng.standard_normal((16, 32, 32, 48)).astype(np.float32)
K = rng.standard_normal((5, 5, 48, 128)).astype(np.float32)
for r in (Fraction(1, 2), Fraction(3, 4), Fraction(7, 8)):
    mask = uniform_mask(28, 28, n_for_rate(28 * 28, r), seed=0)
    emp, theo, perf, dense = layer_speedup(U, K, mask)
    print(f"r = {r}: theoretical {theo:.2f}x, measured {emp:.2f}x "
          f"({dense.median * 1e3:.1f} ms -> {perf.median * 1e3:.1f} ms)")
