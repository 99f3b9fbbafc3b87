"""
Which positions to keep
=======================

Train a small NIN-style network on synthetic shapes, then perforate its
second spatial convolution with each mask type and compare the error
increase without any fine-tuning.  Takes a minute or two on one core.
"""

import numpy as np

from perfcnn.data import synthetic_shapes
from perfcnn.masks import achievable_n, make_mask
from perfcnn.network import Network, TrainState, average_impacts, sgd_finetune, toy_nin

train, test = synthetic_shapes(3000, size=24, seed=1).split(2500)
net = Network(toy_nin(24), seed=0)
for rec in sgd_finetune(net, train.images, train.labels, 8, TrainState(lr=0.02, seed=0)):
    print(f"epoch {rec['epoch']}: loss {rec['loss']:.3f}, train error {rec['error']:.3f}")
loss0, err0 = net.evaluate(test.images, test.labels)
print(f"test error {err0:.3f}")

# %% the second spatial conv, 12x12 outputs, feeds max pooling through a 1x1 conv
layer = net.spec.perforable_layers()[1]
Xo, Yo = net.conv_grid(layer)
pool = net.spec.pooling_after(layer)
print(f"layer {layer}: {Xo}x{Yo} outputs, pooling after it {pool}")

# the impact field: how much the loss depends on each output position
B = average_impacts(net, layer, train.images, train.labels, n_samples=512)
print("mean impact per row:", np.round(B.mean(axis=1) / B.max(), 2))

# %% sweep speedups
print(f"\n{'N':>4} {'speedup':>8} " + " ".join(f"{k:>9}" for k in ("uniform", "grid", "pooling", "impact")))
for N in (100, 64, 49, 36, 25):
    N = achievable_n("grid", Xo, Yo, N)
    row = []
    for kind in ("uniform", "grid", "pooling", "impact"):
        errs = []
        for seed in range(3):
            net.set_mask(layer, make_mask(kind, Xo, Yo, N, seed, weights=B, pool=pool))
            errs.append(net.evaluate(test.images, test.labels)[1] - err0)
        row.append(np.median(errs))
    net.set_mask(layer, None)
    print(f"{N:>4} {Xo * Yo / N:>7.2f}x " + " ".join(f"{v:>+9.3f}" for v in row))
