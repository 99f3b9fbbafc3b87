"""
Choosing a rate for every layer
===============================

Greedy search moves one layer at a time up a ladder of perforation rates,
picking the move with the least loss increase per multiplication saved.
On a two-conv network we can compare it with trying every combination.
"""

from fractions import Fraction

from perfcnn.data import synthetic_shapes
from perfcnn.network import Network, TrainState, sgd_finetune, toy_two_conv
from perfcnn.search import evaluation_subset, exhaustive_search, greedy_configure, near_front, pareto_front

ds = synthetic_shapes(1200, size=12, channels=2, classes=4, seed=1, jitter=1.5)
train, held = ds.split(1000)
net = Network(toy_two_conv(), seed=0)
sgd_finetune(net, train.images, train.labels, 15, TrainState(lr=0.02, seed=0))
X, y = evaluation_subset(held.images, held.labels, 200, seed=0)

ladder = [Fraction(1, 3), Fraction(1, 2), Fraction(2, 3), Fraction(3, 4), Fraction(4, 5), Fraction(5, 6)]

# %% every pair of rates
evals = exhaustive_search(net, X, y, ladder=ladder)
print(f"{len(evals)} configurations; Pareto front (speedup, mean NLL, rates):")
for ev in pareto_front(evals):
    rates = ", ".join(str(r) for r in ev.config.rates().values())
    print(f"  {ev.speedup:5.2f}x  {ev.e:.4f}  [{rates}]")

# %% greedy, for a few targets
for target in (1.5, 2.0, 3.0):
    res = greedy_configure(net, X, y, target, ladder=ladder)
    print(f"\ntarget {target}x: reached {res.speedup:.2f}x, e {res.baseline.e:.4f} -> {res.final.e:.4f}, "
          f"near the front: {near_front(res.final, evals)}")
    print(res.trace_csv(), end="")
print("\nfinal configuration:")
print(res.config.format(), end="")
