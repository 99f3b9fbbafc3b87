import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perfcnn.bench import account
from perfcnn.network import Network, NetworkSpec
from perfcnn.search import (DEFAULT_LADDER, CandidateEvaluation, PerforationConfig, apply_config,
                            dominates, evaluate_config, evaluation_subset, exhaustive_search,
                            greedy_configure, greedy_cost, near_front, pareto_front, theoretical_cost)

ONE_LAYER = "input x=10 y=10 s=2 classes=3\nconv d=3 t=4 pad=1\nrelu\ngap\nfc t=3\n"
SHORT = [Fraction(1, 3), Fraction(1, 2), Fraction(2, 3), Fraction(3, 4), Fraction(4, 5), Fraction(5, 6)]


def data(n=24, size=10, s=2, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, size, size, s)).astype(np.float32), rng.integers(0, classes, n)


def test_default_ladder():
    assert len(DEFAULT_LADDER) == 20
    assert DEFAULT_LADDER[:3] == (Fraction(1, 3), Fraction(1, 2), Fraction(2, 3))
    assert DEFAULT_LADDER[-1] == Fraction(19, 20)


def test_config_roundtrip(tmp_path):
    cfg = PerforationConfig((0, 5, 10), ("uniform", "grid", "impact"), (None, 3, 19), (7, 8, 9))
    text = cfg.format()
    assert text.splitlines()[1] == "layer=5 mask=grid r=3/4 seed=8"
    assert text.splitlines()[0] == "layer=0 mask=uniform r=0 seed=7"
    assert PerforationConfig.parse(text) == cfg
    cfg.write(tmp_path / "a.cfg")
    again = PerforationConfig.read(tmp_path / "a.cfg")
    again.write(tmp_path / "b.cfg")
    assert (tmp_path / "a.cfg").read_bytes() == (tmp_path / "b.cfg").read_bytes()


def test_config_validation():
    with pytest.raises(ValueError, match="ladder"):
        PerforationConfig.parse("layer=0 mask=uniform r=3/7 seed=0\n")
    with pytest.raises(ValueError, match="outside"):
        PerforationConfig((0,), ("uniform",), (20,), (0,))
    with pytest.raises(ValueError, match="duplicate"):
        PerforationConfig((0, 0), ("uniform",) * 2, (None, None), (0, 1))
    with pytest.raises(ValueError, match="mask type"):
        PerforationConfig((0,), ("blobs",), (None,), (0,))
    with pytest.raises(ValueError, match="line 1"):
        PerforationConfig.parse("layer=0 r=1/2\n")


def test_steps_apart():
    a = PerforationConfig((0, 3), ("uniform",) * 2, (None, 2), (0, 1))
    assert a.steps_apart(a.with_level(3, 3)) == 1
    assert a.steps_apart(a.with_level(0, 0)) == 1
    assert a.steps_apart(a.with_level(0, 1)) == 2


def test_cost_arithmetic_by_hand():
    e0, t0 = 1.0, 100.0
    a = greedy_cost(1.1, e0, 60.0, t0)
    b = greedy_cost(1.3, e0, 40.0, t0)
    assert a == pytest.approx(0.0025)
    assert b == pytest.approx(0.005)
    assert min([("A", a), ("B", b)], key=lambda p: p[1])[0] == "A"
    with pytest.raises(ValueError):
        greedy_cost(1.0, e0, 100.0, t0)


def test_evaluate_config_zero_rates_is_baseline():
    net = Network(NetworkSpec.parse(ONE_LAYER), seed=1)
    X, y = data()
    cfg = PerforationConfig.unperforated([0])
    ev = evaluate_config(net.clone(), cfg, X, y)
    e0, _ = net.evaluate(X, y)
    assert ev.t == account(net.spec).conv_mults
    assert ev.e == e0
    with pytest.raises(ValueError, match="empty"):
        evaluate_config(net, cfg, X[:0], y[:0])


def test_raising_a_rate_never_increases_theoretical_cost(trained_two_conv):
    net, _, _ = trained_two_conv
    for kind in ("uniform", "grid", "pooling", "impact"):
        cfg = PerforationConfig.unperforated([0, 3], kind)
        for l in (0, 3):
            prev = theoretical_cost(net, cfg)
            for k in range(len(DEFAULT_LADDER)):
                t = theoretical_cost(net, cfg.with_level(l, k))
                assert t <= prev
                prev = t


def test_theoretical_cost_matches_applied_masks(trained_two_conv):
    net, X, y = trained_two_conv
    work = net.clone()
    for kind in ("uniform", "grid"):
        cfg = PerforationConfig((0, 3), ("pooling" if kind == "uniform" else kind, kind), (4, 7), (1, 2))
        apply_config(work, cfg, X, y)
        assert account(work).conv_mults == theoretical_cost(work, cfg)


def test_heavy_perforation_raises_objective(trained_two_conv):
    net, X, y = trained_two_conv
    e0, _ = net.evaluate(X, y)
    es = []
    for seed in range(5):
        cfg = PerforationConfig((0, 3), ("uniform",) * 2, (15, 15), (seed, seed + 100))
        es.append(evaluate_config(net.clone(), cfg, X, y).e)
    assert np.median(es) >= e0


def ladder_scan(net, layer, ladder, target):
    """Walk the ladder one rate at a time, skipping rates that do not lower the count."""
    t0 = account(net.spec).conv_mults
    t, rates = t0, []
    for k, r in enumerate(ladder):
        if t0 / t >= target:
            break
        cfg = PerforationConfig.unperforated([layer], ladder=ladder).with_level(layer, k)
        tk = theoretical_cost(net, cfg)
        if tk < t:
            t = tk
            rates.append(r)
    return rates, t


@pytest.mark.parametrize("target", [1.5, 3.0, 7.0])
def test_single_layer_greedy_is_a_ladder_scan(target):
    net = Network(NetworkSpec.parse(ONE_LAYER), seed=2)
    X, y = data()
    res = greedy_configure(net, X, y, target)
    rates, t = ladder_scan(net, 0, DEFAULT_LADDER, target)
    assert [row.rate for row in res.trace] == rates
    assert res.final.t == t
    assert [row.layer for row in res.trace] == [0] * len(rates)
    assert res.speedup >= target


def test_greedy_exhaustion_notice():
    net = Network(NetworkSpec.parse(ONE_LAYER), seed=2)
    X, y = data()
    res = greedy_configure(net, X, y, 1000.0, ladder=SHORT)
    assert res.exhausted
    assert res.speedup < 1000.0
    assert res.config.level(0) == len(SHORT) - 1


def test_greedy_trace_properties(trained_two_conv):
    net, X, y = trained_two_conv
    res = greedy_configure(net, X, y, 3.0, ladder=SHORT)
    ts = [res.baseline.t] + [row.t for row in res.trace]
    assert all(b < a for a, b in zip(ts, ts[1:]))
    assert res.speedup >= 3.0 or res.exhausted
    assert all(np.isfinite(row.cost) for row in res.trace)
    lines = res.trace_csv().splitlines()
    assert lines[0] == "step,layer,rate,t,e,cost"
    assert len(lines) == len(res.trace) + 1
    # the input network is not modified
    assert all(m is None for m in net.masks().values())


def test_greedy_is_deterministic(trained_two_conv):
    net, X, y = trained_two_conv
    a = greedy_configure(net, X, y, 2.0, ladder=SHORT, seed=3)
    b = greedy_configure(net, X, y, 2.0, ladder=SHORT, seed=3)
    assert a.config == b.config
    assert a.trace_csv() == b.trace_csv()


def test_greedy_selects_minimal_cost_candidate(trained_two_conv):
    net, X, y = trained_two_conv
    res = greedy_configure(net, X, y, 1.2, ladder=SHORT, max_steps=1)
    step = [c for c in res.candidates[1:]]
    costs = [greedy_cost(c.e, res.baseline.e, c.t, res.baseline.t) for c in step]
    assert res.trace[0].cost == pytest.approx(min(costs))


def test_greedy_errors():
    net = Network(NetworkSpec.parse(ONE_LAYER), seed=2)
    X, y = data()
    with pytest.raises(ValueError, match="exceed 1"):
        greedy_configure(net, X, y, 1.0)
    tiny = Network(NetworkSpec.parse("input x=3 y=3 s=1 classes=2\nconv d=3 t=2\ngap\n"), seed=0)
    with pytest.raises(RuntimeError, match="no perforation candidate"):
        greedy_configure(tiny, np.zeros((2, 3, 3, 1), np.float32), np.array([0, 1]), 2.0)


def test_evaluation_subset_fixed_by_seed():
    X, y = data(n=400)
    a, ya = evaluation_subset(X, y, 256, seed=4)
    b, yb = evaluation_subset(X, y, 256, seed=4)
    assert len(a) == 256 and np.array_equal(a, b) and np.array_equal(ya, yb)
    c, _ = evaluation_subset(X, y, 256, seed=5)
    assert not np.array_equal(a, c)


def brute_front(points):
    return [p for p in points if not any(dominates(q, p) for q in points)]


def test_pareto_small_cases():
    assert pareto_front([(2.0, 1.1)]) == [(2.0, 1.1)]
    assert pareto_front([(2.0, 1.1), (2.0, 1.3)]) == [(2.0, 1.1)]
    assert pareto_front([(1.0, 1.0), (1.0, 1.0)]) == [(1.0, 1.0), (1.0, 1.0)]
    with pytest.raises(ValueError):
        pareto_front([])


@pytest.mark.parametrize("seed", range(5))
def test_pareto_random_cloud_matches_quadratic_oracle(seed):
    rng = np.random.default_rng(seed)
    pts = [tuple(p) for p in np.round(rng.uniform(1, 5, size=(100, 2)), 1)]
    front = pareto_front(pts)
    assert sorted(front) == sorted(brute_front(pts))
    assert [p[0] for p in front] == sorted(p[0] for p in front)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 6), st.integers(0, 6)), min_size=1, max_size=30))
def test_pareto_properties(raw):
    pts = [(float(a), float(b)) for a, b in raw]
    front = pareto_front(pts)
    assert not any(dominates(p, q) for p, q in itertools.permutations(front, 2))
    for p in pts:
        assert p in front or any(dominates(q, p) for q in front)


def test_pareto_on_evaluations():
    cfg = PerforationConfig.unperforated([0])
    evs = [CandidateEvaluation(cfg, t, e, 0.0, 100.0, 1.0) for t, e in [(50, 1.2), (50, 1.1), (25, 1.5)]]
    front = pareto_front(evs)
    assert [(f.t, f.e) for f in front] == [(50, 1.1), (25, 1.5)]


def test_exhaustive_and_near_front(trained_two_conv):
    net, X, y = trained_two_conv
    ladder = SHORT[:3]
    evs = exhaustive_search(net, X, y, ladder=ladder)
    assert len(evs) == (len(ladder) + 1) ** 2
    assert len({ev.config.levels for ev in evs}) == len(evs)
    front = pareto_front(evs)
    for ev in front:
        assert near_front(ev, evs, steps=0)
    # a point dominated by something far away on the ladder is not near the front
    worst = max(evs, key=lambda ev: ev.e)
    far = [ev for ev in evs if dominates((ev.speedup, ev.e), (worst.speedup, worst.e))
           and ev.config.steps_apart(worst.config) > 1]
    assert near_front(worst, evs, steps=1) == (not far)
    with pytest.raises(ValueError, match="3 layers"):
        exhaustive_search(net, X, y, layers=[0, 1, 2, 3])
