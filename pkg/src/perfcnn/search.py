"""Greedy per-layer perforation-rate search and Pareto fronts.

A configuration assigns every perforable conv layer a mask type, a seed and
a position on a rate ladder (``None`` meaning unperforated).  The greedy
search repeatedly moves one layer a single ladder step, choosing the layer
with the smallest error increase per unit of saved cost.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .bench import account, time_call
from .masks import MASK_TYPES, achievable_n, n_for_rate
from .network import Network, average_impacts, parse_rate

DEFAULT_LADDER: tuple[Fraction, ...] = (Fraction(1, 3),) + tuple(Fraction(k, k + 1) for k in range(1, 20))


def _fmt_rate(r: Fraction) -> str:
    return "0" if r == 0 else f"{r.numerator}/{r.denominator}"


@dataclass(frozen=True)
class PerforationConfig:
    """Per-layer mask type, ladder position and seed.

    ``levels[i]`` indexes ``ladder``; ``None`` leaves layer ``layers[i]``
    unperforated.
    """

    layers: tuple[int, ...]
    masks: tuple[str, ...]
    levels: tuple[int | None, ...]
    seeds: tuple[int, ...]
    ladder: tuple[Fraction, ...] = DEFAULT_LADDER

    def __post_init__(self):
        n = len(self.layers)
        if not (len(self.masks) == len(self.levels) == len(self.seeds) == n):
            raise ValueError("one mask type, level and seed per layer required")
        if len(set(self.layers)) != n:
            raise ValueError("duplicate layer in configuration")
        ladder = tuple(parse_rate(r) for r in self.ladder)
        if any(b <= a for a, b in zip(ladder, ladder[1:])) or not ladder or ladder[0] <= 0:
            raise ValueError("ladder must be a strictly increasing list of positive rates")
        object.__setattr__(self, "ladder", ladder)
        for m in self.masks:
            if m not in MASK_TYPES:
                raise ValueError(f"unknown mask type {m!r}")
        for k in self.levels:
            if k is not None and not 0 <= k < len(ladder):
                raise ValueError(f"rate index {k} outside ladder of {len(ladder)} rates")

    @classmethod
    def unperforated(cls, layers, mask="uniform", seed: int = 0, ladder=DEFAULT_LADDER) -> "PerforationConfig":
        layers = tuple(int(l) for l in layers)
        masks = tuple(mask[l] for l in layers) if isinstance(mask, dict) else (mask,) * len(layers)
        return cls(layers, masks, (None,) * len(layers), tuple(seed + i for i in range(len(layers))), tuple(ladder))

    def rate(self, layer: int) -> Fraction:
        k = self.levels[self.layers.index(layer)]
        return Fraction(0) if k is None else self.ladder[k]

    def rates(self) -> dict[int, Fraction]:
        return {l: self.rate(l) for l in self.layers}

    def level(self, layer: int) -> int | None:
        return self.levels[self.layers.index(layer)]

    def with_level(self, layer: int, level: int | None) -> "PerforationConfig":
        levels = list(self.levels)
        levels[self.layers.index(layer)] = level
        return replace(self, levels=tuple(levels))

    def steps_apart(self, other: "PerforationConfig") -> int:
        """Largest per-layer distance in ladder steps (unperforated counts as step -1)."""
        a = [-1 if k is None else k for k in self.levels]
        b = [-1 if k is None else k for k in other.levels]
        return max((abs(x - y) for x, y in zip(a, b)), default=0)

    def format(self) -> str:
        return "".join(f"layer={l} mask={m} r={_fmt_rate(self.rate(l))} seed={s}\n"
                       for l, m, s in zip(self.layers, self.masks, self.seeds))

    @classmethod
    def parse(cls, text: str, ladder=DEFAULT_LADDER) -> "PerforationConfig":
        ladder = tuple(parse_rate(r) for r in ladder)
        layers, masks, levels, seeds = [], [], [], []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                kv = dict(tok.split("=", 1) for tok in line.split())
                layer, mask, r = int(kv["layer"]), kv["mask"], parse_rate(kv["r"])
                seed = int(kv.get("seed", 0))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"config line {lineno}: {exc}") from None
            if r != 0 and r not in ladder:
                raise ValueError(f"config line {lineno}: rate {_fmt_rate(r)} is not on the ladder")
            layers.append(layer)
            masks.append(mask)
            levels.append(None if r == 0 else ladder.index(r))
            seeds.append(seed)
        return cls(tuple(layers), tuple(masks), tuple(levels), tuple(seeds), ladder)

    @classmethod
    def read(cls, path, ladder=DEFAULT_LADDER) -> "PerforationConfig":
        return cls.parse(Path(path).read_text(), ladder)

    def write(self, path) -> None:
        Path(path).write_text(self.format())


def apply_config(net: Network, config: PerforationConfig, X=None, y=None, interp: str = "nearest",
                 n_samples: int = 512, storage: str = "compact") -> None:
    """Regenerate and attach every layer's mask, in layer order.

    Impact masks are computed on the network with all earlier layers of the
    configuration already perforated, so they need ``X`` and ``y``.
    """
    for l in config.layers:
        net.set_mask(l, None)
    for l, kind, seed in sorted(zip(config.layers, config.masks, config.seeds)):
        r = config.rate(l)
        if r == 0:
            continue
        weights = None
        if kind == "impact":
            if X is None or y is None:
                raise ValueError("impact masks need data to estimate impacts")
            weights = average_impacts(net, l, X, y, n_samples)
        net.perforate(l, kind, r, seed=seed, interp=interp, impacts=weights, storage=storage)


def theoretical_cost(net: Network, config: PerforationConfig) -> int:
    """Conv multiplications of ``config`` without building any mask."""
    exact = {}
    for l, kind in zip(config.layers, config.masks):
        r = config.rate(l)
        if r:
            Xo, Yo = net.conv_grid(l)
            exact[l] = achievable_n(kind, Xo, Yo, n_for_rate(Xo * Yo, r))
    return account(net.spec, exact).conv_mults


@dataclass
class CandidateEvaluation:
    """Cost ``t`` and objective ``e`` (mean NLL) of one configuration."""

    config: PerforationConfig
    t: float
    e: float
    error: float
    t0: float | None = None
    e0: float | None = None

    @property
    def speedup(self) -> float:
        return self.t0 / self.t if self.t0 is not None else 1.0


def evaluation_subset(X, y, n: int = 256, seed: int = 0):
    """A fixed random subset of ``n`` samples for configuration scoring."""
    if len(X) == 0:
        raise ValueError("evaluation subset is empty")
    idx = np.sort(np.random.default_rng(seed).choice(len(X), size=min(n, len(X)), replace=False))
    return X[idx], y[idx]


def evaluate_config(net: Network, config: PerforationConfig, X, y, cost_model: str = "mults",
                    interp: str = "nearest", n_samples: int = 512, repetitions: int = 3,
                    baseline: CandidateEvaluation | None = None) -> CandidateEvaluation:
    """Attach ``config`` to ``net`` (in place) and measure ``(t, e)`` on ``(X, y)``."""
    if len(X) == 0:
        raise ValueError("evaluation subset is empty")
    apply_config(net, config, X, y, interp=interp, n_samples=n_samples)
    if cost_model == "mults":
        t = float(account(net).conv_mults)
    elif cost_model == "time":
        t = time_call(lambda: net.forward(X, keep=False), repetitions=repetitions).median
    else:
        raise ValueError(f"unknown cost model {cost_model!r}")
    e, err = net.evaluate(X, y)
    t0 = e0 = None
    if baseline is not None:
        t0, e0 = baseline.t, baseline.e
    return CandidateEvaluation(config, t, e, err, t0, e0)


def greedy_cost(e: float, e0: float, t: float, t0: float) -> float:
    """``(e - e0) / (t0 - t)``; only defined when the candidate saves cost."""
    if t >= t0:
        raise ValueError("candidate does not reduce cost")
    return (e - e0) / (t0 - t)


@dataclass
class TraceRow:
    step: int
    layer: int
    rate: Fraction
    t: float
    e: float
    cost: float


@dataclass
class GreedyResult:
    config: PerforationConfig
    trace: list[TraceRow]
    baseline: CandidateEvaluation
    final: CandidateEvaluation
    exhausted: bool
    candidates: list[CandidateEvaluation] = field(default_factory=list)

    @property
    def speedup(self) -> float:
        return self.baseline.t / self.final.t

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "layer", "rate", "t", "e", "cost"])
        for row in self.trace:
            w.writerow([row.step, row.layer, _fmt_rate(row.rate), f"{row.t:.10g}", f"{row.e:.10g}",
                        f"{row.cost:.10g}"])
        return buf.getvalue()


def greedy_configure(net: Network, X, y, target_speedup: float, cost_model: str = "mults",
                     mask="uniform", ladder=DEFAULT_LADDER, seed: int = 0, layers=None,
                     interp: str = "nearest", n_samples: int = 512, repetitions: int = 3,
                     max_steps: int | None = None) -> GreedyResult:
    """Greedy rate configuration on a copy of ``net``.

    Each step tries moving every layer one ladder step up and accepts the
    candidate with minimal ``(e - e0) / (t0 - t)``.  Stops once ``t0 / t``
    reaches ``target_speedup`` or no layer can move.  With the ``mults``
    cost model, ladder steps that do not lower the multiplication count
    (small grids where two rates round to the same N) are skipped over.
    """
    if target_speedup <= 1:
        raise ValueError("target speedup must exceed 1")
    work = net.clone()
    layers = work.spec.perforable_layers() if layers is None else list(layers)
    current = PerforationConfig.unperforated(layers, mask, seed, ladder)
    kw = dict(cost_model=cost_model, interp=interp, n_samples=n_samples, repetitions=repetitions)
    base = evaluate_config(work, current, X, y, **kw)
    base.t0, base.e0 = base.t, base.e
    t0, e0 = base.t, base.e
    trace: list[TraceRow] = []
    seen: list[CandidateEvaluation] = [base]
    final = base
    exhausted = False
    step = 0
    while t0 / final.t < target_speedup and (max_steps is None or step < max_steps):
        best = None
        for l in layers:
            k = current.level(l)
            nk = 0 if k is None else k + 1
            if cost_model == "mults":
                while nk < len(current.ladder) and theoretical_cost(work, current.with_level(l, nk)) >= final.t:
                    nk += 1
            if nk >= len(current.ladder):
                continue
            cand = evaluate_config(work, current.with_level(l, nk), X, y, baseline=base, **kw)
            seen.append(cand)
            if cand.t >= t0:
                continue
            cost = greedy_cost(cand.e, e0, cand.t, t0)
            if best is None or cost < best[0]:
                best = (cost, l, cand)
        if best is None:
            if step == 0:
                raise RuntimeError("no perforation candidate reduces the cost below the unperforated network")
            exhausted = True
            break
        cost, l, cand = best
        step += 1
        current = cand.config
        final = cand
        trace.append(TraceRow(step, l, current.rate(l), cand.t, cand.e, cost))
    apply_config(work, current, X, y, interp=interp, n_samples=n_samples)
    return GreedyResult(current, trace, base, final, exhausted, seen)


def pareto_front(points, key=None) -> list:
    """Non-dominated points under (maximise speedup, minimise e), sorted by speedup.

    ``points`` are ``(speedup, e)`` pairs or objects with ``speedup`` and
    ``e`` attributes; ``key`` overrides the extraction.  Exact duplicates
    are all kept since neither dominates the other.
    """
    points = list(points)
    if not points:
        raise ValueError("pareto_front of an empty list")
    if key is None:
        key = (lambda p: (p[0], p[1])) if isinstance(points[0], tuple) else (lambda p: (p.speedup, p.e))
    vals = [tuple(map(float, key(p))) for p in points]
    order = sorted(range(len(points)), key=lambda i: (-vals[i][0], vals[i][1]))
    front = []
    best_e = np.inf
    last = None
    for i in order:
        v = vals[i]
        if v[1] < best_e or v == last:
            front.append(i)
            best_e = min(best_e, v[1])
            last = v
    front.sort(key=lambda i: (vals[i][0], -vals[i][1]))
    return [points[i] for i in front]


def dominates(a: tuple[float, float], b: tuple[float, float]) -> bool:
    """``a`` is at least as fast and as accurate as ``b`` and strictly better in one."""
    return a[0] >= b[0] and a[1] <= b[1] and (a[0] > b[0] or a[1] < b[1])


def exhaustive_search(net: Network, X, y, ladder=DEFAULT_LADDER, mask="uniform", seed: int = 0,
                      layers=None, cost_model: str = "mults", interp: str = "nearest",
                      n_samples: int = 512) -> list[CandidateEvaluation]:
    """Evaluate every rate combination; only for networks with at most 3 perforable layers."""
    work = net.clone()
    layers = work.spec.perforable_layers() if layers is None else list(layers)
    if len(layers) > 3:
        raise ValueError("exhaustive enumeration is limited to 3 layers")
    start = PerforationConfig.unperforated(layers, mask, seed, ladder)
    kw = dict(cost_model=cost_model, interp=interp, n_samples=n_samples)
    base = evaluate_config(work, start, X, y, **kw)
    base.t0, base.e0 = base.t, base.e
    out = [base]
    choices = [None] + list(range(len(start.ladder)))
    for levels in itertools.product(choices, repeat=len(layers)):
        if all(k is None for k in levels):
            continue
        out.append(evaluate_config(work, replace(start, levels=tuple(levels)), X, y, baseline=base, **kw))
    return out


def near_front(result: CandidateEvaluation, evaluations: list[CandidateEvaluation], steps: int = 1) -> bool:
    """True when every evaluation dominating ``result`` is within ``steps`` ladder steps per layer."""
    p = (result.speedup, result.e)
    return all(ev.config.steps_apart(result.config) <= steps
               for ev in evaluations if dominates((ev.speedup, ev.e), p))
