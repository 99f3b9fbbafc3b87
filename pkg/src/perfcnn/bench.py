"""Cost accounting and wall-clock timing.

:func:`account` is static: it walks a :class:`NetworkSpec` and counts
multiplications and forward-activation bytes for a given assignment of
exact-position counts.  Timing helpers run single-threaded by default.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .lowering import count_mults
from .masks import PerforationMask
from .network import Network, NetworkSpec
from .perfconv import PerforatedConvLayer

CSV_COLUMNS = ("layer", "kind", "d", "S", "T", "groups", "positions", "exact_positions",
               "mults", "base_mults", "act_bytes", "base_act_bytes")


@dataclass
class LayerCost:
    layer: int
    kind: str
    d: int
    S: int
    T: int
    groups: int
    positions: int
    exact_positions: int
    mults: int
    base_mults: int
    act_bytes: int
    base_act_bytes: int


@dataclass
class TimingStats:
    median: float
    q1: float
    q3: float
    mean: float
    samples: list[float]
    threads: int
    flagged: bool = False

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1


@dataclass
class CostReport:
    layers: list[LayerCost]
    timing: TimingStats | None = None
    base_timing: TimingStats | None = None

    @property
    def conv_mults(self) -> int:
        return sum(l.mults for l in self.layers if l.kind == "conv")

    @property
    def base_conv_mults(self) -> int:
        return sum(l.base_mults for l in self.layers if l.kind == "conv")

    @property
    def total_mults(self) -> int:
        return sum(l.mults for l in self.layers)

    @property
    def act_bytes(self) -> int:
        return sum(l.act_bytes for l in self.layers)

    @property
    def base_act_bytes(self) -> int:
        return sum(l.base_act_bytes for l in self.layers)

    @property
    def theoretical_speedup(self) -> float:
        return self.base_conv_mults / self.conv_mults

    @property
    def memory_ratio(self) -> float:
        return self.base_act_bytes / self.act_bytes

    @property
    def empirical_speedup(self) -> float | None:
        if self.timing is None or self.base_timing is None:
            return None
        return self.base_timing.median / self.timing.median

    def to_csv(self) -> str:
        """Per-layer rows in :data:`CSV_COLUMNS` order, then a ``total`` row."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for l in self.layers:
            w.writerow([getattr(l, c) for c in CSV_COLUMNS])
        w.writerow(["total", "", "", "", "", "", "", "", self.total_mults,
                    sum(l.base_mults for l in self.layers), self.act_bytes, self.base_act_bytes])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["conv_mults", "base_conv_mults", "theoretical_speedup", "act_bytes", "base_act_bytes",
                "memory_ratio", "time_median", "time_iqr", "time_mean", "base_time_median",
                "empirical_speedup", "threads", "timer_flagged"]
        w.writerow(cols)
        t, bt = self.timing, self.base_timing
        emp = self.empirical_speedup
        w.writerow([self.conv_mults, self.base_conv_mults, f"{self.theoretical_speedup:.6f}",
                    self.act_bytes, self.base_act_bytes, f"{self.memory_ratio:.6f}",
                    "" if t is None else f"{t.median:.6e}", "" if t is None else f"{t.iqr:.6e}",
                    "" if t is None else f"{t.mean:.6e}", "" if bt is None else f"{bt.median:.6e}",
                    "" if emp is None else f"{emp:.4f}", "" if t is None else t.threads,
                    "" if t is None else int(t.flagged or (bt is not None and bt.flagged))])
        return buf.getvalue()

    def format_table(self) -> str:
        head = f"{'layer':>5} {'kind':<8} {'N/|Omega|':>13} {'mults':>14} {'mult x':>7} {'act bytes':>11} {'mem x':>6}"
        rows = [head, "-" * len(head)]
        for l in self.layers:
            if l.kind not in ("conv", "fc") and l.act_bytes == l.base_act_bytes:
                continue
            frac = f"{l.exact_positions}/{l.positions}" if l.positions else ""
            mx = f"{l.base_mults / l.mults:.2f}" if l.mults else ""
            rows.append(f"{l.layer:>5} {l.kind:<8} {frac:>13} {l.mults:>14,} {mx:>7} "
                        f"{l.act_bytes:>11,} {l.base_act_bytes / l.act_bytes:>6.2f}")
        rows.append(f"conv multiplications {self.conv_mults:,} (theoretical speedup {self.theoretical_speedup:.2f}x)")
        rows.append(f"activation bytes {self.act_bytes:,} (reduction {self.memory_ratio:.2f}x)")
        if self.timing is not None:
            t = self.timing
            rows.append(f"forward time median {t.median * 1e3:.3f} ms, IQR {t.iqr * 1e3:.3f} ms, "
                        f"mean {t.mean * 1e3:.3f} ms, {t.threads} thread(s)" + (" [timer-limited]" if t.flagged else ""))
        if self.empirical_speedup is not None:
            rows.append(f"empirical speedup {self.empirical_speedup:.2f}x")
        return "\n".join(rows)


def _count(entry, omega: int) -> int:
    if entry is None:
        return omega
    if isinstance(entry, PerforationMask):
        return entry.N
    return int(entry)


def account(spec: NetworkSpec | Network, exact=None, interp=None, storage=None, itemsize: int = 4) -> CostReport:
    """Static cost of a network under a perforation assignment.

    ``exact`` maps conv layer index to a mask or an exact-position count
    (missing means unperforated); with a :class:`Network` the attached masks
    are used.  A 1x1 convolution or ReLU that follows a compact,
    nearest-neighbour perforated output works on the exact positions only.
    """
    if isinstance(spec, Network):
        net = spec
        spec = net.spec
        if exact is None:
            exact = {i: m for i, m in net.masks().items() if m is not None}
        if interp is None:
            interp = {i: net.layers[i].conv.interpolation for i in exact}
        if storage is None:
            storage = {i: net.layers[i].conv.storage for i in exact}
        itemsize = net.dtype.itemsize
    exact = exact or {}
    interp = interp or {}
    storage = storage or {}
    costs = []
    compact_n = None  # exact positions carried by a compact nearest-neighbour activation
    for i, ((in_shape, out_shape), ls) in enumerate(zip(spec.shapes(), spec.layers)):
        out_size = int(np.prod(out_shape))
        base_bytes = out_size * itemsize
        if ls.kind == "conv":
            d, T, g = ls.get("d"), ls.get("t"), ls.get("groups", 1)
            S = in_shape[-1]
            omega = out_shape[0] * out_shape[1]
            pointwise = d == 1 and ls.get("stride", 1) == 1 and ls.get("pad", 0) == 0 and i not in exact
            if pointwise and compact_n is not None:
                n = compact_n
            else:
                n = _count(exact.get(i), omega)
                if n > omega:
                    raise ValueError(f"layer {i}: {n} exact positions exceed {omega}")
                compact_n = None
                if n < omega and storage.get(i, "compact") == "compact" and interp.get(i, "nearest") == "nearest":
                    compact_n = n
            mults = count_mults(d, S // g, T, n)
            base = count_mults(d, S // g, T, omega)
            act = (n * T if n < omega and (compact_n is not None or storage.get(i, "compact") == "compact")
                   else out_size) * itemsize
            costs.append(LayerCost(i, "conv", d, S, T, g, omega, n, mults, base, act, base_bytes))
        elif ls.kind == "relu" and compact_n is not None:
            C = out_shape[-1]
            costs.append(LayerCost(i, "relu", 0, C, C, 1, 0, compact_n, 0, 0, compact_n * C * itemsize, base_bytes))
        else:
            compact_n = None if ls.kind not in ("norm",) else compact_n
            mults = int(np.prod(in_shape)) * ls.get("t") if ls.kind == "fc" else 0
            costs.append(LayerCost(i, ls.kind, 0, in_shape[-1], out_shape[-1], 1, 0, 0,
                                   mults, mults, base_bytes, base_bytes))
    return CostReport(costs)


def _stats(samples: list[float], threads: int) -> TimingStats:
    arr = np.asarray(samples)
    q1, med, q3 = np.percentile(arr, [25, 50, 75])
    resolution = time.get_clock_info("perf_counter").resolution
    return TimingStats(float(med), float(q1), float(q3), float(arr.mean()), list(samples), threads,
                       flagged=bool(med < 1000 * resolution))


def time_call(fn, repetitions: int = 5, warmup: int = 1, threads: int = 1) -> TimingStats:
    """Median / IQR wall-clock of ``fn()`` with BLAS limited to ``threads`` workers."""
    if repetitions < 3:
        raise ValueError("need at least 3 repetitions for median and IQR")
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            fn()
        samples = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            fn()
            samples.append(time.perf_counter() - t0)
    return _stats(samples, threads)


def time_interleaved(fns, repetitions: int = 5, warmup: int = 1, threads: int = 1) -> list[TimingStats]:
    """Time several callables alternately, one call of each per repetition.

    Slow drift of the machine (frequency scaling, other load) then hits every
    callable alike, which makes the ratio of medians more stable than timing
    them one after the other.
    """
    if repetitions < 3:
        raise ValueError("need at least 3 repetitions for median and IQR")
    samples = [[] for _ in fns]
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            for fn in fns:
                fn()
        for _ in range(repetitions):
            for k, fn in enumerate(fns):
                t0 = time.perf_counter()
                fn()
                samples[k].append(time.perf_counter() - t0)
    return [_stats(s, threads) for s in samples]


def time_forward(net: Network, X, repetitions: int = 5, warmup: int = 1, threads: int = 1,
                 baseline: bool = True) -> CostReport:
    """Static accounting plus timed forward passes of ``net`` on batch ``X``.

    With ``baseline`` the same network without masks is timed too, giving the
    empirical speedup.
    """
    report = account(net)
    run = lambda: net.forward(X, keep=False)
    if not baseline:
        report.timing = time_call(run, repetitions, warmup, threads)
        return report
    base = net.clone()
    base.clear_masks()
    report.timing, report.base_timing = time_interleaved(
        [run, lambda: base.forward(X, keep=False)], repetitions, warmup, threads)
    return report


def time_conv_layer(U, K, mask: PerforationMask | None, repetitions: int = 7, warmup: int = 2,
                    threads: int = 1) -> TimingStats:
    """Time the lowered convolution (row gather plus GEMM) of a batch ``U``."""
    layer = PerforatedConvLayer(K, mask=mask)
    U = np.asarray(U)
    return time_call(lambda: layer.compute_exact(U), repetitions, warmup, threads)


def layer_speedup(U, K, mask: PerforationMask, repetitions: int = 7, warmup: int = 2,
                  threads: int = 1) -> tuple[float, float, TimingStats, TimingStats]:
    """``(empirical, theoretical, perforated timing, dense timing)`` for one layer."""
    U = np.asarray(U)
    dense_layer, perf_layer = PerforatedConvLayer(K), PerforatedConvLayer(K, mask=mask)
    perf, dense = time_interleaved([lambda: perf_layer.compute_exact(U), lambda: dense_layer.compute_exact(U)],
                                   repetitions, warmup, threads)
    theoretical = mask.positions.size / mask.N
    return dense.median / perf.median, theoretical, perf, dense
