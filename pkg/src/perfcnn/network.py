"""A small trainable CNN graph whose convolutions can be perforated.

Activations are channels-last batches ``(B, X, Y, C)``.  A perforated
convolution with compact storage hands a :class:`CompactActivation` to the
next layer; ReLU and 1x1 convolutions consume it without densifying when
the interpolation is nearest-neighbour (they commute with a gather), every
other layer reads it through the interpolation plan.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ShapeError, kernel_from_bytes, kernel_to_bytes
from .masks import PerforationMask, make_mask, n_for_rate, pool_windows, top_n_by_weight
from .perfconv import CompactActivation, PerforatedConvLayer, _canonical_interp


# --- network description ---------------------------------------------------------

LAYER_KINDS = ("conv", "relu", "maxpool", "avgpool", "gap", "fc", "norm")
_INT_KEYS = ("d", "s", "t", "stride", "pad", "groups", "size", "seed")


def parse_rate(text) -> Fraction:
    """Exact perforation rate from ``'4/5'``, ``'0.75'`` or a number."""
    r = Fraction(str(text)) if not isinstance(text, Fraction) else text
    if not 0 <= r < 1:
        raise ValueError(f"perforation rate must lie in [0, 1), got {text}")
    return r


@dataclass
class Perforation:
    """Perforation attached to one convolution: mask generator, rate, seed, interpolation."""

    mask: str
    rate: Fraction
    seed: int = 0
    interp: str = "nearest"

    def __post_init__(self):
        self.rate = parse_rate(self.rate)
        self.interp = _canonical_interp(self.interp)


@dataclass
class LayerSpec:
    kind: str
    attrs: dict = field(default_factory=dict)
    perf: Perforation | None = None

    def get(self, key, default=None):
        return self.attrs.get(key, default)


@dataclass
class NetworkSpec:
    """Input geometry, class count and an ordered layer list."""

    input_shape: tuple[int, int, int]
    classes: int
    layers: list[LayerSpec]
    name: str = ""

    # -- shapes ------------------------------------------------------------------

    def shapes(self) -> list[tuple[tuple, tuple]]:
        """``(input_shape, output_shape)`` per layer; raises on any incompatibility."""
        shape: tuple = tuple(self.input_shape)
        out = []
        for i, layer in enumerate(self.layers):
            try:
                new = _layer_out_shape(layer, shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
            out.append((shape, new))
            shape = new
        if shape != (self.classes,):
            raise ShapeError(f"network output {shape} does not match {self.classes} classes")
        return out

    def conv_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind == "conv"]

    def perforable_layers(self) -> list[int]:
        """Convolutions with a spatial kernel (1x1 convolutions are left alone)."""
        return [i for i, l in enumerate(self.layers) if l.kind == "conv" and l.get("d") > 1]

    def conv_output_grid(self, index: int) -> tuple[int, int]:
        layer = self.layers[index]
        if layer.kind != "conv":
            raise ValueError(f"layer {index} is {layer.kind}, not conv")
        return self.shapes()[index][1][:2]

    def pooling_after(self, index: int) -> tuple[int, int, int] | None:
        """Geometry of the first pooling layer reached through pointwise layers only."""
        for layer in self.layers[index + 1:]:
            if layer.kind in ("relu", "norm") or (layer.kind == "conv" and layer.get("d") == 1
                                                  and layer.get("stride", 1) == 1 and layer.get("pad", 0) == 0):
                continue
            if layer.kind in ("maxpool", "avgpool"):
                return layer.get("size"), layer.get("stride", layer.get("size")), layer.get("pad", 0)
            return None
        return None

    # -- text format -------------------------------------------------------------

    def format(self) -> str:
        X, Y, S = self.input_shape
        lines = [f"input x={X} y={Y} s={S} classes={self.classes}"]
        if self.name:
            lines.insert(0, f"# {self.name}")
        shapes = self.shapes()
        for (in_shape, _), layer in zip(shapes, self.layers):
            parts = [layer.kind]
            attrs = dict(layer.attrs)
            if layer.kind == "conv":
                attrs.setdefault("s", in_shape[-1])
                parts += [f"{key}={attrs[key]}" for key in ("d", "s", "t", "stride", "pad", "groups") if key in attrs]
            else:
                for key, val in attrs.items():
                    parts.append(f"{key}={val}")
            if layer.perf is not None:
                p = layer.perf
                parts += [f"perf={p.mask}", f"r={p.rate}", f"seed={p.seed}"]
                if p.interp != "nearest":
                    parts.append(f"interp={p.interp}")
            lines.append(" ".join(parts))
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "NetworkSpec":
        name = ""
        header = None
        layers: list[LayerSpec] = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if header is None and not name:
                    name = line[1:].strip()
                continue
            kind, *rest = line.split()
            kv = {}
            for tok in rest:
                if "=" not in tok:
                    raise ValueError(f"line {lineno}: expected key=value, got {tok!r}")
                k, v = tok.split("=", 1)
                kv[k] = v
            if kind == "input":
                header = kv
                continue
            if header is None:
                raise ValueError(f"line {lineno}: layers must follow the input line")
            if kind not in LAYER_KINDS:
                raise ValueError(f"line {lineno}: unknown layer kind {kind!r}")
            perf = None
            if "perf" in kv:
                if kind != "conv":
                    raise ValueError(f"line {lineno}: perforation only applies to conv layers")
                perf = Perforation(kv.pop("perf"), parse_rate(kv.pop("r", "0")), int(kv.pop("seed", 0)),
                                   kv.pop("interp", "nearest"))
            attrs = {}
            for k, v in kv.items():
                if k not in _INT_KEYS:
                    raise ValueError(f"line {lineno}: unknown attribute {k!r}")
                attrs[k] = int(v)
            layers.append(LayerSpec(kind, attrs, perf))
        if header is None:
            raise ValueError("missing input line")
        spec = cls((int(header["x"]), int(header["y"]), int(header["s"])), int(header["classes"]), layers, name)
        for i, layer in enumerate(layers):
            if layer.kind == "conv" and "s" in layer.attrs:
                expected = spec.shapes()[i][0][-1]
                if layer.attrs["s"] != expected:
                    raise ShapeError(f"layer {i}: declares s={layer.attrs['s']} but receives {expected} channels")
        spec.shapes()
        return spec

    @classmethod
    def read(cls, path) -> "NetworkSpec":
        return cls.parse(Path(path).read_text())

    def write(self, path) -> None:
        Path(path).write_text(self.format())


def _layer_out_shape(layer: LayerSpec, shape: tuple) -> tuple:
    k = layer.kind
    if k in ("relu", "norm"):
        return shape
    if k == "fc":
        return (layer.get("t"),)
    if len(shape) != 3:
        raise ShapeError(f"expects a spatial input, got {shape}")
    X, Y, C = shape
    if k == "conv":
        d, t = layer.get("d"), layer.get("t")
        if d is None or t is None:
            raise ShapeError("conv needs d= and t=")
        s, p, g = layer.get("stride", 1), layer.get("pad", 0), layer.get("groups", 1)
        if "s" in layer.attrs and layer.attrs["s"] != C:
            raise ShapeError(f"declares s={layer.attrs['s']} but receives {C} channels")
        if C % g or t % g:
            raise ShapeError(f"channels {C}->{t} not divisible by groups={g}")
        if X + 2 * p < d or Y + 2 * p < d:
            raise ShapeError(f"input {X}x{Y} smaller than kernel {d}")
        return ((X + 2 * p - d) // s + 1, (Y + 2 * p - d) // s + 1, t)
    if k in ("maxpool", "avgpool"):
        size = layer.get("size")
        stride, pad = layer.get("stride", size), layer.get("pad", 0)
        try:
            return (pool_windows(X, size, stride, pad), pool_windows(Y, size, stride, pad), C)
        except ValueError as exc:
            raise ShapeError(str(exc)) from None
    if k == "gap":
        return (C,)
    raise ShapeError(f"unknown layer kind {k}")


# --- layers -----------------------------------------------------------------------

class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._in_plan = None

    def _read(self, x):
        if isinstance(x, CompactActivation):
            self._in_plan = x.plan
            return x.densify()
        self._in_plan = None
        return x

    def _unread(self, g):
        if self._in_plan is not None:
            return self._in_plan.reduce(g)
        return g

    def clear(self):
        self._in_plan = None


class Conv(Layer):
    kind = "conv"

    def __init__(self, d, s, t, stride=1, pad=0, groups=1, rng=None, dtype=np.float32):
        super().__init__()
        if groups != 1:
            raise NotImplementedError("grouped convolution is only supported for cost accounting")
        rng = rng or np.random.default_rng(0)
        std = math.sqrt(2.0 / (d * d * s))
        self.params["W"] = (rng.standard_normal((d, d, s, t)) * std).astype(dtype)
        self.params["b"] = np.zeros(t, dtype=dtype)
        self.conv = PerforatedConvLayer(self.params["W"], bias=self.params["b"], stride=stride, pad=pad)
        self.out_value = None
        self.out_grad = None
        self._pointwise = None
        self.keep = True

    @property
    def d(self) -> int:
        return self.params["W"].shape[0]

    @property
    def is_pointwise(self) -> bool:
        return self.d == 1 and self.conv.stride == 1 and self.conv.pad == 0 and self.conv.mask is None

    def _sync(self):
        self.conv.kernel = self.params["W"]
        self.conv.bias = self.params["b"]

    def forward(self, x):
        self._sync()
        W, b = self.params["W"], self.params["b"]
        if isinstance(x, CompactActivation) and x.plan.is_selection and self.is_pointwise:
            vals = x.values
            out = vals @ W[0, 0] + b
            self._pointwise = vals
            self._in_plan = None
            self.out_value = out
            return CompactActivation(out, x.plan)
        self._pointwise = None
        dense = self._read(x)
        out = self.conv.forward(dense, keep=self.keep)
        self.out_value = out.values if isinstance(out, CompactActivation) else out.reshape(out.shape[0], -1, out.shape[-1])
        return out

    def backward(self, g, need_input_grad=True):
        W = self.params["W"]
        if self._pointwise is not None:
            vals = self._pointwise
            B, N, S = vals.shape
            g2 = g.reshape(B * N, -1)
            self.out_grad = g
            self.grads["W"] = (vals.reshape(B * N, S).T @ g2).reshape(W.shape)
            self.grads["b"] = g2.sum(axis=0)
            return (g @ W[0, 0].T) if need_input_grad else None
        gI, dK, dU, db = self.conv.backward(g, need_input_grad=need_input_grad)
        self.out_grad = gI
        self.grads["W"] = dK
        self.grads["b"] = db
        return self._unread(dU) if need_input_grad else None

    def clear(self):
        super().clear()
        self.conv._cache = None
        self._pointwise = None
        self.out_value = None
        self.out_grad = None


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        if isinstance(x, CompactActivation) and x.plan.is_selection:
            self._in_plan = None
            self._mask = x.values > 0
            return CompactActivation(x.values * self._mask, x.plan)
        x = self._read(x)
        self._mask = x > 0
        return x * self._mask

    def backward(self, g, need_input_grad=True):
        return self._unread(g * self._mask)


class Norm(Layer):
    """Placeholder for local response normalisation: identity, no multiplications counted."""

    kind = "norm"

    def forward(self, x):
        return x

    def backward(self, g, need_input_grad=True):
        return g


class _Pool(Layer):
    def __init__(self, size, stride=None, pad=0):
        super().__init__()
        self.size = size
        self.stride = stride or size
        self.pad = pad

    def _geometry(self, X, Y):
        nx = pool_windows(X, self.size, self.stride, self.pad)
        ny = pool_windows(Y, self.size, self.stride, self.pad)
        ex = (nx - 1) * self.stride + self.size
        ey = (ny - 1) * self.stride + self.size
        return nx, ny, ex, ey

    def _padded(self, x, fill):
        B, X, Y, C = x.shape
        nx, ny, ex, ey = self._geometry(X, Y)
        p = self.pad
        xp = np.full((B, ex, ey, C), fill, dtype=x.dtype)
        hx, hy = min(X, ex - p), min(Y, ey - p)
        xp[:, p:p + hx, p:p + hy] = x[:, :hx, :hy]
        return xp, nx, ny

    def _windows(self, xp):
        s = self.stride
        win = sliding_window_view(xp, (self.size, self.size), axis=(1, 2))[:, ::s, ::s]
        return win  # (B, nx, ny, C, k, k)


class MaxPool(_Pool):
    kind = "maxpool"

    def forward(self, x):
        x = self._read(x)
        self._shape = x.shape
        xp, nx, ny = self._padded(x, -np.inf)
        win = self._windows(xp)
        B, _, _, C = x.shape
        flat = win.reshape(B, nx, ny, C, -1)
        self._arg = flat.argmax(axis=-1)
        return np.take_along_axis(flat, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, g, need_input_grad=True):
        B, X, Y, C = self._shape
        nx, ny, ex, ey = self._geometry(X, Y)
        s, k = self.stride, self.size
        gp = np.zeros((B, ex, ey, C), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                hit = self._arg == i * k + j
                gp[:, i:i + (nx - 1) * s + 1:s, j:j + (ny - 1) * s + 1:s] += g * hit
        p = self.pad
        out = np.zeros((B, X, Y, C), dtype=g.dtype)
        hx, hy = min(X, ex - p), min(Y, ey - p)
        out[:, :hx, :hy] = gp[:, p:p + hx, p:p + hy]
        return self._unread(out)


class AvgPool(_Pool):
    """Average over the window part inside the input (Caffe ceil-mode windows)."""

    kind = "avgpool"

    def forward(self, x):
        x = self._read(x)
        self._shape = x.shape
        xp, nx, ny = self._padded(x, 0.0)
        ones, _, _ = self._padded(np.ones((1,) + x.shape[1:3] + (1,), dtype=x.dtype), 0.0)
        self._count = self._windows(ones).sum(axis=(-2, -1))  # (1, nx, ny, 1)
        return self._windows(xp).sum(axis=(-2, -1)) / self._count

    def backward(self, g, need_input_grad=True):
        B, X, Y, C = self._shape
        nx, ny, ex, ey = self._geometry(X, Y)
        s, k = self.stride, self.size
        gs = g / self._count
        gp = np.zeros((B, ex, ey, C), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gp[:, i:i + (nx - 1) * s + 1:s, j:j + (ny - 1) * s + 1:s] += gs
        p = self.pad
        out = np.zeros((B, X, Y, C), dtype=g.dtype)
        hx, hy = min(X, ex - p), min(Y, ey - p)
        out[:, :hx, :hy] = gp[:, p:p + hx, p:p + hy]
        return self._unread(out)


class GlobalAvgPool(Layer):
    kind = "gap"

    def forward(self, x):
        x = self._read(x)
        self._shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, g, need_input_grad=True):
        B, X, Y, C = self._shape
        out = np.broadcast_to(g[:, None, None, :] / (X * Y), self._shape).astype(g.dtype)
        return self._unread(out)


class FC(Layer):
    kind = "fc"

    def __init__(self, n_in, n_out, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.params["W"] = (rng.standard_normal((n_in, n_out)) * math.sqrt(2.0 / n_in)).astype(dtype)
        self.params["b"] = np.zeros(n_out, dtype=dtype)

    def forward(self, x):
        x = self._read(x)
        self._shape = x.shape
        self._x = x.reshape(x.shape[0], -1)
        return self._x @ self.params["W"] + self.params["b"]

    def backward(self, g, need_input_grad=True):
        self.grads["W"] = self._x.T @ g
        self.grads["b"] = g.sum(axis=0)
        if not need_input_grad:
            return None
        return self._unread((g @ self.params["W"].T).reshape(self._shape))


# --- loss ---------------------------------------------------------------------------

def softmax_nll(logits, labels):
    """Per-sample negative log-likelihood and softmax probabilities."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    nll = -logp[np.arange(len(labels)), labels]
    return nll, np.exp(logp)


@dataclass
class ForwardResult:
    logits: np.ndarray
    probs: np.ndarray | None
    loss: float | None
    per_sample: np.ndarray | None
    activations: list
    labels: np.ndarray | None = None
    state_id: int = 0

    @property
    def predictions(self) -> np.ndarray:
        return self.logits.argmax(axis=1)

    @property
    def activation_bytes(self) -> int:
        return sum(a.nbytes for a in self.activations)


class Network:
    """Executable network built from a :class:`NetworkSpec`."""

    def __init__(self, spec: NetworkSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.layers: list[Layer] = []
        for (in_shape, _), ls in zip(spec.shapes(), spec.layers):
            self.layers.append(self._build(ls, in_shape, rng))
        self._state_id = 0
        self._fresh = None

    def _build(self, ls: LayerSpec, in_shape, rng) -> Layer:
        k = ls.kind
        if k == "conv":
            return Conv(ls.get("d"), in_shape[-1], ls.get("t"), ls.get("stride", 1), ls.get("pad", 0),
                        ls.get("groups", 1), rng, self.dtype)
        if k == "relu":
            return ReLU()
        if k == "norm":
            return Norm()
        if k == "maxpool":
            return MaxPool(ls.get("size"), ls.get("stride"), ls.get("pad", 0))
        if k == "avgpool":
            return AvgPool(ls.get("size"), ls.get("stride"), ls.get("pad", 0))
        if k == "gap":
            return GlobalAvgPool()
        if k == "fc":
            return FC(int(np.prod(in_shape)), ls.get("t"), rng, self.dtype)
        raise ValueError(f"unknown layer kind {k}")

    # -- parameters -----------------------------------------------------------------

    def parameters(self):
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                yield i, name, arr

    def num_parameters(self) -> int:
        return sum(a.size for _, _, a in self.parameters())

    def get_weights(self) -> dict[tuple[int, str], np.ndarray]:
        return {(i, n): a.copy() for i, n, a in self.parameters()}

    def set_weights(self, weights: dict) -> None:
        for (i, n), a in weights.items():
            cur = self.layers[i].params[n]
            if cur.shape != np.shape(a):
                raise ShapeError(f"layer {i} {n}: expected {cur.shape}, got {np.shape(a)}")
            self.layers[i].params[n] = np.array(a, dtype=self.dtype)

    def astype(self, dtype) -> "Network":
        net = self.clone()
        net.dtype = np.dtype(dtype)
        for layer in net.layers:
            for n in layer.params:
                layer.params[n] = layer.params[n].astype(dtype)
        return net

    def clone(self) -> "Network":
        for layer in self.layers:
            layer.clear()
        return copy.deepcopy(self)

    # -- perforation ----------------------------------------------------------------

    def conv_grid(self, index: int) -> tuple[int, int]:
        return self.spec.conv_output_grid(index)

    def set_mask(self, index: int, mask: PerforationMask | None, interp: str = "nearest",
                 storage: str = "compact") -> None:
        layer = self.layers[index]
        if not isinstance(layer, Conv):
            raise ValueError(f"layer {index} is {layer.kind}, not conv")
        if mask is not None and mask.shape != self.conv_grid(index):
            raise ShapeError(f"mask {mask.shape} does not match layer {index} output {self.conv_grid(index)}")
        layer.conv.storage = storage
        layer.conv.set_mask(mask, interp)

    def masks(self) -> dict[int, PerforationMask | None]:
        return {i: l.conv.mask for i, l in enumerate(self.layers) if isinstance(l, Conv)}

    def perforate(self, index: int, kind: str, rate, seed: int = 0, interp: str = "nearest",
                  impacts=None, storage: str = "compact") -> PerforationMask | None:
        """Attach a generated mask at the given rate; rate 0 removes perforation."""
        rate = parse_rate(rate)
        if rate == 0:
            self.set_mask(index, None)
            return None
        Xo, Yo = self.conv_grid(index)
        N = n_for_rate(Xo * Yo, rate)
        pool = self.spec.pooling_after(index)
        mask = make_mask(kind, Xo, Yo, N, seed, weights=impacts, pool=pool)
        self.set_mask(index, mask, interp, storage)
        return mask

    def clear_masks(self) -> None:
        for i in self.spec.conv_layers():
            self.set_mask(i, None)

    # -- execution ------------------------------------------------------------------

    def forward(self, X, labels=None, keep: bool = True) -> ForwardResult:
        """Run the network; ``keep=False`` skips the state needed by :meth:`backward`."""
        x = np.asarray(X, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        if tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise ShapeError(f"input {x.shape[1:]} does not match network input {self.spec.input_shape}")
        acts = []
        for layer in self.layers:
            if isinstance(layer, Conv):
                layer.keep = keep
        for i, layer in enumerate(self.layers):
            try:
                x = layer.forward(x)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
            acts.append(x)
        logits = x
        self._state_id += 1
        self._fresh = self._state_id if keep else None
        if labels is None:
            return ForwardResult(logits, None, None, None, acts, state_id=self._state_id)
        labels = np.asarray(labels, dtype=np.int64)
        per, probs = softmax_nll(logits.astype(np.float64), labels)
        return ForwardResult(logits, probs, float(per.mean()), per, acts, labels, self._state_id)

    def backward(self, result: ForwardResult, reduction: str = "mean", upstream=None):
        """Gradients of the loss for every parameter, keyed ``(layer, name)``.

        ``reduction='sum'`` differentiates the summed per-sample loss, which
        gives per-sample gradients at every activation.  ``upstream`` replaces
        the loss gradient with a given ``dL/dlogits``.
        """
        if self._fresh is None or result.state_id != self._fresh:
            raise RuntimeError("stale forward state: backward must follow the matching forward pass")
        if upstream is None:
            if result.labels is None:
                raise ValueError("backward needs labels or an upstream gradient")
            g = result.probs.copy()
            g[np.arange(len(result.labels)), result.labels] -= 1.0
            if reduction == "mean":
                g /= len(result.labels)
        else:
            g = np.asarray(upstream, dtype=np.float64)
        g = g.astype(self.dtype)
        for i in range(len(self.layers) - 1, -1, -1):
            g = self.layers[i].backward(g, need_input_grad=i > 0)
        self._fresh = None
        return {(i, n): self.layers[i].grads[n] for i, n, _ in self.parameters()}

    def predict(self, X, batch_size: int = 256) -> np.ndarray:
        return np.concatenate([self.forward(X[i:i + batch_size], keep=False).predictions
                               for i in range(0, len(X), batch_size)])

    def evaluate(self, X, y, batch_size: int = 256) -> tuple[float, float]:
        """Mean NLL and classification error over a dataset."""
        total, wrong = 0.0, 0
        for i in range(0, len(X), batch_size):
            res = self.forward(X[i:i + batch_size], y[i:i + batch_size], keep=False)
            total += float(res.per_sample.sum())
            wrong += int((res.predictions != res.labels).sum())
        return total / len(X), wrong / len(X)

    # -- weights files --------------------------------------------------------------

    def save_weights(self, path) -> None:
        """Weights bundle: ``PCNB`` header then ``(layer, role)`` keyed ``PCNW`` records."""
        recs = []
        for i, name, arr in self.parameters():
            role = 0 if name == "W" else 1
            k = arr.reshape(1, 1, -1, arr.shape[-1]) if arr.ndim == 2 else (
                arr.reshape(1, 1, 1, -1) if arr.ndim == 1 else arr)
            recs.append(np.array([i, role], dtype="<u4").tobytes() + kernel_to_bytes(k))
        head = b"PCNB" + np.array([1, len(recs)], dtype="<u4").tobytes()
        Path(path).write_bytes(head + b"".join(recs))

    def load_weights(self, path) -> None:
        raw = Path(path).read_bytes()
        if raw[:4] != b"PCNB":
            raise ValueError(f"{path}: not a weights bundle")
        version, count = np.frombuffer(raw, dtype="<u4", count=2, offset=4)
        if version != 1:
            raise ValueError(f"{path}: unsupported version {version}")
        off = 12
        weights = {}
        for _ in range(count):
            i, role = (int(v) for v in np.frombuffer(raw, dtype="<u4", count=2, offset=off))
            K, off = kernel_from_bytes(raw, off + 8)
            name = "W" if role == 0 else "b"
            target = self.layers[i].params[name]
            weights[(i, name)] = K.reshape(target.shape)
        if off != len(raw):
            raise ValueError(f"{path}: trailing bytes")
        self.set_weights(weights)


# --- training -----------------------------------------------------------------------

@dataclass
class TrainState:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0
    weight_decay: float = 0.0
    step: int = 0
    velocity: dict = field(default_factory=dict)


def sgd_finetune(net: Network, X, y, epochs: int, state: TrainState | None = None,
                 X_val=None, y_val=None, log=None) -> list[dict]:
    """SGD with momentum; deterministic given ``state.seed``.

    Returns one record per epoch with the mean training loss and error
    (and held-out error when a validation split is given).
    """
    state = state or TrainState()
    X = np.asarray(X)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(state.seed)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(X))
        total, wrong = 0.0, 0
        for start in range(0, len(X), state.batch_size):
            idx = order[start:start + state.batch_size]
            res = net.forward(X[idx], y[idx])
            grads = net.backward(res)
            total += float(res.per_sample.sum())
            wrong += int((res.predictions != res.labels).sum())
            for key, g in grads.items():
                i, name = key
                p = net.layers[i].params[name]
                if state.weight_decay and name == "W":
                    g = g + state.weight_decay * p
                v = state.velocity.get(key)
                v = -state.lr * g if v is None else state.momentum * v - state.lr * g
                state.velocity[key] = v
                p += v.astype(p.dtype)
            state.step += 1
        rec = {"epoch": epoch + 1, "loss": total / len(X), "error": wrong / len(X)}
        if X_val is not None:
            rec["val_loss"], rec["val_error"] = net.evaluate(X_val, y_val)
        history.append(rec)
        if log is not None:
            log(rec)
    return history


# --- impacts ------------------------------------------------------------------------

def impact_fields(net: Network, layer_indices, X, y, upstream=None) -> dict[int, np.ndarray]:
    """Per-image impact ``G(x, y) = sum_t |dL/dV * V|`` for several conv layers.

    Derivatives are taken with respect to the exact outputs ``V``; positions a
    perforated layer does not compute get zero impact.  ``L`` is the per-image
    NLL unless ``upstream`` supplies ``dL/dlogits`` directly.
    """
    for idx in layer_indices:
        if not isinstance(net.layers[idx], Conv):
            raise ValueError(f"layer {idx} is {net.layers[idx].kind}, not conv")
    res = net.forward(X, y)
    net.backward(res, reduction="sum", upstream=upstream)
    out = {}
    for idx in layer_indices:
        layer = net.layers[idx]
        Xo, Yo = net.conv_grid(idx)
        V = layer.out_value.astype(np.float64)
        dV = np.asarray(layer.out_grad, dtype=np.float64)
        g = np.abs(dV * V).sum(axis=-1)  # (B, N)
        G = np.zeros((len(g), Xo * Yo))
        mask = layer.conv.mask
        if mask is None or mask.is_full:
            G[:] = g
        else:
            G[:, mask.positions.flat] = g
        out[idx] = G.reshape(-1, Xo, Yo)
    return out


def impact_field(net: Network, layer_index: int, X, y, upstream=None) -> np.ndarray:
    return impact_fields(net, [layer_index], X, y, upstream)[layer_index]


def average_impacts(net: Network, layer_index, X, y, n_samples: int = 512, batch_size: int = 64):
    """Mean impact over the first ``n_samples`` examples.

    ``layer_index`` may be a single index (returns one field) or a list
    (returns a dict).
    """
    many = not isinstance(layer_index, (int, np.integer))
    idxs = list(layer_index) if many else [int(layer_index)]
    n = min(len(X), n_samples)
    if n == 0:
        raise ValueError("cannot average impacts over an empty dataset")
    sums = {i: 0.0 for i in idxs}
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        fields = impact_fields(net, idxs, X[start:stop], y[start:stop])
        for i in idxs:
            sums[i] = sums[i] + fields[i].sum(axis=0)
    means = {i: sums[i] / n for i in idxs}
    return means if many else means[idxs[0]]


@dataclass
class IterativeImpactResult:
    masks: dict[int, PerforationMask | None]
    recomputations: int
    history: list[tuple[int, Fraction, int]]
    impacts: dict[int, np.ndarray]


def iterative_impact_perforation(net: Network, layers, ladder, X, y, order: str = "round_robin",
                                 n_samples: int = 512, seed: int = 0, interp: str = "nearest",
                                 steps: list[tuple[int, int]] | None = None) -> IterativeImpactResult:
    """Raise per-layer rates one ladder step at a time, recomputing impacts after each step.

    With ``order='round_robin'`` every layer moves one ladder step per round.
    ``steps`` can instead give an explicit list of ``(layer, ladder_index)``
    moves.  The network is perforated in place.
    """
    ladder = [parse_rate(r) for r in ladder]
    if any(b <= a for a, b in zip(ladder, ladder[1:])):
        raise ValueError("rate ladder must be strictly increasing")
    layers = list(layers)
    if steps is None:
        if order != "round_robin":
            raise ValueError(f"unknown layer order policy {order!r}")
        steps = [(l, k) for k in range(len(ladder)) for l in layers]
    level = {l: -1 for l in layers}
    recomputed = 0
    history = []
    impacts = average_impacts(net, layers, X, y, n_samples)
    recomputed_needed = False
    for layer, k in steps:
        if k >= len(ladder):
            raise ValueError(f"ladder exhausted for layer {layer}")
        if k <= level[layer]:
            continue
        if recomputed_needed:
            impacts = average_impacts(net, layers, X, y, n_samples)
            recomputed += 1
        Xo, Yo = net.conv_grid(layer)
        N = n_for_rate(Xo * Yo, ladder[k])
        mask = top_n_by_weight(impacts[layer], N, seed, kind="impact")
        net.set_mask(layer, mask, interp)
        level[layer] = k
        history.append((layer, ladder[k], N))
        recomputed_needed = True
    # impacts are refreshed once per rate increase, the final one included
    impacts = average_impacts(net, layers, X, y, n_samples)
    recomputed += 1
    return IterativeImpactResult({l: net.layers[l].conv.mask for l in layers}, recomputed, history, impacts)


def one_shot_impact_masks(net: Network, rates: dict[int, Fraction], X, y, n_samples: int = 512,
                          seed: int = 0) -> dict[int, PerforationMask]:
    """Impact masks for every layer from a single impact estimate on the current network."""
    layers = list(rates)
    impacts = average_impacts(net, layers, X, y, n_samples)
    out = {}
    for l, r in rates.items():
        Xo, Yo = net.conv_grid(l)
        out[l] = top_n_by_weight(impacts[l], n_for_rate(Xo * Yo, parse_rate(r)), seed, kind="impact")
    return out


# --- reference architectures -------------------------------------------------------

def _spec(text: str) -> NetworkSpec:
    return NetworkSpec.parse(text)


def nin_cifar10() -> NetworkSpec:
    """Network in Network for 32x32 CIFAR-10 (Caffe model zoo layout)."""
    return _spec("""# NIN CIFAR-10
input x=32 y=32 s=3 classes=10
conv d=5 t=192 pad=2
relu
conv d=1 t=160
relu
conv d=1 t=96
relu
maxpool size=3 stride=2
conv d=5 t=192 pad=2
relu
conv d=1 t=192
relu
conv d=1 t=192
relu
avgpool size=3 stride=2
conv d=3 t=192 pad=1
relu
conv d=1 t=192
relu
conv d=1 t=10
relu
gap
""")


def alexnet_caffe() -> NetworkSpec:
    """CaffeNet: AlexNet with pooling before normalisation and two-group convolutions."""
    return _spec("""# AlexNet (Caffe reference variant)
input x=227 y=227 s=3 classes=1000
conv d=11 t=96 stride=4
relu
maxpool size=3 stride=2
norm
conv d=5 t=256 pad=2 groups=2
relu
maxpool size=3 stride=2
norm
conv d=3 t=384 pad=1
relu
conv d=3 t=384 pad=1 groups=2
relu
conv d=3 t=256 pad=1 groups=2
relu
maxpool size=3 stride=2
fc t=4096
relu
fc t=4096
relu
fc t=1000
""")


def vgg16() -> NetworkSpec:
    lines = ["# VGG-16", "input x=224 y=224 s=3 classes=1000"]
    for block, (n, t) in enumerate([(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)]):
        for _ in range(n):
            lines += [f"conv d=3 t={t} pad=1", "relu"]
        lines.append("maxpool size=2 stride=2")
    lines += ["fc t=4096", "relu", "fc t=4096", "relu", "fc t=1000"]
    return _spec("\n".join(lines) + "\n")


def toy_nin(size: int = 24, channels: int = 3, widths=(16, 32, 32), classes: int = 10) -> NetworkSpec:
    """Three spatial convolutions, each followed by a 1x1 convolution, NIN-style."""
    w1, w2, w3 = widths
    return _spec(f"""# toy NIN
input x={size} y={size} s={channels} classes={classes}
conv d=5 t={w1} pad=2
relu
conv d=1 t={w1}
relu
maxpool size=3 stride=2
conv d=5 t={w2} pad=2
relu
conv d=1 t={w2}
relu
maxpool size=3 stride=2
conv d=3 t={w3} pad=1
relu
conv d=1 t={classes}
gap
""")


def toy_two_conv(size: int = 12, channels: int = 2, widths=(6, 8), classes: int = 4) -> NetworkSpec:
    w1, w2 = widths
    return _spec(f"""# toy two-conv
input x={size} y={size} s={channels} classes={classes}
conv d=3 t={w1} pad=1
relu
maxpool size=3 stride=2
conv d=3 t={w2} pad=1
relu
gap
fc t={classes}
""")
