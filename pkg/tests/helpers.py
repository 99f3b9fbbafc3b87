"""Finite-difference oracles shared by the network and acceptance tests."""

import numpy as np

from perfcnn.network import Network


def rel_err(fd, an, floor=1e-4):
    """Relative error; the floor keeps roundoff on near-zero gradients from dominating."""
    return abs(fd - an) / max(floor, abs(fd), abs(an))


def fd_parameters(net: Network, X, y, rng, per_param: int = 6, eps: float = 1e-6) -> float:
    """Worst relative error of backward() parameter gradients against central differences."""
    res = net.forward(X, y)
    grads = net.backward(res)
    worst = 0.0
    for i, name, arr in net.parameters():
        flat = arr.reshape(-1)
        g = grads[(i, name)].reshape(-1)
        for k in rng.choice(flat.size, size=min(per_param, flat.size), replace=False):
            old = flat[k]
            flat[k] = old + eps
            up = net.forward(X, y, keep=False).loss
            flat[k] = old - eps
            down = net.forward(X, y, keep=False).loss
            flat[k] = old
            fd = (up - down) / (2 * eps)
            if abs(fd) < 1e-9 and abs(g[k]) < 1e-9:
                continue
            worst = max(worst, rel_err(fd, g[k]))
    return worst


def fd_exact_values(net: Network, layer: int, X, y, rng, samples: int = 6, eps: float = 1e-6) -> float:
    """Worst relative error of dL/dV at the exact positions of one conv layer.

    The perturbation is injected into the layer's exact outputs, before
    interpolation, so this checks the summed-over-regions backward rule.
    """
    conv = net.layers[layer].conv
    res = net.forward(X, y)
    net.backward(res)
    analytic = np.asarray(net.layers[layer].out_grad)
    original = conv.compute_exact
    bump = {}

    def patched(U, keep=False):
        out = original(U, keep)
        if bump:
            out[bump["idx"]] += bump["delta"]
        return out

    conv.compute_exact = patched
    worst = 0.0
    try:
        for _ in range(samples):
            idx = tuple(int(rng.integers(s)) for s in analytic.shape)
            vals = []
            for delta in (eps, -eps):
                bump.update(idx=idx, delta=delta)
                vals.append(net.forward(X, y, keep=False).loss)
            bump.clear()
            fd = (vals[0] - vals[1]) / (2 * eps)
            if abs(fd) < 1e-9 and abs(analytic[idx]) < 1e-9:
                continue
            worst = max(worst, rel_err(fd, analytic[idx]))
    finally:
        conv.compute_exact = original
    return worst


def fd_input(net: Network, X, y, rng, samples: int = 6, eps: float = 1e-6) -> float:
    """Worst relative error of dL/dU at the network input against central differences."""
    first = net.layers[0]
    res = net.forward(X, y)
    net.backward(res)
    # the first layer skips its input gradient; recompute it from the cached state
    _, _, dU, _ = first.conv.backward(first.out_grad, need_input_grad=True)
    worst = 0.0
    Xw = np.array(X, dtype=net.dtype)
    for _ in range(samples):
        idx = tuple(int(rng.integers(s)) for s in Xw.shape)
        old = Xw[idx]
        Xw[idx] = old + eps
        up = net.forward(Xw, y, keep=False).loss
        Xw[idx] = old - eps
        down = net.forward(Xw, y, keep=False).loss
        Xw[idx] = old
        fd = (up - down) / (2 * eps)
        if abs(fd) < 1e-9 and abs(dU[idx]) < 1e-9:
            continue
        worst = max(worst, rel_err(fd, dU[idx]))
    return worst


def separable_set(n=200, size=8, seed=0):
    """Two classes that differ by the mean of channel 0 (linearly separable in expectation)."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    X = rng.normal(0, 1, (n, size, size, 2)).astype(np.float32)
    X[..., 0] += np.where(y == 1, 0.6, -0.6)[:, None, None]
    return X, y
