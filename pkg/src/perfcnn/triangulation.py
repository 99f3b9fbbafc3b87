"""Bowyer-Watson Delaunay triangulation of integer lattice points.

Mask positions are integer pairs, so orientation and in-circle predicates
are evaluated exactly with Python integers.  Points are inserted in the order
given (row-major for generated masks), which makes the result deterministic
even when four or more points are cocircular.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def orient(a, b, c) -> int:
    """Twice the signed area of ``abc``; positive when counter-clockwise."""
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def incircle(a, b, c, d) -> int:
    """Positive iff ``d`` lies strictly inside the circumcircle of CCW triangle ``abc``."""
    adx, ady = a[0] - d[0], a[1] - d[1]
    bdx, bdy = b[0] - d[0], b[1] - d[1]
    cdx, cdy = c[0] - d[0], c[1] - d[1]
    ad = adx * adx + ady * ady
    bd = bdx * bdx + bdy * bdy
    cd = cdx * cdx + cdy * cdy
    return (adx * (bdy * cd - bd * cdy)
            - ady * (bdx * cd - bd * cdx)
            + ad * (bdx * cdy - bdy * cdx))


@dataclass(frozen=True)
class Triangulation:
    """Vertices (``n x 2`` ints) and CCW triangles (``m x 3`` vertex indices)."""

    vertices: np.ndarray
    triangles: np.ndarray

    @property
    def degenerate(self) -> bool:
        return len(self.triangles) == 0

    def area2(self) -> int:
        """Twice the total triangle area, exact."""
        v = [tuple(int(c) for c in p) for p in self.vertices]
        return sum(orient(v[a], v[b], v[c]) for a, b, c in self.triangles)

    def locate(self, points, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
        """Containing triangle and barycentric weights for each query point.

        Points on shared edges go to the lowest-index triangle.  Returns
        ``(tri, weights)`` with ``tri = -1`` for points outside the hull.
        Weights are clamped to ``[0, 1]`` and renormalised.
        """
        P = np.asarray(points, dtype=np.int64).reshape(-1, 2)
        tri = np.full(len(P), -1, dtype=np.int64)
        weights = np.zeros((len(P), 3), dtype=np.float64)
        if self.degenerate:
            return tri, weights
        A = self.vertices[self.triangles[:, 0]]
        B = self.vertices[self.triangles[:, 1]]
        C = self.vertices[self.triangles[:, 2]]
        area = ((B[:, 0] - A[:, 0]) * (C[:, 1] - A[:, 1]) - (B[:, 1] - A[:, 1]) * (C[:, 0] - A[:, 0]))
        for start in range(0, len(P), chunk):
            p = P[start:start + chunk, None, :]
            wa = (C[:, 0] - B[:, 0]) * (p[..., 1] - B[:, 1]) - (C[:, 1] - B[:, 1]) * (p[..., 0] - B[:, 0])
            wb = (A[:, 0] - C[:, 0]) * (p[..., 1] - C[:, 1]) - (A[:, 1] - C[:, 1]) * (p[..., 0] - C[:, 0])
            wc = (B[:, 0] - A[:, 0]) * (p[..., 1] - A[:, 1]) - (B[:, 1] - A[:, 1]) * (p[..., 0] - A[:, 0])
            inside = (wa >= 0) & (wb >= 0) & (wc >= 0)
            found = inside.any(axis=1)
            first = np.argmax(inside, axis=1)
            rows = np.nonzero(found)[0]
            t = first[rows]
            w = np.stack([wa[rows, t], wb[rows, t], wc[rows, t]], axis=1) / area[t][:, None]
            w = np.clip(w, 0.0, 1.0)
            w /= w.sum(axis=1, keepdims=True)
            tri[start + rows] = t
            weights[start + rows] = w
        return tri, weights


def delaunay(points) -> Triangulation:
    """Triangulate integer points; collinear or tiny inputs give an empty triangle list."""
    P = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    n = len(P)
    if n < 3:
        return Triangulation(P, np.empty((0, 3), dtype=np.int64))
    pts = [(int(x), int(y)) for x, y in P]
    lo = min(min(x for x, _ in pts), min(y for _, y in pts))
    hi = max(max(x for x, _ in pts), max(y for _, y in pts))
    R = 10**6 * (hi - lo + 1)
    # super triangle containing the square [lo, hi]^2 with a wide margin
    pts += [(lo - R, lo - R), (lo + 4 * R, lo - R), (lo - R, lo + 4 * R)]
    s0, s1, s2 = n, n + 1, n + 2

    tris: dict[int, tuple[int, int, int]] = {}
    owner: dict[tuple[int, int], int] = {}
    next_id = 0

    def add(a, b, c):
        nonlocal next_id
        tid = next_id
        next_id += 1
        tris[tid] = (a, b, c)
        owner[(a, b)] = tid
        owner[(b, c)] = tid
        owner[(c, a)] = tid

    def remove(tid):
        a, b, c = tris.pop(tid)
        for e in ((a, b), (b, c), (c, a)):
            if owner.get(e) == tid:
                del owner[e]

    add(s0, s1, s2)
    for i in range(n):
        p = pts[i]
        start = None
        for tid in reversed(tris):
            a, b, c = tris[tid]
            if orient(pts[a], pts[b], p) >= 0 and orient(pts[b], pts[c], p) >= 0 and orient(pts[c], pts[a], p) >= 0:
                start = tid
                break
        if start is None:  # pragma: no cover - the super triangle contains every point
            raise RuntimeError(f"point {p} not located")
        bad = {start}
        stack = [start]
        while stack:
            a, b, c = tris[stack.pop()]
            for u, v in ((a, b), (b, c), (c, a)):
                nb = owner.get((v, u))
                if nb is None or nb in bad:
                    continue
                x, y, z = tris[nb]
                if incircle(pts[x], pts[y], pts[z], p) > 0:
                    bad.add(nb)
                    stack.append(nb)
        boundary = []
        for tid in bad:
            a, b, c = tris[tid]
            for u, v in ((a, b), (b, c), (c, a)):
                if owner.get((v, u)) not in bad:
                    boundary.append((u, v))
        for tid in bad:
            remove(tid)
        for u, v in boundary:
            if orient(pts[u], pts[v], p) <= 0:  # pragma: no cover - cavity is star-shaped
                raise RuntimeError("Bowyer-Watson cavity is not star-shaped")
            add(u, v, i)

    keep = [t for t in tris.values() if max(t) < n]
    # canonical order: rotate each triangle to start at its smallest vertex, then sort
    canon = []
    for a, b, c in keep:
        k = (a, b, c).index(min(a, b, c))
        canon.append(((a, b, c) * 2)[k:k + 3])
    canon.sort()
    return Triangulation(P, np.array(canon, dtype=np.int64).reshape(-1, 3))
