"""Slow, obviously-correct reference computations used only by the tests."""

import math

import numpy as np


def brute_force_hull_vertices(points):
    """Extreme points via the O(n^3) edge test.

    (a, b) is a hull edge when every point is left of or on line ab, and
    points on the line lie between a and b. Extreme points are the edge
    end-points. Exact only when cross products are, e.g. integer inputs.
    """
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    n = len(pts)
    if n < 3:
        return {tuple(p) for p in pts}
    verts = set()
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            a, b = pts[i], pts[j]
            ab = b - a
            rel = pts - a
            cross = ab[0] * rel[:, 1] - ab[1] * rel[:, 0]
            if np.any(cross < 0):
                continue
            on = pts[cross == 0]
            lo = np.minimum(a, b)
            hi = np.maximum(a, b)
            if np.all((on >= lo) & (on <= hi)):
                verts.add(tuple(a))
                verts.add(tuple(b))
    return verts


def all_pairs_diameter(vertices):
    v = np.asarray(vertices, dtype=np.float64)
    best = -1.0
    pair = None
    n = len(v)
    for i in range(n):
        for j in range(i + 1, n):
            dx = v[i, 0] - v[j, 0]
            dy = v[i, 1] - v[j, 1]
            d = dx * dx + dy * dy
            if d > best:
                best = d
                pair = (i, j)
    return math.sqrt(best), pair


def _chains(s, t):
    """Upper and lower boundary chains of a convex ring in (s, t) coordinates."""
    n = len(s)
    i0 = int(np.argmin(s))
    i1 = int(np.argmax(s))
    walk_a = []
    k = i0
    while True:
        walk_a.append(k)
        if k == i1:
            break
        k = (k + 1) % n
    walk_b = []
    k = i0
    while True:
        walk_b.append(k)
        if k == i1:
            break
        k = (k - 1) % n
    a = (s[walk_a], t[walk_a])
    b = (s[walk_b], t[walk_b])
    return a, b


def dense_sweep_chord(vertices, a, b, samples=100_000, refine=True):
    """Longest chord perpendicular to segment ab, by sampling positions along ab.

    Works in its own frame (projection on the unit direction of ab). The
    best grid sample is optionally refined by golden-section search, which
    is valid because the width is concave along the diagonal.
    """
    v = np.asarray(vertices, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    u = (b - a) / np.linalg.norm(b - a)
    rel = v - a
    s = rel @ u
    t = u[0] * rel[:, 1] - u[1] * rel[:, 0]
    (sa, ta), (sb, tb) = _chains(s, t)

    def width(x):
        return np.abs(np.interp(x, sa, ta) - np.interp(x, sb, tb))

    lo, hi = s.min(), s.max()
    grid = np.linspace(lo, hi, samples)
    w = width(grid)
    k = int(np.argmax(w))
    best = float(w[k])
    if not refine:
        return best
    left = grid[max(k - 1, 0)]
    right = grid[min(k + 1, samples - 1)]
    g = (math.sqrt(5) - 1) / 2
    c = right - g * (right - left)
    d = left + g * (right - left)
    for _ in range(200):
        if float(width(c)) >= float(width(d)):
            right = d
        else:
            left = c
        c = right - g * (right - left)
        d = left + g * (right - left)
        if right - left < 1e-15 * max(1.0, hi - lo):
            break
    return max(best, float(width(0.5 * (left + right))), float(width(left)), float(width(right)))


def random_convex_polygon(rng, max_vertices=50, scale=None):
    n = int(rng.integers(3, max_vertices + 1))
    scale = scale if scale is not None else float(rng.uniform(1.0, 1000.0))
    while True:
        pts = rng.normal(size=(max(n, 3) * 3, 2)) * scale * rng.uniform(0.2, 1.0, size=2)
        from tumorbed.geometry import convex_hull

        hull = convex_hull(pts)
        if not hull.is_degenerate:
            return hull


def lloyd_kmeans(x, init, max_iters=300):
    """Full-batch Lloyd iterations from ``init``; asserts monotone WCSS."""
    c = np.array(init, dtype=np.float64)
    prev = math.inf
    history = []
    for _ in range(max_iters):
        d2 = ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
        lab = d2.argmin(axis=1)
        cost = float(d2[np.arange(len(x)), lab].sum())
        assert cost <= prev * (1 + 1e-12) + 1e-12, "Lloyd WCSS increased"
        history.append(cost)
        new = c.copy()
        for j in range(len(c)):
            members = x[lab == j]
            if len(members):
                new[j] = members.mean(axis=0)
        if np.allclose(new, c, rtol=0, atol=0):
            break
        c = new
        prev = cost
    d2 = ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
    return c, float(d2.min(axis=1).sum()), history


def gaussian_blobs(rng, n=3000, d=16, k=3, spread=1.0, separation=25.0):
    """``k`` isotropic blobs of ``n // k`` points; centre i is separation * (i + 1) * e_i."""
    centers = np.zeros((k, d))
    for i in range(k):
        centers[i, i % d] = separation * (1 + i)
    labels = np.repeat(np.arange(k), n // k)
    x = centers[labels] + rng.normal(scale=spread, size=(len(labels), d))
    return x, labels, centers


def nearest_k_per_cluster(x, centroids, m):
    """Exhaustive scan: per centroid, the set of m nearest assigned rows."""
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    lab = d2.argmin(axis=1)
    out = {}
    for c in range(len(centroids)):
        rows = np.flatnonzero(lab == c)
        dist = d2[rows, c]
        order = np.lexsort((rows, dist))
        out[c] = (rows[order][:m], dist[order])
    return out


def count_center_in_polygon(vertices, cell_size, width, height):
    """Cell-centre containment by an independent half-plane test (convex CCW only)."""
    v = np.asarray(vertices, dtype=np.float64)
    cols = math.ceil(width / cell_size)
    rows = math.ceil(height / cell_size)
    yy, xx = np.mgrid[0:rows, 0:cols]
    px = (xx + 0.5) * cell_size
    py = (yy + 0.5) * cell_size
    inside = np.ones_like(px, dtype=bool)
    n = len(v)
    for i in range(n):
        a, b = v[i], v[(i + 1) % n]
        cross = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])
        inside &= cross > 0
    return inside
