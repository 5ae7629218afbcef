"""Incremental (Bowyer-Watson) Delaunay triangulation of small planar point sets.

Built for local tangent-plane meshing: points are inserted in order of
distance from a center point and insertion can stop once the center's star
is provably final.
"""

import math

import numpy as np

from .predicates import incircle, orient2d


def _circumradius(p, q, r):
    a = math.dist(p, q)
    b = math.dist(q, r)
    c = math.dist(r, p)
    area2 = abs((q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]))
    return a * b * c / (2.0 * area2) if area2 > 0 else math.inf


class Triangulation:
    """Delaunay triangulation under incremental insertion.

    A large enclosing triangle with three auxiliary vertices seeds the
    structure; triangles touching it are hidden from :meth:`triangles`.
    Cocircular configurations are resolved by insertion order.
    """

    def __init__(self, points):
        pts = [tuple(map(float, p)) for p in np.asarray(points, dtype=float)]
        if not pts:
            raise ValueError("need at least one point")
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        cx, cy = (min(xs) + max(xs)) / 2, (min(ys) + max(ys)) / 2
        span = max(max(xs) - min(xs), max(ys) - min(ys), 1e-300)
        big = 1e5 * span
        self.n = len(pts)
        self.pts = pts + [(cx - 2 * big, cy - big), (cx + 2 * big, cy - big), (cx, cy + 2 * big)]
        n = self.n
        self.tris = {(n, n + 1, n + 2)}
        self.inserted = []

    def _ccw(self, t):
        a, b, c = t
        return t if orient2d(self.pts[a], self.pts[b], self.pts[c]) > 0 else (a, c, b)

    def insert(self, i):
        p = self.pts[i]
        bad = {t for t in self.tris if incircle(self.pts[t[0]], self.pts[t[1]], self.pts[t[2]], p) > 0}
        if not bad:
            # on a circumcircle of every nearby triangle: take the containing ones
            bad = {t for t in self.tris if all(orient2d(self.pts[t[k]], self.pts[t[(k + 1) % 3]], p) >= 0 for k in range(3))}
        while True:
            edges = {}
            for a, b, c in bad:
                for e in ((a, b), (b, c), (c, a)):
                    key = (min(e), max(e))
                    edges[key] = None if key in edges else e
            boundary = [e for e in edges.values() if e is not None]
            # a boundary edge collinear with p would give a flat triangle: absorb the neighbor across it
            grow = set()
            for a, b in boundary:
                if orient2d(self.pts[a], self.pts[b], p) <= 0:
                    grow |= {t for t in self.tris - bad if a in t and b in t}
            if not grow:
                break
            bad |= grow
        self.tris -= bad
        for a, b in boundary:
            self.tris.add((a, b, i))
        self.inserted.append(i)

    def triangles(self):
        n = self.n
        return np.array(sorted(t for t in self.tris if max(t) < n), dtype=np.int64).reshape(-1, 3)

    def star(self, v):
        return [t for t in self.tris if v in t]


def local_star(points, center=0):
    """Triangles incident to ``center`` in the Delaunay triangulation of ``points``.

    Points are inserted by increasing distance from the center. Insertion
    stops early once the center's star has no auxiliary vertex and the next
    point is farther than twice the largest circumradius in the star: such a
    point cannot lie inside any star circumcircle (each contains the center).
    Returns triangles as counterclockwise index triples starting at ``center``.
    """
    pts = np.asarray(points, dtype=float)
    tri = Triangulation(pts)
    dist = np.linalg.norm(pts - pts[center], axis=1)
    order = [center] + [int(j) for j in np.argsort(dist, kind="stable") if j != center]
    n = tri.n
    for step, j in enumerate(order):
        if step >= 3:
            star = tri.star(center)
            if all(max(t) < n for t in star):
                reach = 2.0 * max(_circumradius(*(tri.pts[k] for k in t)) for t in star)
                if dist[j] > reach * (1.0 + 1e-9):
                    break
        tri.insert(j)
    out = []
    for t in tri.star(center):
        if max(t) >= n:
            continue
        k = t.index(center)
        out.append((t[k], t[(k + 1) % 3], t[(k + 2) % 3]))
    return np.array(sorted(out), dtype=np.int64).reshape(-1, 3)
