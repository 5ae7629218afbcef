"""Small procedural meshes for tests, demos and synthetic benchmarks."""

import numpy as np
from scipy.spatial import ConvexHull

from .geometry import TriMesh


def grid_mesh(nx, ny, spacing=1.0, shear=0.0):
    """Planar ``nx`` x ``ny`` vertex grid, each quad split along the same diagonal.

    With ``shear=0.5`` and ``spacing`` rows scaled by sqrt(3)/2 the result is
    the equilateral triangular lattice (see :func:`triangular_lattice`).
    """
    j, i = np.mgrid[0:ny, 0:nx]
    x = (i + shear * j) * spacing
    y = j * spacing
    verts = np.column_stack([x.ravel(), y.ravel(), np.zeros(nx * ny)]).astype(float)
    tris = []
    for r in range(ny - 1):
        for c in range(nx - 1):
            a = r * nx + c
            b, d, e = a + 1, a + nx, a + nx + 1
            tris.append((a, b, e))
            tris.append((a, e, d))
    return TriMesh(verts, np.array(tris))


def triangular_lattice(nx, ny, spacing=1.0):
    """Flat grid of equilateral triangles; its Delaunay triangulation is unique."""
    j, i = np.mgrid[0:ny, 0:nx]
    x = (i + 0.5 * j) * spacing
    y = j * spacing * np.sqrt(3.0) / 2.0
    verts = np.column_stack([x.ravel(), y.ravel(), np.zeros(nx * ny)])
    tris = []
    for r in range(ny - 1):
        for c in range(nx - 1):
            a = r * nx + c
            tris.append((a, a + 1, a + nx))
            tris.append((a + 1, a + nx + 1, a + nx))
    return TriMesh(verts, np.array(tris))


def _outward(verts, simplices):
    v = verts
    s = simplices.copy()
    n = np.cross(v[s[:, 1]] - v[s[:, 0]], v[s[:, 2]] - v[s[:, 0]])
    c = v[s].mean(axis=1) - v.mean(axis=0)
    flip = np.einsum("ij,ij->i", n, c) < 0
    s[flip] = s[flip][:, [0, 2, 1]]
    return s


def icosahedron(radius=1.0):
    p = (1 + 5**0.5) / 2
    v = np.array(
        [[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
         [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
         [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]], dtype=float)
    v *= radius / np.linalg.norm(v[0])
    return TriMesh(v, _outward(v, ConvexHull(v).simplices))


def icosphere(level, radius=1.0):
    """Loop-subdivided icosahedron projected to the sphere (10*4^level + 2 vertices)."""
    mesh = icosahedron()
    v = [tuple(x) for x in mesh.vertices]
    t = [tuple(f) for f in mesh.triangles]
    for _ in range(level):
        cache = {}
        verts = list(v)

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = (np.asarray(verts[a]) + np.asarray(verts[b])) / 2
                verts.append(tuple(m / np.linalg.norm(m)))
                cache[key] = len(verts) - 1
            return cache[key]

        nt = []
        for a, b, c in t:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nt += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        v, t = verts, nt
    return TriMesh(np.array(v) * radius, np.array(t))


def fibonacci_sphere(n):
    k = np.arange(n) + 0.5
    z = 1 - 2 * k / n
    r = np.sqrt(1 - z * z)
    phi = np.pi * (1 + 5**0.5) * k
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def blob(n, seed=0, bumps=6, amplitude=0.25, scale=1.0):
    """Closed, asymmetric sphere-like surface with exactly ``n`` vertices.

    Fibonacci-sphere samples are triangulated by their convex hull, then
    displaced radially by a sum of random Gaussian bumps so the shape has no
    rigid symmetries.
    """
    rng = np.random.default_rng(seed)
    u = fibonacci_sphere(n)
    tris = _outward(u, ConvexHull(u).simplices)
    dirs = rng.normal(size=(bumps, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    amps = amplitude * rng.uniform(0.3, 1.0, size=bumps) * rng.choice([-1, 1], size=bumps)
    widths = rng.uniform(0.3, 0.7, size=bumps)
    r = np.ones(n)
    for d, a, w in zip(dirs, amps, widths):
        ang = np.arccos(np.clip(u @ d, -1, 1))
        r += a * np.exp(-((ang / w) ** 2))
    # mild anisotropic stretch breaks any remaining near-symmetry
    stretch = np.array([1.0, 0.8, 0.65])
    return TriMesh(scale * u * r[:, None] * stretch, tris)
