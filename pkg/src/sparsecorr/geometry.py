"""Triangle meshes, point clouds, ring neighborhoods and edge-graph geodesics.

Geodesic distances throughout the package are shortest paths on the edge
graph with Euclidean edge lengths. Any object exposing ``n_vertices`` and a
symmetric CSR ``adjacency`` matrix of edge lengths (``TriMesh`` here, the
local-mesh graph in :mod:`sparsecorr.pointcloud`) can be used as a surface.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from .errors import DegenerateFaceError, InputError, MeshFormatError

DEGENERATE_AREA_FACTOR = 1e-12


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class TriMesh:
    """Indexed triangle surface.

    Parameters
    ----------
    vertices : array_like, shape (n, 3)
    triangles : array_like, shape (m, 3)
        0-based vertex indices.
    validate : bool
        Check index ranges, repeated vertices, face degeneracy and edge
        manifoldness. Disable only for meshes derived from a valid mesh.

    Notes
    -----
    Instances are immutable; derived quantities are computed lazily and
    cached.
    """

    def __init__(self, vertices, triangles, validate=True):
        v = np.asarray(vertices, dtype=float)
        t = np.asarray(triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshFormatError(f"vertices must have shape (n, 3), got {v.shape}")
        if t.size == 0:
            t = t.reshape(0, 3)
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshFormatError(f"triangles must have shape (m, 3), got {t.shape}")
        self.vertices = _readonly(v)
        self.triangles = _readonly(t)
        if validate:
            self._validate()

    def _validate(self):
        n = self.n_vertices
        t = self.triangles
        if not np.all(np.isfinite(self.vertices)):
            raise MeshFormatError("non-finite vertex coordinates")
        if t.size and (t.min() < 0 or t.max() >= n):
            raise MeshFormatError("triangle index out of range")
        repeated = (t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])
        if np.any(repeated):
            raise DegenerateFaceError(np.flatnonzero(repeated))
        if t.size:
            tol = DEGENERATE_AREA_FACTOR * self.mean_edge_length**2
            bad = np.flatnonzero(~(self.face_areas > tol))
            if bad.size:
                raise DegenerateFaceError(bad)
            if np.any(self._edge_face_count > 2):
                raise MeshFormatError("non-manifold edge with more than two incident triangles", code="io.nonmanifold")

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_faces(self):
        return self.triangles.shape[0]

    @cached_property
    def _edge_data(self):
        t = self.triangles
        half = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        half.sort(axis=1)
        edges, counts = np.unique(half, axis=0, return_counts=True)
        return edges.reshape(-1, 2), counts

    @property
    def edges(self):
        """Unique undirected edges as sorted pairs, shape (E, 2)."""
        return self._edge_data[0]

    @property
    def _edge_face_count(self):
        return self._edge_data[1]

    @cached_property
    def boundary_edges(self):
        return _readonly(self.edges[self._edge_face_count == 1])

    @property
    def is_closed(self):
        return self.n_faces > 0 and len(self.boundary_edges) == 0

    @cached_property
    def edge_lengths(self):
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    @cached_property
    def mean_edge_length(self):
        return float(self.edge_lengths.mean()) if len(self.edges) else 0.0

    @cached_property
    def face_areas(self):
        v = self.vertices
        t = self.triangles
        cr = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        return 0.5 * np.linalg.norm(cr, axis=1)

    @property
    def area(self):
        return float(self.face_areas.sum())

    @cached_property
    def vertex_normals(self):
        """Area-weighted unit vertex normals (zero for isolated vertices)."""
        v = self.vertices
        t = self.triangles
        fn = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        vn = np.zeros_like(v)
        for k in range(3):
            np.add.at(vn, t[:, k], fn)
        norms = np.linalg.norm(vn, axis=1)
        ok = norms > 0
        vn[ok] /= norms[ok, None]
        return _readonly(vn)

    @cached_property
    def adjacency(self):
        """Symmetric CSR matrix of edge lengths."""
        return edge_graph(self.n_vertices, self.edges, self.edge_lengths)

    def __repr__(self):
        return f"TriMesh(n_vertices={self.n_vertices}, n_faces={self.n_faces})"


class PointCloud:
    """Unstructured 3D samples; rejects coincident points."""

    def __init__(self, points, validate=True):
        p = np.asarray(points, dtype=float)
        if p.ndim != 2 or p.shape[1] != 3:
            raise MeshFormatError(f"points must have shape (n, 3), got {p.shape}")
        self.points = _readonly(p)
        if validate and len(p) > 1:
            scale = float(np.linalg.norm(p.max(axis=0) - p.min(axis=0)))
            pairs = cKDTree(p).query_pairs(1e-12 * max(scale, 1e-300), output_type="ndarray")
            if len(pairs):
                raise MeshFormatError(f"coincident points: {pairs[:5].tolist()}", code="io.coincident")

    @property
    def vertices(self):
        return self.points

    @property
    def n_vertices(self):
        return self.points.shape[0]

    def __len__(self):
        return self.n_vertices


@dataclass(frozen=True)
class RingSet:
    center: int
    depth: int
    members: frozenset

    def __contains__(self, v):
        return v in self.members

    def __len__(self):
        return len(self.members)


def edge_graph(n, edges, lengths):
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    w = np.concatenate([lengths, lengths])
    g = sparse.csr_matrix((w, (rows, cols)), shape=(n, n))
    g.sort_indices()
    return g


# ---------------------------------------------------------------- file I/O


def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                yield line


def _fan(face):
    return [(face[0], face[k], face[k + 1]) for k in range(1, len(face) - 1)]


def _read_off(path):
    lines = _data_lines(path)
    head = next(lines, None)
    if head is None or not head.upper().startswith("OFF"):
        raise MeshFormatError(f"{path}: missing OFF header")
    rest = head[3:].split()
    counts = rest if rest else next(lines).split()
    nv, nf = int(counts[0]), int(counts[1])
    verts = [[float(x) for x in next(lines).split()[:3]] for _ in range(nv)]
    tris = []
    for _ in range(nf):
        tok = next(lines).split()
        k = int(tok[0])
        tris.extend(_fan([int(x) for x in tok[1 : 1 + k]]))
    return verts, tris


def _read_obj(path):
    verts, tris = [], []
    for line in _data_lines(path):
        tok = line.split()
        if tok[0] == "v":
            verts.append([float(x) for x in tok[1:4]])
        elif tok[0] == "f":
            idx = []
            for item in tok[1:]:
                i = int(item.split("/")[0])
                idx.append(i - 1 if i > 0 else len(verts) + i)
            tris.extend(_fan(idx))
    return verts, tris


def _read_ply_ascii(path):
    lines = _data_lines(path)
    if next(lines, "").strip() != "ply":
        raise MeshFormatError(f"{path}: missing ply magic")
    elements = []
    for line in lines:
        tok = line.split()
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise MeshFormatError(f"{path}: only ASCII PLY is supported")
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            elements[-1][2].append(tok[1:])
        elif tok[0] == "end_header":
            break
    verts, tris = [], []
    for name, count, props in elements:
        for _ in range(count):
            tok = next(lines).split()
            if name == "vertex":
                names = [p[-1] for p in props]
                verts.append([float(tok[names.index(c)]) for c in ("x", "y", "z")])
            elif name == "face":
                k = int(tok[0])
                tris.extend(_fan([int(x) for x in tok[1 : 1 + k]]))
    return verts, tris


_READERS = {"off": _read_off, "obj": _read_obj, "ply": _read_ply_ascii}


def _format_of(path, fmt):
    fmt = (fmt or Path(path).suffix.lstrip(".")).lower()
    if fmt not in _READERS:
        raise MeshFormatError(f"unsupported mesh format {fmt!r}")
    return fmt


def load_mesh(path, format=None):
    """Read an OFF, OBJ or ASCII PLY triangle mesh.

    Polygonal faces are fan-triangulated. OBJ indices are converted to
    0-based; vertex order is preserved.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file", code="io.not_found")
    fmt = _format_of(path, format)
    try:
        verts, tris = _READERS[fmt](path)
    except (ValueError, IndexError, StopIteration) as exc:
        raise MeshFormatError(f"{path}: malformed {fmt.upper()} file ({exc})") from exc
    return TriMesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3))


def load_cloud(path):
    """Read a point cloud from XYZ text or a vertex-only ASCII PLY."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file", code="io.not_found")
    try:
        if path.suffix.lower() == ".ply":
            pts, _ = _read_ply_ascii(path)
        else:
            pts = [[float(x) for x in line.replace(",", " ").split()[:3]] for line in _data_lines(path)]
    except (ValueError, IndexError, StopIteration) as exc:
        raise MeshFormatError(f"{path}: malformed point file ({exc})") from exc
    return PointCloud(np.array(pts, dtype=float).reshape(-1, 3))


def _fmt(x):
    return repr(float(x)) if np.isfinite(x) else str(x)


def save_mesh(mesh, path):
    """Write OFF, OBJ or ASCII PLY (chosen by suffix) with round-trip precision."""
    path = Path(path)
    fmt = _format_of(path, None)
    v, t = mesh.vertices, mesh.triangles
    out = []
    if fmt == "off":
        out.append("OFF")
        out.append(f"{len(v)} {len(t)} 0")
        out.extend(" ".join(_fmt(x) for x in p) for p in v)
        out.extend(f"3 {a} {b} {c}" for a, b, c in t)
    elif fmt == "obj":
        out.extend("v " + " ".join(_fmt(x) for x in p) for p in v)
        out.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in t)
    else:
        out += ["ply", "format ascii 1.0", f"element vertex {len(v)}"]
        out += ["property double x", "property double y", "property double z"]
        out += [f"element face {len(t)}", "property list uchar int vertex_indices", "end_header"]
        out.extend(" ".join(_fmt(x) for x in p) for p in v)
        out.extend(f"3 {a} {b} {c}" for a, b, c in t)
    path.write_text("\n".join(out) + "\n", encoding="utf-8")


def save_cloud(cloud, path):
    Path(path).write_text("".join(" ".join(_fmt(x) for x in p) + "\n" for p in cloud.points), encoding="utf-8")


# ------------------------------------------------------- rings and geodesics


def vertex_ring(surface, center, depth):
    """Breadth-first ball of ``depth`` edge hops around ``center``."""
    if depth < 1:
        raise ValueError("ring depth must be >= 1")
    n = surface.n_vertices
    if not 0 <= center < n:
        raise IndexError(f"vertex {center} out of range")
    adj = surface.adjacency
    seen = {int(center)}
    frontier = deque([(int(center), 0)])
    while frontier:
        v, d = frontier.popleft()
        if d == depth:
            continue
        for w in adj.indices[adj.indptr[v] : adj.indptr[v + 1]]:
            w = int(w)
            if w not in seen:
                seen.add(w)
                frontier.append((w, d + 1))
    return RingSet(int(center), int(depth), frozenset(seen))


def ring_matrix(surface, depth):
    """Boolean CSR matrix whose row ``i`` holds the depth-``depth`` ring of ``i``.

    The diagonal is included.
    """
    if depth < 1:
        raise ValueError("ring depth must be >= 1")
    n = surface.n_vertices
    step = surface.adjacency.astype(bool).astype(np.int8) + sparse.identity(n, dtype=np.int8, format="csr")
    step = step.astype(bool).tocsr()
    ring = step
    for _ in range(depth - 1):
        ring = (ring @ step).astype(bool).tocsr()
    ring.sort_indices()
    return ring


def geodesic_distances(surface, source, cutoff=None):
    """Dijkstra distances from ``source`` to every vertex.

    Unreachable vertices, and vertices farther than ``cutoff`` when given,
    are reported as ``inf``.
    """
    if cutoff is not None and cutoff <= 0:
        raise ValueError("cutoff must be positive")
    if not 0 <= source < surface.n_vertices:
        raise IndexError(f"vertex {source} out of range")
    limit = np.inf if cutoff is None else float(cutoff)
    return csgraph.dijkstra(surface.adjacency, directed=False, indices=int(source), limit=limit)


def geodesic_matrix(surface, sources, cutoff=None, chunk=256):
    """Rows of Dijkstra distances for several sources, shape (len(sources), n)."""
    sources = np.asarray(sources, dtype=np.int64)
    limit = np.inf if cutoff is None else float(cutoff)
    out = np.empty((len(sources), surface.n_vertices))
    for s in range(0, len(sources), chunk):
        idx = sources[s : s + chunk]
        out[s : s + len(idx)] = csgraph.dijkstra(surface.adjacency, directed=False, indices=idx, limit=limit)
    return out


def geodesic_diameter(surface, samples, start=0):
    """Farthest-point-sampled lower bound on the edge-graph diameter.

    Runs Dijkstra from ``samples`` sources chosen by farthest-point sampling
    (seeded at ``start``) and returns the largest finite distance seen. With
    ``samples >= n`` every vertex is a source and the result is exact; with
    ``samples == 2`` it is the classic double sweep.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    n = surface.n_vertices
    samples = min(int(samples), n)
    if samples == n:
        d = geodesic_matrix(surface, np.arange(n))
        finite = d[np.isfinite(d)]
        return float(finite.max()) if finite.size else 0.0
    best = 0.0
    mind = np.full(n, np.inf)
    src = int(start)
    for _ in range(samples):
        d = geodesic_distances(surface, src)
        fin = np.isfinite(d)
        best = max(best, float(d[fin].max()))
        mind = np.minimum(mind, d)
        # next source: farthest reachable vertex from the chosen set
        cand = np.where(np.isfinite(mind), mind, -1.0)
        src = int(np.argmax(cand))
    return best
