"""Stiffness and mass operators assembled directly on point clouds.

Each point gets an adaptive neighborhood (nearest neighbors shrunk until
flat enough), a PCA tangent frame and a local Delaunay triangulation of the
projected neighbors. The triangles incident to the point contribute its row
of the cotangent stiffness and of the mass matrix, exactly as a mesh would.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .delaunay import local_star
from .descriptors import SparseOperator, _finish, cotangents, triangle_areas
from .errors import CollinearNeighborhoodError, InputError
from .geometry import PointCloud, edge_graph

logger = logging.getLogger(__name__)


class KnnResult(NamedTuple):
    indices: np.ndarray  # center first, then neighbors by increasing distance
    ratio: float
    converged: bool


@dataclass(frozen=True)
class LocalFrame:
    center: int
    neighbors: np.ndarray
    tangent: np.ndarray  # (2, 3) orthonormal rows
    normal: np.ndarray
    eigenvalues: np.ndarray  # descending

    @property
    def ratio(self):
        return float(self.eigenvalues[2] / self.eigenvalues[0]) if self.eigenvalues[0] > 0 else 0.0


@dataclass(frozen=True)
class LocalMesh:
    center: int
    neighbors: np.ndarray  # global ids; position 0 is the center
    triangles: np.ndarray  # (m, 3) positions into ``neighbors``, each starting at 0


def _flatness(p, counts):
    """lambda3/lambda1 of the mean-centered covariance of the first k rows of ``p`` for each k."""
    c1 = np.cumsum(p, axis=0)
    c2 = np.cumsum(p[:, :, None] * p[:, None, :], axis=0)
    k = np.asarray(counts)
    mean = c1[k - 1] / k[:, None]
    cov = c2[k - 1] / k[:, None, None] - mean[:, :, None] * mean[:, None, :]
    lam = np.linalg.eigvalsh(cov)
    lam = np.clip(lam, 0.0, None)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(lam[:, 2] > 0, lam[:, 0] / lam[:, 2], 0.0)


def adaptive_knn(cloud, i, K0=200, ratio=0.05, shrink=6, Kmin=12, tree=None):
    """Neighborhood of point ``i`` shrunk until it looks planar.

    Starts from the ``K0`` nearest neighbors and drops the ``shrink``
    farthest at a time until ``lambda3 / lambda1 < ratio`` or the count would
    fall below ``Kmin``. The covariance is taken over the center and its
    neighbors, centered at their mean and divided by their count.
    """
    pts = cloud.vertices
    n = len(pts)
    if n <= Kmin:
        raise InputError(f"cloud has {n} points, need more than Kmin={Kmin}", code="pointcloud.too_small")
    tree = tree or cKDTree(pts)
    K = min(K0, n - 1)
    _, idx = tree.query(pts[i], k=K + 1)
    idx = np.asarray(idx)
    # the query may tie the center with nothing else; make sure it leads
    idx = np.concatenate([[i], idx[idx != i][:K]])
    ks = []
    k = K
    while True:
        ks.append(k)
        if k - shrink < Kmin:
            break
        k -= shrink
    rel = pts[idx] - pts[i]
    r = _flatness(rel, np.array(ks) + 1)
    hit = np.flatnonzero(r < ratio)
    j = int(hit[0]) if hit.size else len(ks) - 1
    return KnnResult(idx[: ks[j] + 1], float(r[j]), bool(hit.size))


def local_frame(cloud, i, neighbors):
    pts = cloud.vertices[neighbors]
    c = pts - pts.mean(axis=0)
    lam, vec = np.linalg.eigh(c.T @ c / len(pts))
    lam = np.clip(lam[::-1], 0.0, None)
    vec = vec[:, ::-1]
    t1, t2 = vec[:, 0], vec[:, 1]
    nrm = np.cross(t1, t2)
    return LocalFrame(int(i), np.asarray(neighbors), np.vstack([t1, t2]), nrm, lam)


def build_local_mesh(cloud, i, neighbors):
    """Delaunay star of ``i`` among its neighbors projected to the PCA tangent plane."""
    neighbors = np.asarray(neighbors)
    if neighbors[0] != i:
        neighbors = np.concatenate([[i], neighbors[neighbors != i]])
    if len(neighbors) < 3:
        raise CollinearNeighborhoodError(f"point {i}: fewer than 3 points in neighborhood")
    frame = local_frame(cloud, i, neighbors)
    uv = (cloud.vertices[neighbors] - cloud.vertices[i]) @ frame.tangent.T
    tris = local_star(uv, 0)
    if len(tris) == 0:
        raise CollinearNeighborhoodError(f"point {i}: projected neighborhood is collinear")
    return LocalMesh(int(i), neighbors, tris)


@dataclass
class CloudOperators:
    stiffness: SparseOperator
    mass: SparseOperator
    local_meshes: list
    skipped: np.ndarray
    unconverged: np.ndarray


def assemble_cloud_operators(cloud, K0=200, ratio=0.05, shrink=6, Kmin=12, workers=1):
    """Row-wise local-mesh stiffness and mass, symmetrized, with rows re-centered.

    Off-diagonal entries of row ``i`` come from the triangles of the local
    mesh of ``i``; the two matrices are averaged with their transposes and
    the diagonals are then set so stiffness rows sum to zero and mass
    diagonals equal their off-diagonal row sums. Points whose neighborhood
    is degenerate get an empty stiffness row and the median mass diagonal.
    """
    pts = cloud.vertices
    n = len(pts)
    tree = cKDTree(pts)
    rs, cs, sv, mv = [], [], [], []
    meshes, skipped, unconverged = [], [], []
    for i in range(n):
        knn = adaptive_knn(cloud, i, K0, ratio, shrink, Kmin, tree=tree)
        if not knn.converged:
            unconverged.append(i)
        try:
            lm = build_local_mesh(cloud, i, knn.indices)
        except CollinearNeighborhoodError:
            skipped.append(i)
            meshes.append(None)
            continue
        meshes.append(lm)
        g = lm.neighbors[lm.triangles]  # (m, 3), column 0 is i
        p0, p1, p2 = pts[g[:, 0]], pts[g[:, 1]], pts[g[:, 2]]
        cot1 = cotangents(p1, p2, p0)  # faces edge (i, g2)
        cot2 = cotangents(p2, p0, p1)  # faces edge (i, g1)
        area = triangle_areas(pts, g)
        rs += [g[:, 0], g[:, 0]]
        cs += [g[:, 1], g[:, 2]]
        sv += [-0.5 * cot2, -0.5 * cot1]
        mv += [area / 12.0, area / 12.0]
    if len(skipped) > 0.05 * n:
        warnings.warn(f"{len(skipped)} of {n} points skipped in cloud assembly: {skipped[:20]}", RuntimeWarning)
    r = np.concatenate(rs) if rs else np.zeros(0, dtype=np.int64)
    c = np.concatenate(cs) if cs else np.zeros(0, dtype=np.int64)
    S = sparse.csr_matrix((np.concatenate(sv) if sv else [], (r, c)), shape=(n, n))
    M = sparse.csr_matrix((np.concatenate(mv) if mv else [], (r, c)), shape=(n, n))
    S = ((S + S.T) * 0.5).tocoo()
    M = ((M + M.T) * 0.5).tocoo()
    S = _finish(S.row, S.col, S.data, n, "stiffness")
    M = _finish(M.row, M.col, M.data, n, "mass")
    if skipped:
        d = M.matrix.diagonal()
        ok = np.ones(n, dtype=bool)
        ok[skipped] = False
        fill = np.zeros(n)
        fill[skipped] = np.where(d[skipped] > 0, 0.0, float(np.median(d[ok])) if ok.any() else 1.0)
        M = SparseOperator((M.matrix + sparse.diags(fill)).tocsr(), "mass")
    return CloudOperators(S, M, meshes,
                          np.array(skipped, dtype=np.int64), np.array(unconverged, dtype=np.int64))


class CloudSurface:
    """A point cloud carrying local-mesh operators and a geodesic graph.

    Geodesics run over the union of local-mesh edges.
    """

    def __init__(self, cloud, **params):
        self.cloud = cloud if isinstance(cloud, PointCloud) else PointCloud(cloud)
        ops = assemble_cloud_operators(self.cloud, **params)
        self.stiffness, self.mass = ops.stiffness, ops.mass
        self.local_meshes = ops.local_meshes
        self.skipped = ops.skipped
        self.unconverged = ops.unconverged

    @property
    def vertices(self):
        return self.cloud.vertices

    @property
    def n_vertices(self):
        return self.cloud.n_vertices

    @cached_property
    def edges(self):
        e = []
        for lm in self.local_meshes:
            if lm is None:
                continue
            g = lm.neighbors[lm.triangles]
            e += [g[:, [0, 1]], g[:, [0, 2]], g[:, [1, 2]]]
        e = np.sort(np.concatenate(e), axis=1) if e else np.zeros((0, 2), dtype=np.int64)
        return np.unique(e, axis=0)

    @cached_property
    def adjacency(self):
        e = self.edges
        lengths = np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)
        return edge_graph(self.n_vertices, e, lengths)
