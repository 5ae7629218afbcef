"""Pairwise operators (stiffness, mass) and pointwise signatures.

The stiffness and mass matrices are the sparse pairwise descriptors fed to the
quadratic assignment. Pointwise signatures (SHOT-like, heat kernel, geodesic
distance to anchors) are used to initialize and to complete correspondences.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io
import scipy.linalg
from scipy import sparse
from scipy.spatial import cKDTree

from .errors import HKSUnavailableError, InputError, NumericalError
from .geometry import TriMesh, geodesic_diameter, geodesic_matrix

COT_WARN = 1e8
HKS_MAX_VERTICES = 6000


@dataclass(frozen=True)
class SparseOperator:
    """Symmetric sparse matrix holding a stiffness or mass operator."""

    matrix: sparse.csr_matrix
    kind: str

    @property
    def n(self):
        return self.matrix.shape[0]

    def entries(self):
        coo = self.matrix.tocoo()
        return coo.row, coo.col, coo.data

    def toarray(self):
        return self.matrix.toarray()

    def save(self, path):
        scipy.io.mmwrite(str(path), self.matrix, comment=f"kind={self.kind}", field="real", precision=17, symmetry="general")

    @classmethod
    def load(cls, path, kind=None):
        path = Path(path)
        if not path.exists():
            raise InputError(f"{path}: no such file", code="io.not_found")
        if kind is None:
            kind = "stiffness"
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    if not line.startswith("%"):
                        break
                    if "kind=" in line:
                        kind = line.split("kind=", 1)[1].strip()
        m = sparse.csr_matrix(scipy.io.mmread(str(path)))
        m.sort_indices()
        return cls(m, kind)


def cotangents(p0, p1, p2):
    """Cotangent of the angle at ``p0`` in triangles (p0, p1, p2), vectorized."""
    u = p1 - p0
    w = p2 - p0
    dot = np.einsum("ij,ij->i", u, w)
    cross = np.linalg.norm(np.cross(u, w), axis=1)
    return dot / cross


def triangle_areas(vertices, triangles):
    """Triangle areas computed from the smallest vertex id of each face.

    Fixing the base vertex makes the rounding independent of how a face is
    listed, so mesh and point-cloud assembly agree bit for bit.
    """
    t = np.sort(np.asarray(triangles), axis=1)
    v = vertices
    cr = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
    return 0.5 * np.linalg.norm(cr, axis=1)


def _finish(rows, cols, vals, n, kind):
    off = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    rs = np.asarray(off.sum(axis=1)).ravel()
    diag = -rs if kind == "stiffness" else rs
    m = (off + sparse.diags(diag, format="csr")).tocsr()
    m.sort_indices()
    return SparseOperator(m, kind)


def assemble_stiffness(mesh: TriMesh) -> SparseOperator:
    """Cotangent stiffness matrix.

    Off-diagonal ``S_ij = -1/2 (cot a_ij + cot b_ij)`` over the angles facing
    edge ``ij`` (a single term on boundary edges); the diagonal is the
    negated off-diagonal row sum, so ``S @ 1 == 0``.
    """
    v, t = mesh.vertices, mesh.triangles
    rows, cols, vals = [], [], []
    for k in range(3):
        a, b, c = t[:, k], t[:, (k + 1) % 3], t[:, (k + 2) % 3]
        cot = cotangents(v[a], v[b], v[c])
        big = np.abs(cot) > COT_WARN
        if np.any(big):
            warnings.warn(f"near-degenerate triangles {np.flatnonzero(big)[:10].tolist()}", RuntimeWarning, stacklevel=2)
        rows += [b, c]
        cols += [c, b]
        vals += [-0.5 * cot, -0.5 * cot]
    return _finish(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), mesh.n_vertices, "stiffness")


def assemble_mass(mesh: TriMesh) -> SparseOperator:
    """Mass matrix with ``M_ij = (|t1| + |t2|) / 12`` per edge, ``M_ii = sum_k M_ik``.

    This equals the consistent linear FEM mass matrix; its entries sum to
    the surface area.
    """
    t = mesh.triangles
    w = triangle_areas(mesh.vertices, t) / 12.0
    rows, cols, vals = [], [], []
    for k in range(3):
        b, c = t[:, (k + 1) % 3], t[:, (k + 2) % 3]
        rows += [b, c]
        cols += [c, b]
        vals += [w, w]
    return _finish(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), mesh.n_vertices, "mass")


# ------------------------------------------------------------- signatures


@dataclass(frozen=True)
class PointSignature:
    values: np.ndarray
    kind: str
    params: dict = field(default_factory=dict)

    @property
    def length(self):
        return self.values.shape[1]

    def save_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["vertex"] + [f"{self.kind}_{k}" for k in range(self.length)])
            for i, row in enumerate(self.values):
                w.writerow([i] + [f"{x:.17g}" for x in row])


def point_normals(surface, k=10):
    """Vertex normals for meshes; PCA normals oriented away from the centroid for clouds."""
    if isinstance(surface, TriMesh):
        return surface.vertex_normals
    p = surface.vertices
    _, idx = cKDTree(p).query(p, k=min(k + 1, len(p)))
    nb = p[idx] - p[idx].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    _, vecs = np.linalg.eigh(cov)
    nrm = vecs[:, :, 0]
    flip = np.einsum("ij,ij->i", nrm, p - p.mean(axis=0)) < 0
    nrm[flip] *= -1
    return nrm


def mean_spacing(surface):
    if isinstance(surface, TriMesh):
        return surface.mean_edge_length
    p = surface.vertices
    d, _ = cKDTree(p).query(p, k=min(7, len(p)))
    return float(d[:, 1:].mean())


def _majority_sign(proj, fallback):
    # count vote, then summed projection on ties
    s = np.sum(proj > 0) - np.sum(proj < 0)
    if s == 0:
        s = proj.sum()
    if s == 0:
        return fallback
    return 1.0 if s > 0 else -1.0


def shot_like_descriptor(surface, radius=None, azimuth_sectors=8, elevation_sectors=2,
                         radial_shells=2, hist_bins=11, workers=1):
    """Simplified SHOT descriptor (length 8*2*2*11 = 352 by default).

    For each point a local reference frame is built from the weighted
    covariance of neighbors within ``radius``; each axis sign points toward
    the majority of neighbor offsets. Neighbors are binned into azimuth,
    elevation and radial sectors, and each sector holds a histogram of the
    cosine between neighbor normal and center normal. Descriptors are scaled
    to unit Euclidean norm; points without neighbors get zeros.
    """
    p = np.asarray(surface.vertices, dtype=float)
    n = len(p)
    if radius is None:
        radius = 3.0 * mean_spacing(surface)
    if radius <= 0:
        raise ValueError("radius must be positive")
    if elevation_sectors != 2:
        raise ValueError("only 2 elevation sectors (above/below tangent plane) are supported")
    normals = point_normals(surface)
    tree = cKDTree(p)
    nbrs = tree.query_ball_point(p, radius, workers=workers)
    length = azimuth_sectors * elevation_sectors * radial_shells * hist_bins
    out = np.zeros((n, length))
    empty = []
    for i in range(n):
        idx = np.array([j for j in nbrs[i] if j != i], dtype=np.int64)
        if idx.size == 0:
            empty.append(i)
            continue
        off = p[idx] - p[i]
        dist = np.linalg.norm(off, axis=1)
        wts = radius - dist
        cov = (off * wts[:, None]).T @ off / wts.sum()
        _, vecs = np.linalg.eigh(cov)
        x_axis = vecs[:, 2] * _majority_sign(off @ vecs[:, 2], 1.0)
        z_fallback = 1.0 if vecs[:, 0] @ normals[i] >= 0 else -1.0
        z_axis = vecs[:, 0] * _majority_sign(off @ vecs[:, 0], z_fallback)
        y_axis = np.cross(z_axis, x_axis)
        lx, ly, lz = off @ x_axis, off @ y_axis, off @ z_axis
        az = np.floor((np.arctan2(ly, lx) + np.pi) / (2 * np.pi) * azimuth_sectors).astype(np.int64) % azimuth_sectors
        el = (lz > 0).astype(np.int64)
        sh = np.minimum((dist / radius * radial_shells).astype(np.int64), radial_shells - 1)
        cos = np.clip(normals[idx] @ normals[i], -1.0, 1.0)
        hb = np.minimum(np.floor((cos + 1.0) / 2.0 * hist_bins).astype(np.int64), hist_bins - 1)
        cell = ((az * elevation_sectors + el) * radial_shells + sh) * hist_bins + hb
        h = np.bincount(cell, minlength=length).astype(float)
        out[i] = h / np.linalg.norm(h)
    if empty:
        warnings.warn(f"{len(empty)} points have empty neighborhoods; zero descriptors assigned", RuntimeWarning, stacklevel=2)
    params = dict(radius=radius, azimuth_sectors=azimuth_sectors, elevation_sectors=elevation_sectors,
                  radial_shells=radial_shells, hist_bins=hist_bins, empty=empty)
    return PointSignature(out, "shot_like", params)


# -------------------------------------------------------------- heat kernel


@dataclass(frozen=True)
class Spectrum:
    """Generalized eigenpairs of ``S psi = lambda M psi`` with lumped ``M``."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    lumped_mass: np.ndarray


def laplace_spectrum(stiffness, mass, num_eigs):
    """Smallest ``num_eigs`` eigenpairs via a dense symmetric solve.

    The mass matrix is lumped to its row sums and the problem is reduced to
    a standard symmetric one by the similarity transform ``M^-1/2 S M^-1/2``.
    Eigenvectors are normalized so that ``psi.T @ diag(m) @ psi = I``.
    """
    S = stiffness.matrix if isinstance(stiffness, SparseOperator) else stiffness
    M = mass.matrix if isinstance(mass, SparseOperator) else mass
    n = S.shape[0]
    if n > HKS_MAX_VERTICES:
        raise HKSUnavailableError(f"dense eigensolve limited to {HKS_MAX_VERTICES} vertices, mesh has {n}; use geodesic_sig")
    if not 1 <= num_eigs <= n:
        raise ValueError(f"num_eigs must be in [1, {n}]")
    m = np.asarray(M.sum(axis=1)).ravel()
    if np.any(m <= 0):
        raise NumericalError("lumped mass has non-positive entries (isolated vertices?)")
    r = 1.0 / np.sqrt(m)
    A = S.toarray() * r[:, None] * r[None, :]
    A = 0.5 * (A + A.T)
    try:
        w, U = scipy.linalg.eigh(A, subset_by_index=[0, num_eigs - 1])
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"eigensolver failed: {exc}") from exc
    return Spectrum(w, U * r[:, None], m)


def _spectrum_for(mesh, num_eigs, spectrum):
    if spectrum is not None:
        return spectrum
    return laplace_spectrum(assemble_stiffness(mesh), assemble_mass(mesh), num_eigs)


def heat_kernel(spectrum, rows, cols, t):
    """``H(x, x', t) = sum_k exp(-lambda_k t) psi_k(x) psi_k(x')`` for index arrays."""
    decay = np.exp(-np.clip(spectrum.eigenvalues, 0, None) * t)
    psi = spectrum.eigenvectors
    return (psi[rows] * decay) @ psi[cols].T


def hks(mesh, num_eigs=300, t=50.0, spectrum=None):
    """Heat kernel signature ``H(x, x, t)``; one column per diffusion time."""
    spec = _spectrum_for(mesh, num_eigs, spectrum)
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(ts <= 0):
        raise ValueError("diffusion time must be positive")
    psi2 = spec.eigenvectors**2
    lam = np.clip(spec.eigenvalues, 0, None)
    vals = psi2 @ np.exp(-np.outer(lam, ts))
    return PointSignature(vals, "hks", dict(num_eigs=len(lam), t=ts.tolist()))


def hks_cross(mesh, anchors, num_eigs=300, t=50.0, spectrum=None):
    """Heat kernel from every vertex to each anchor, shape (n, len(anchors))."""
    if t <= 0:
        raise ValueError("diffusion time must be positive")
    anchors = np.asarray(anchors, dtype=np.int64)
    spec = _spectrum_for(mesh, num_eigs, spectrum)
    vals = heat_kernel(spec, np.arange(len(spec.eigenvectors)), anchors, t)
    return PointSignature(vals, "hks", dict(num_eigs=len(spec.eigenvalues), t=float(t), anchors=anchors.tolist()))


# ------------------------------------------------------ geodesic signature


def geodesic_signature(surface, anchors, diameter=None, diameter_samples=16):
    """Dijkstra distance from every vertex to each anchor, divided by a diameter.

    ``diameter`` defaults to the farthest-point estimate seeded at the first
    anchor, so corresponding anchors on isometric surfaces give identical
    normalizations. Unreachable anchors yield ``inf`` coordinates and are
    listed in ``params['unreachable']``.
    """
    anchors = np.asarray(anchors, dtype=np.int64)
    if anchors.size == 0:
        raise ValueError("at least one anchor is required")
    if diameter is None:
        diameter = geodesic_diameter(surface, diameter_samples, start=int(anchors[0]))
    if not diameter > 0:
        raise NumericalError("geodesic diameter must be positive")
    vals = geodesic_matrix(surface, anchors).T / diameter
    bad = np.flatnonzero(~np.all(np.isfinite(vals), axis=0))
    if bad.size:
        warnings.warn(f"{bad.size} anchors unreachable from some vertices", RuntimeWarning, stacklevel=2)
    return PointSignature(vals, "geodesic_sig", dict(anchors=anchors.tolist(), diameter=float(diameter), unreachable=bad.tolist()))
