"""Ground-truth errors, distortion statistics, synthetic pairs and SVG plots."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
from scipy.sparse import csgraph
from scipy.spatial.transform import Rotation

from .anchors import Correspondence, _read_rows, local_distortion
from .errors import BadIndexError, FragmentationError
from .geometry import TriMesh, geodesic_diameter, geodesic_distances

DEFAULT_THRESHOLDS = np.linspace(0.0, 0.25, 100)
DISTORTION_THRESHOLDS = np.linspace(0.0, 2.0, 100)
MIN_FRAGMENT = 10


def _fmt(x):
    return f"{x:.17g}"


@dataclass
class GroundTruth:
    """True target per source; -1 marks sources with no counterpart."""

    targets: np.ndarray
    n2: int
    provenance: str = "synthetic"

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if np.any((self.targets < -1) | (self.targets >= self.n2)):
            raise BadIndexError("ground-truth target out of range")

    @property
    def matchable(self):
        return self.targets >= 0

    def inverse(self):
        """Target-to-source map (-1 where no source lands); assumes injectivity."""
        inv = np.full(self.n2, -1, dtype=np.int64)
        ok = self.matchable
        inv[self.targets[ok]] = np.flatnonzero(ok)
        return GroundTruth(inv, len(self.targets), self.provenance)

    def save_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["source_index", "target_index"])
            w.writerows(enumerate(self.targets.tolist()))

    @classmethod
    def load_csv(cls, path, n2=None):
        rows = _read_rows(path, ["source_index", "target_index"])
        src = np.array([int(r[0]) for r in rows], dtype=np.int64)
        tgt = np.array([int(r[1]) for r in rows], dtype=np.int64)
        if src.size and src.min() < 0:
            raise BadIndexError(f"{path}: negative source index")
        t = np.full(src.max() + 1 if src.size else 0, -1, dtype=np.int64)
        t[src] = tgt
        if n2 is None:
            n2 = int(tgt.max()) + 1 if tgt.size else 0
        return cls(t, n2, "file")


# ------------------------------------------------------------------ errors


def geodesic_error(phi, gt, surface2, diameter=None, diameter_samples=16):
    """Per-source ``d2(phi(x), gt(x)) / diam``.

    Sources without a ground-truth counterpart get NaN; unmapped or
    unreachable predictions get +inf.
    """
    pred = phi.targets if isinstance(phi, Correspondence) else np.asarray(phi)
    true = gt.targets if isinstance(gt, GroundTruth) else np.asarray(gt)
    n2 = surface2.n_vertices
    if len(pred) != len(true):
        raise BadIndexError(f"map has {len(pred)} sources but ground truth has {len(true)}")
    if np.any(pred >= n2) or np.any(true >= n2) or np.any(pred < -1):
        raise BadIndexError(f"target index outside [0, {n2})")
    if diameter is None:
        diameter = geodesic_diameter(surface2, min(diameter_samples, n2))
    err = np.full(len(pred), np.nan)
    ev = true >= 0
    err[ev & (pred < 0)] = np.inf
    ok = np.flatnonzero(ev & (pred >= 0))
    uniq, inv = np.unique(true[ok], return_inverse=True)
    for s in range(0, len(uniq), 256):
        d = csgraph.dijkstra(surface2.adjacency, directed=False, indices=uniq[s : s + 256])
        sel = (inv >= s) & (inv < s + 256)
        err[ok[sel]] = d[inv[sel] - s, pred[ok[sel]]] / diameter
    return err


def error_cdf(errors, thresholds=None):
    """Fraction of evaluated sources with error at most each threshold.

    NaN entries (not evaluated) are dropped; +inf never counts as correct.
    """
    t = DEFAULT_THRESHOLDS if thresholds is None else np.asarray(thresholds, dtype=float)
    e = np.asarray(errors, dtype=float)
    e = np.sort(e[~np.isnan(e)])
    if e.size == 0:
        return t, np.zeros(len(t))
    return t, np.searchsorted(e, t, side="right") / e.size


@dataclass
class ErrorReport:
    per_vertex_error: np.ndarray
    thresholds: np.ndarray
    cdf: np.ndarray
    mean: float
    median: float
    n_unreachable: int
    distortion: np.ndarray = None
    distortion_thresholds: np.ndarray = None
    distortion_cdf: np.ndarray = None

    @classmethod
    def from_errors(cls, errors, thresholds=None):
        e = np.asarray(errors, dtype=float)
        fin = e[np.isfinite(e)]
        t, c = error_cdf(e, thresholds)
        return cls(e, t, c, float(fin.mean()) if fin.size else float("nan"),
                   float(np.median(fin)) if fin.size else float("nan"), int(np.sum(np.isinf(e))))

    def save_errors_csv(self, path):
        cols = [("error", self.per_vertex_error)]
        if self.distortion is not None:
            cols.append(("distortion", self.distortion))
        write_columns(path, "source_index", np.arange(len(self.per_vertex_error)), cols)

    def save_cdf_csv(self, path):
        write_columns(path, "threshold", self.thresholds, [("fraction", self.cdf)])


def write_columns(path, key, keys, columns):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([key] + [name for name, _ in columns])
        for i, k in enumerate(np.asarray(keys).tolist()):
            first = str(k) if isinstance(k, int) else _fmt(k)
            w.writerow([first] + [_fmt(float(v[i])) for _, v in columns])


def read_columns(path):
    """Header and float columns of a CSV written by :func:`write_columns`."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    head = rows[0]
    data = np.array([[float(x) for x in r] for r in rows[1:]]).reshape(-1, len(head))
    return head, data


def distortion_report(phi, surface1, surface2, ring_depth=2, thresholds=None):
    """Local distortion of ``phi`` per source and its CDF."""
    d = local_distortion(phi, surface1, surface2, ring_depth)
    t, c = error_cdf(d, DISTORTION_THRESHOLDS if thresholds is None else thresholds)
    return d, t, c


# --------------------------------------------------------- synthetic pairs


def _compact(vertices, triangles):
    used = np.unique(triangles)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return vertices[used], remap[triangles], remap


def _check_fragments(mesh):
    ncomp, label = csgraph.connected_components(mesh.adjacency, directed=False)
    sizes = np.bincount(label)
    if sizes.min() < MIN_FRAGMENT:
        raise FragmentationError(f"perturbation leaves {int(np.sum(sizes < MIN_FRAGMENT))} fragment(s) "
                                 f"with fewer than {MIN_FRAGMENT} vertices")


def rotation_matrix(spec, seed=0):
    """3x3 rotation from None, a matrix, ``'random'`` or ``'<axis>:<degrees>'``."""
    if spec is None:
        return None
    if isinstance(spec, str):
        if spec == "random":
            return Rotation.random(random_state=seed).as_matrix()
        axis, deg = spec.split(":")
        return Rotation.from_euler(axis.strip().lower(), float(deg), degrees=True).as_matrix()
    return np.asarray(spec, dtype=float)


def synth_pair(mesh, rotation=None, translation=None, permutation_seed=None, delete_faces=0.0,
               crop=None, noise=0.0, seed=0):
    """Rigidly moved, relabeled and optionally damaged copy of ``mesh``.

    Parameters
    ----------
    rotation : None, (3, 3) array, 'random' or '<axis>:<degrees>'
    translation : 3-vector or None
    permutation_seed : int or None
        Seed of the vertex relabeling; None keeps vertex order.
    delete_faces : float
        Percentage (< 50) of faces removed at random.
    crop : (center, radius) or None
        Keep only faces whose vertices lie within ``radius * diameter``
        (geodesic) of vertex ``center``.
    noise : float
        Gaussian vertex jitter, as a fraction of the mean edge length.

    Returns
    -------
    mesh2 : TriMesh
    gt : GroundTruth
        Maps every source vertex to its image, -1 for removed vertices.
    """
    if not 0 <= delete_faces < 50:
        raise ValueError("delete_faces must be a percentage in [0, 50)")
    rng = np.random.default_rng(seed)
    v, t = mesh.vertices.copy(), mesh.triangles.copy()
    if crop is not None:
        center, radius = crop
        diam = geodesic_diameter(mesh, min(16, mesh.n_vertices), start=int(center))
        d = geodesic_distances(mesh, int(center))
        t = t[np.all(d[t] <= radius * diam, axis=1)]
    if delete_faces > 0:
        k = int(round(delete_faces / 100.0 * len(t)))
        drop = rng.choice(len(t), size=k, replace=False)
        t = np.delete(t, drop, axis=0)
    if len(t) < len(mesh.triangles):
        if len(t) == 0:
            raise FragmentationError("perturbation removed every face")
        v, t, remap = _compact(v, t)
        keep_v = remap
    else:
        keep_v = np.arange(len(v))
    if noise > 0:
        v = v + rng.normal(scale=noise * mesh.mean_edge_length, size=v.shape)
    R = rotation_matrix(rotation, seed)
    if R is not None:
        v = v @ R.T
    if translation is not None:
        v = v + np.asarray(translation, dtype=float)
    n = len(v)
    perm = np.arange(n) if permutation_seed is None else np.random.default_rng(permutation_seed).permutation(n)
    # vertex k of the damaged copy becomes vertex perm[k]
    inv = np.argsort(perm)
    out = TriMesh(v[inv], perm[t])
    if len(t) < len(mesh.triangles):
        _check_fragments(out)
    targets = np.where(keep_v >= 0, perm[np.maximum(keep_v, 0)], -1)
    return out, GroundTruth(targets, n, "synthetic")


# ------------------------------------------------------------------- plots

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b"]


def cdf_svg(series, title="", xlabel="geodesic error", ylabel="fraction of correspondences",
            width=640, height=420):
    """SVG line plot of one or more (label, x, y) series with axes and a legend."""
    ml, mr, mt, mb = 60, 20, 30, 50
    pw, ph = width - ml - mr, height - mt - mb
    xs = np.concatenate([np.asarray(s[1], dtype=float) for s in series]) if series else np.array([0.0, 1.0])
    x0, x1 = float(xs.min()), float(xs.max())
    if x1 <= x0:
        x1 = x0 + 1.0

    def px(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def py(y):
        return mt + (1.0 - y) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-family="sans-serif" font-size="14">{escape(title)}</text>',
           f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
           f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>']
    for k in range(6):
        xv = x0 + (x1 - x0) * k / 5
        yv = k / 5
        out.append(f'<line x1="{px(xv):.2f}" y1="{mt + ph}" x2="{px(xv):.2f}" y2="{mt + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{px(xv):.2f}" y="{mt + ph + 18}" text-anchor="middle" font-family="sans-serif" font-size="11">{xv:.3g}</text>')
        out.append(f'<line x1="{ml - 5}" y1="{py(yv):.2f}" x2="{ml}" y2="{py(yv):.2f}" stroke="black"/>')
        out.append(f'<text x="{ml - 8}" y="{py(yv) + 4:.2f}" text-anchor="end" font-family="sans-serif" font-size="11">{yv:.1f}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" font-family="sans-serif" font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
               f'transform="rotate(-90 14 {mt + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (label, x, y) in enumerate(series):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{px(a):.2f},{py(min(max(b, 0.0), 1.0)):.2f}" for a, b in zip(np.asarray(x, float), np.asarray(y, float)))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = mt + 12 + 16 * i
        out.append(f'<line x1="{ml + pw - 150}" y1="{ly}" x2="{ml + pw - 130}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw - 125}" y="{ly + 4}" font-family="sans-serif" font-size="11">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
