"""Anchor growing: local distortion, anchor selection, sparsity patterns and
the outer correspondence loop with signature-based completion."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.sparse import csgraph

from . import descriptors as desc
from .errors import ConfigError, EmptyAnchorSetError, HKSUnavailableError, InputError
from .geometry import TriMesh, geodesic_diameter, ring_matrix
from .qap import QapProblem, SparsityPattern, extract_map, plan_from_map, solve

logger = logging.getLogger(__name__)

UNMAPPED = -1


# ------------------------------------------------------------------- types


def _read_rows(path, header):
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file", code="io.not_found")
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        head = next(rd, None)
        if head is None or head[: len(header)] != header:
            raise InputError(f"{path}: expected header {','.join(header)}", code="io.parse")
        return [row for row in rd if row]


@dataclass
class Correspondence:
    """Point map from ``n1`` sources to ``n2`` targets; -1 marks unmapped sources."""

    targets: np.ndarray
    n2: int

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.int64)
        bad = (self.targets < UNMAPPED) | (self.targets >= self.n2)
        if np.any(bad):
            raise ValueError(f"targets out of range at sources {np.flatnonzero(bad)[:10].tolist()}")

    @property
    def n1(self):
        return len(self.targets)

    @property
    def mapped(self):
        return self.targets >= 0

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
        targets = np.full(src.max() + 1 if src.size else 0, UNMAPPED, dtype=np.int64)
        targets[src] = tgt
        if n2 is None:
            n2 = int(tgt.max()) + 1 if tgt.size else 0
        return cls(targets, n2)


@dataclass
class AnchorSet:
    sources: np.ndarray
    targets: np.ndarray
    distortion: np.ndarray
    epsilon: float

    def __post_init__(self):
        self.sources = np.asarray(self.sources, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        self.distortion = np.asarray(self.distortion, dtype=float)
        if len(np.unique(self.sources)) != len(self.sources):
            raise ValueError("anchor sources must be distinct")

    def __len__(self):
        return len(self.sources)

    @property
    def pairs(self):
        return list(zip(self.sources.tolist(), self.targets.tolist()))

    def save_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["source_index", "target_index", "distortion"])
            for s, t, d in zip(self.sources.tolist(), self.targets.tolist(), self.distortion.tolist()):
                w.writerow([s, t, f"{d:.17g}"])

    @classmethod
    def load_csv(cls, path, epsilon=float("nan")):
        rows = _read_rows(path, ["source_index", "target_index", "distortion"])
        return cls([int(r[0]) for r in rows], [int(r[1]) for r in rows], [float(r[2]) for r in rows], epsilon)


@dataclass
class PipelineConfig:
    """Parameters of the anchor-growing loop.

    Defaults follow the published settings: 5 outer iterations, distortion
    tolerance decreasing linearly from 5 to 1, ring 2 for distortion balls,
    ring 4 for sparsity neighborhoods, gradient step 75, 300 eigenfunctions
    at diffusion time 50. ``hks_t`` is measured in squared mean edge lengths
    of the inputs, so the same value works at any mesh scale.
    """

    outer_iters: int = 5
    epsilon_schedule: tuple = None
    distortion_ring: int = 2
    sparsity_ring: int = 4
    mu: float = 1.0
    step0: float = 75.0
    inner_iters: int = 30
    tol: float = 1e-4
    postprocess: str = "hks"
    init: str = "shot_like"
    num_eigs: int = 300
    hks_t: float = 50.0
    shot_radius_factor: float = 3.0
    signature_anchors: int = 200
    diameter_samples: int = 16
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.epsilon_schedule is None:
            self.epsilon_schedule = tuple(np.linspace(5.0, 1.0, self.outer_iters).tolist()) if self.outer_iters > 1 else (1.0,)
        self.epsilon_schedule = tuple(float(e) for e in self.epsilon_schedule)
        self.validate()

    def validate(self):
        eps = np.asarray(self.epsilon_schedule)
        if len(eps) != self.outer_iters:
            raise ConfigError(f"epsilon_schedule has {len(eps)} entries for {self.outer_iters} iterations")
        if np.any(np.diff(eps) >= 0) or np.any(eps <= 0):
            raise ConfigError("epsilon_schedule must be positive and strictly decreasing")
        if not 1 <= self.distortion_ring < self.sparsity_ring:
            raise ConfigError("need 1 <= distortion_ring < sparsity_ring")
        if self.postprocess not in ("hks", "geodesic_sig", "none"):
            raise ConfigError(f"unknown postprocess mode {self.postprocess!r}")
        if self.init not in ("shot_like", "random", "provided"):
            raise ConfigError(f"unknown init mode {self.init!r}")
        if self.mu < 0 or self.step0 <= 0 or self.inner_iters < 1:
            raise ConfigError("mu >= 0, step0 > 0 and inner_iters >= 1 are required")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


# --------------------------------------------------------------- distortion


def _mapped_distances(surface, pairs_src, pairs_dst, limit=np.inf):
    """Exact distances d(pairs_src[k], pairs_dst[k]).

    Dijkstra runs once per unique source, first truncated at ``limit``;
    sources with a destination beyond the truncation are rerun unbounded.
    """
    out = np.full(len(pairs_src), np.inf)
    uniq, inv = np.unique(pairs_src, return_inverse=True)
    for bound in (limit, np.inf):
        todo = np.flatnonzero(~np.isfinite(out))
        if todo.size == 0:
            break
        srcs = np.unique(inv[todo])
        pos = np.full(len(uniq), -1)
        for s in range(0, len(srcs), 256):
            block = srcs[s : s + 256]
            pos[:] = -1
            pos[block] = np.arange(len(block))
            d = csgraph.dijkstra(surface.adjacency, directed=False, indices=uniq[block], limit=bound)
            sel = todo[pos[inv[todo]] >= 0]
            out[sel] = d[pos[inv[sel]], pairs_dst[sel]]
        if not np.isfinite(bound):
            break
    return out


def local_distortion(phi, surface1, surface2, ring_depth=2, mass_diag=None, ring=None):
    """Mass-weighted mean geodesic mismatch of ``phi`` over each source's ring ball.

    For source ``i`` with ring members ``j != i``::

        F(i) = sum_j m_j |d1(i, j) - d2(phi(i), phi(j))| / gamma_i / sum_j m_j

    where ``gamma_i`` is the largest ``d1(i, j)`` in the ball and ``m_j`` the
    diagonal of the source mass matrix. Unmapped members are skipped; a
    source that is unmapped, isolated, or whose members are all unmapped
    scores ``inf``.
    """
    targets = phi.targets if isinstance(phi, Correspondence) else np.asarray(phi)
    n = surface1.n_vertices
    if mass_diag is None:
        mass_diag = _mass_diagonal(surface1)
    R = ring if ring is not None else ring_matrix(surface1, ring_depth)
    counts = np.diff(R.indptr)
    I = np.repeat(np.arange(n), counts)
    J = R.indices
    off = I != J
    I, J = I[off], J[off]
    ok = (targets[I] >= 0) & (targets[J] >= 0)
    # bounded source-side search: ring members are within ring_depth edges
    limit = ring_depth * float(surface1.adjacency.data.max()) if surface1.adjacency.nnz else 0.0
    d1 = np.empty(len(I))
    for s in range(0, n, 512):
        sel = (I >= s) & (I < s + 512)
        if not sel.any():
            continue
        d = csgraph.dijkstra(surface1.adjacency, directed=False, indices=np.arange(s, min(s + 512, n)), limit=limit * (1 + 1e-12))
        d1[sel] = d[I[sel] - s, J[sel]]
    gamma = np.zeros(n)
    np.maximum.at(gamma, I, d1)
    d2 = np.full(len(I), np.inf)
    if ok.any():
        # mapped neighbors of a well-mapped source lie within a few rings on the target too
        lim2 = 2 * ring_depth * float(surface2.adjacency.data.max())
        d2[ok] = _mapped_distances(surface2, targets[I[ok]], targets[J[ok]], lim2)
    w = mass_diag[J] * ok
    de = np.where(ok, np.abs(d1 - d2) / np.where(gamma[I] > 0, gamma[I], 1.0), 0.0)
    num = np.bincount(I, weights=w * de, minlength=n)
    den = np.bincount(I, weights=w, minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        score = num / den
    score[(den <= 0) | (targets < 0)] = np.inf
    return score


def _mass_diagonal(surface):
    M = getattr(surface, "mass", None)
    if M is None:
        M = desc.assemble_mass(surface)
    M = getattr(M, "matrix", M)
    return M.diagonal()


def select_anchors(distortion, phi, epsilon):
    """Pairs ``(i, phi(i))`` whose distortion is strictly below ``epsilon``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    targets = phi.targets if isinstance(phi, Correspondence) else np.asarray(phi)
    distortion = np.asarray(distortion)
    keep = np.flatnonzero((distortion < epsilon) & (targets >= 0))
    return AnchorSet(keep, targets[keep], distortion[keep], float(epsilon))


def build_pattern(anchors, surface1, surface2, sparsity_ring=4, ring1=None, ring2=None):
    """Admissible entries induced by anchor neighborhoods.

    A non-anchor source ``s`` may map to any target in the union of the
    target-side neighborhoods of the anchors whose source-side neighborhood
    contains ``s``. Anchored sources keep a single entry at their anchor
    target. Sources outside every neighborhood are inactive this round.
    """
    if len(anchors) == 0:
        raise EmptyAnchorSetError("cannot build a sparsity pattern without anchors")
    R1 = ring1 if ring1 is not None else ring_matrix(surface1, sparsity_ring)
    R2 = ring2 if ring2 is not None else ring_matrix(surface2, sparsity_ring)
    P1 = R1[anchors.sources].astype(np.int32)
    P2 = R2[anchors.targets].astype(np.int32)
    A = (P1.T @ P2).tocoo()
    return SparsityPattern(surface1.n_vertices, surface2.n_vertices, A.row, A.col, dict(zip(anchors.sources.tolist(), anchors.targets.tolist())))


# ----------------------------------------------------------- initialization


def nearest_rows(a, b, chunk=1024):
    """Index of the nearest row of ``b`` (Euclidean) for each row of ``a``; ties to the smaller index."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    bb = np.einsum("ij,ij->i", b, b)
    out = np.empty(len(a), dtype=np.int64)
    for s in range(0, len(a), chunk):
        blk = a[s : s + chunk]
        d = bb[None, :] - 2.0 * blk @ b.T
        out[s : s + len(blk)] = np.argmin(d, axis=1)
    return out


def shot_initial_map(surface1, surface2, config, rng):
    # one support radius for both sides: descriptors from different radii are not comparable
    r = config.shot_radius_factor * 0.5 * (desc.mean_spacing(surface1) + desc.mean_spacing(surface2))
    f1 = desc.shot_like_descriptor(surface1, radius=r, workers=config.workers).values
    f2 = desc.shot_like_descriptor(surface2, radius=r, workers=config.workers).values
    fwd = nearest_rows(f1, f2)
    bwd = nearest_rows(f2, f1)
    mutual = bwd[fwd] == np.arange(len(fwd))
    targets = np.where(mutual, fwd, rng.integers(0, surface2.n_vertices, size=len(fwd)))
    logger.info("shot init: %d of %d mutual matches", int(mutual.sum()), len(fwd))
    return targets


def initial_map(surface1, surface2, config, phi0=None):
    rng = np.random.default_rng(config.seed)
    if phi0 is not None or config.init == "provided":
        if phi0 is None:
            raise ConfigError("init mode 'provided' requires an initial map")
        t = phi0.targets if isinstance(phi0, Correspondence) else np.asarray(phi0)
        return t.astype(np.int64).copy()
    n1, n2 = surface1.n_vertices, surface2.n_vertices
    if config.init == "random":
        return rng.permutation(n2)[:n1] if n1 <= n2 else rng.integers(0, n2, size=n1)
    return shot_initial_map(surface1, surface2, config, rng)


# ----------------------------------------------------------------- pipeline


@dataclass
class PipelineResult:
    correspondence: Correspondence
    anchors: AnchorSet
    log: list = field(default_factory=list)
    raw_map: Correspondence = None


def operators(surface):
    """Stiffness and mass of a surface (assembled for meshes, stored for clouds)."""
    S = getattr(surface, "stiffness", None)
    M = getattr(surface, "mass", None)
    if S is None or M is None:
        S, M = desc.assemble_stiffness(surface), desc.assemble_mass(surface)
    return S, M


def run_pipeline(surface1, surface2, config=None, phi0=None):
    """Grow anchors by repeated sparse QAP solves, then complete the map.

    Each outer iteration scores the current map, keeps the pairs below the
    iteration's tolerance as anchors, solves the relaxed assignment on the
    anchor neighborhoods and re-extracts the map by row argmax. Sources not
    touched by a round keep their previous target. The final anchors (last
    tolerance, final map) drive the signature-based completion.
    """
    config = config or PipelineConfig()
    S1, M1 = operators(surface1)
    S2, M2 = operators(surface2)
    prob = QapProblem(S1, S2, M1, M2, config.mu)
    mass_diag = M1.matrix.diagonal()
    dring = ring_matrix(surface1, config.distortion_ring)
    sring1 = ring_matrix(surface1, config.sparsity_ring)
    sring2 = ring_matrix(surface2, config.sparsity_ring)
    n2 = surface2.n_vertices

    t0 = time.perf_counter()
    targets = initial_map(surface1, surface2, config, phi0)
    log = []
    for k, eps in enumerate(config.epsilon_schedule, start=1):
        tk = time.perf_counter()
        dist = local_distortion(targets, surface1, surface2, config.distortion_ring, mass_diag, ring=dring)
        anchors = select_anchors(dist, targets, eps)
        if len(anchors) == 0:
            raise EmptyAnchorSetError(
                f"no anchors at iteration {k} (epsilon={eps:g}, min distortion {np.min(dist):.3g}); "
                "try a larger initial epsilon or a better initialization")
        pattern = build_pattern(anchors, surface1, surface2, config.sparsity_ring, sring1, sring2)
        D0 = plan_from_map(pattern, targets)
        res = solve(prob, pattern, D0, config.step0, config.inner_iters, config.tol)
        new = extract_map(res.plan)
        targets = np.where(new >= 0, new, targets)
        log.append(dict(iter=k, epsilon=eps, num_anchors=len(anchors), objective=res.objective,
                        seconds=time.perf_counter() - tk))
        logger.info("iteration %d: eps=%g anchors=%d free=%d objective=%.4g", k, eps, len(anchors), pattern.n_free, res.objective)

    raw = Correspondence(targets.copy(), n2)
    dist = local_distortion(targets, surface1, surface2, config.distortion_ring, mass_diag, ring=dring)
    final = select_anchors(dist, targets, config.epsilon_schedule[-1])
    if config.postprocess == "none":
        out = raw
    else:
        if len(final) == 0:
            raise EmptyAnchorSetError("no anchors survive for post-processing")
        out = postprocess(final, surface1, surface2, config.postprocess, config)
    log.append(dict(iter="final", epsilon=config.epsilon_schedule[-1], num_anchors=len(final), objective=float("nan"),
                    seconds=time.perf_counter() - t0))
    return PipelineResult(out, final, log, raw)


# ---------------------------------------------------------- post-processing


def _spread_anchors(anchors, surface1, count):
    """Up to ``count`` anchors chosen by geodesic farthest-point sampling."""
    if len(anchors) <= count:
        return np.arange(len(anchors))
    src = anchors.sources
    chosen = [0]
    mind = csgraph.dijkstra(surface1.adjacency, directed=False, indices=int(src[0]))[src]
    for _ in range(count - 1):
        nxt = int(np.argmax(np.where(np.isfinite(mind), mind, -1.0)))
        if mind[nxt] <= 0:
            break
        chosen.append(nxt)
        mind = np.minimum(mind, csgraph.dijkstra(surface1.adjacency, directed=False, indices=int(src[nxt]))[src])
    return np.array(chosen)


def _finite(a, fill):
    a = np.array(a, dtype=float)
    a[~np.isfinite(a)] = fill
    return a


def postprocess(anchors, surface1, surface2, mode="geodesic_sig", config=None):
    """Complete a map from anchors by nearest neighbors in signature space.

    Signatures are heat kernel values (``hks``) or geodesic distances
    (``geodesic_sig``) to corresponding anchors on each surface. Anchored
    sources keep their anchor targets.
    """
    config = config or PipelineConfig(postprocess=mode)
    if len(anchors) == 0:
        raise EmptyAnchorSetError("post-processing needs at least one anchor")
    n1, n2 = surface1.n_vertices, surface2.n_vertices
    targets = np.full(n1, UNMAPPED, dtype=np.int64)
    targets[anchors.sources] = anchors.targets
    todo = np.setdiff1d(np.arange(n1), anchors.sources)
    if todo.size == 0:
        return Correspondence(targets, n2)
    pick = _spread_anchors(anchors, surface1, config.signature_anchors)
    a1, a2 = anchors.sources[pick], anchors.targets[pick]
    if mode == "hks":
        for s in (surface1, surface2):
            if not isinstance(s, TriMesh) or not s.is_closed:
                raise HKSUnavailableError("hks post-processing needs closed meshes (boundary sensitive); use geodesic_sig")
            if s.n_vertices > desc.HKS_MAX_VERTICES:
                raise HKSUnavailableError(f"hks limited to {desc.HKS_MAX_VERTICES} vertices; use geodesic_sig")
        # diffusion time is given in squared mean edge lengths so it does not depend on scale
        h = 0.5 * (desc.mean_spacing(surface1) + desc.mean_spacing(surface2))
        t = config.hks_t * h * h
        sigs = []
        for s, a in ((surface1, a1), (surface2, a2)):
            S, M = operators(s)
            spec = desc.laplace_spectrum(S, M, min(config.num_eigs, s.n_vertices))
            sigs.append(desc.hks_cross(s, a, t=t, spectrum=spec).values)
        f1, f2 = sigs
    elif mode == "geodesic_sig":
        diam = geodesic_diameter(surface2, config.diameter_samples, start=int(a2[0]))
        f1 = _finite(desc.geodesic_signature(surface1, a1, diameter=diam).values, 1e3)
        f2 = _finite(desc.geodesic_signature(surface2, a2, diameter=diam).values, 1e3)
    else:
        raise ConfigError(f"unknown post-processing mode {mode!r}")
    targets[todo] = nearest_rows(f1[todo], f2)
    return Correspondence(targets, n2)
