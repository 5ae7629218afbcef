"""Relaxed quadratic assignment over a sparse transport plan.

Plans are stored with sources as rows and targets as columns (``n1 x n2``);
the objective

    1/2 ||S1 D - D S2||_F^2 + mu/2 ||M1 D - D M2||_F^2

is the source-major transpose of the target-major form ``||D' S1 - S2 D'||``
and takes the same value. Only admissible entries of a
:class:`SparsityPattern` are ever materialized.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import splu

from .errors import DivergenceError, InfeasiblePatternError, InputError

logger = logging.getLogger(__name__)

MARGINAL_TOL = 1e-9


class SparsityPattern:
    """Admissible entries of a transport plan.

    Parameters
    ----------
    n1, n2 : int
        Number of sources (rows) and targets (columns).
    rows, cols : array_like
        Free admissible entries. Entries falling on anchored rows are dropped.
    anchors : dict or sequence of (source, target), optional
        Anchored rows have exactly one admissible entry, fixed to 1.
    require_all : bool
        Demand an admissible entry in every row and column (full matching);
        otherwise rows and columns without entries are simply inactive.

    Column marginals are proportional: inside each connected component of
    the bipartite row/column graph, every column receives
    ``rows_in_component / cols_in_component``, which is 1 for square blocks
    and ``n1 / n2`` for a full rectangular pattern.
    """

    def __init__(self, n1, n2, rows=(), cols=(), anchors=None, require_all=False):
        self.n1, self.n2 = int(n1), int(n2)
        anchors = dict(anchors.items() if isinstance(anchors, dict) else (anchors or ()))
        a_src = np.array(sorted(anchors), dtype=np.int64)
        a_tgt = np.array([anchors[s] for s in a_src.tolist()], dtype=np.int64)
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        if rows.shape != cols.shape:
            raise ValueError("rows and cols must have equal length")
        for arr, lim, what in ((rows, self.n1, "row"), (cols, self.n2, "column"), (a_src, self.n1, "anchor source"), (a_tgt, self.n2, "anchor target")):
            if arr.size and (arr.min() < 0 or arr.max() >= lim):
                raise IndexError(f"{what} index out of range")
        anchored = np.zeros(self.n1, dtype=bool)
        anchored[a_src] = True
        keep = ~anchored[rows]
        m = sparse.csr_matrix((np.ones(int(keep.sum()), dtype=np.int8), (rows[keep], cols[keep])), shape=(self.n1, self.n2))
        m.sum_duplicates()
        m.sort_indices()
        self.indptr = m.indptr
        self.indices = m.indices.astype(np.int64)
        self.anchor_sources = a_src
        self.anchor_targets = a_tgt
        if require_all:
            empty_r = np.flatnonzero(self.row_counts == 0)
            empty_c = np.flatnonzero(self.col_counts == 0)
            if empty_r.size or empty_c.size:
                raise InfeasiblePatternError(empty_r.tolist(), empty_c.tolist())

    @classmethod
    def full(cls, n1, n2, anchors=None):
        r, c = np.divmod(np.arange(n1 * n2), n2)
        return cls(n1, n2, r, c, anchors, require_all=True)

    @property
    def n_free(self):
        return len(self.indices)

    @cached_property
    def rows(self):
        """Row index of every free entry."""
        return np.repeat(np.arange(self.n1), np.diff(self.indptr))

    @property
    def cols(self):
        return self.indices

    @property
    def anchors(self):
        return dict(zip(self.anchor_sources.tolist(), self.anchor_targets.tolist()))

    @cached_property
    def row_counts(self):
        r = np.diff(self.indptr).astype(np.int64)
        r[self.anchor_sources] += 1
        return r

    @cached_property
    def col_counts(self):
        return np.bincount(np.concatenate([self.indices, self.anchor_targets]), minlength=self.n2).astype(np.int64)

    @cached_property
    def free_col_counts(self):
        return np.bincount(self.indices, minlength=self.n2).astype(np.int64)

    @cached_property
    def anchor_col_counts(self):
        return np.bincount(self.anchor_targets, minlength=self.n2).astype(np.int64)

    @cached_property
    def free_rows(self):
        return np.flatnonzero(np.diff(self.indptr) > 0)

    @cached_property
    def free_cols(self):
        return np.flatnonzero(self.free_col_counts > 0)

    @cached_property
    def active_rows(self):
        return np.flatnonzero(self.row_counts > 0)

    @cached_property
    def active_cols(self):
        return np.flatnonzero(self.col_counts > 0)

    @cached_property
    def col_targets(self):
        """Column sum targets over all admissible entries (anchors included)."""
        n1, n2 = self.n1, self.n2
        r = np.concatenate([self.rows, self.anchor_sources])
        c = np.concatenate([self.indices, self.anchor_targets]) + n1
        g = sparse.coo_matrix((np.ones(len(r)), (r, c)), shape=(n1 + n2, n1 + n2))
        _, label = csgraph.connected_components(g, directed=False)
        active_r = self.row_counts > 0
        active_c = self.col_counts > 0
        nrows = np.bincount(label[:n1][active_r], minlength=label.max() + 1)
        ncols = np.bincount(label[n1:][active_c], minlength=label.max() + 1)
        tau = np.zeros(n2)
        lab = label[n1:][active_c]
        tau[active_c] = nrows[lab] / ncols[lab]
        return tau

    @cached_property
    def free_col_targets(self):
        return self.col_targets - self.anchor_col_counts

    @cached_property
    def csr_layout(self):
        """CSR structure of all admissible entries and where free/anchor values go."""
        r = np.concatenate([self.rows, self.anchor_sources])
        c = np.concatenate([self.indices, self.anchor_targets])
        order = np.lexsort((c, r))
        indptr = np.zeros(self.n1 + 1, dtype=np.int64)
        np.add.at(indptr, r + 1, 1)
        indptr = np.cumsum(indptr)
        inv = np.empty_like(order)
        inv[order] = np.arange(len(order))
        return indptr, c[order], inv[: self.n_free], inv[self.n_free :]

    def __repr__(self):
        return f"SparsityPattern(n1={self.n1}, n2={self.n2}, free={self.n_free}, anchors={len(self.anchor_sources)})"


@dataclass
class TransportPlan:
    """Values on the free entries of a pattern; anchored entries are implicitly 1."""

    pattern: SparsityPattern
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.pattern.n_free,):
            raise ValueError(f"expected {self.pattern.n_free} values, got {self.values.shape}")

    def to_csr(self):
        p = self.pattern
        indptr, indices, free_pos, anchor_pos = p.csr_layout
        data = np.empty(len(indices))
        data[free_pos] = self.values
        data[anchor_pos] = 1.0
        return sparse.csr_matrix((data, indices, indptr), shape=(p.n1, p.n2))

    def toarray(self):
        return self.to_csr().toarray()

    def row_sums(self):
        return np.asarray(self.to_csr().sum(axis=1)).ravel()

    def col_sums(self):
        return np.asarray(self.to_csr().sum(axis=0)).ravel()

    def marginal_residual(self):
        p = self.pattern
        rr = np.abs(self.row_sums()[p.active_rows] - 1.0)
        cr = np.abs(self.col_sums()[p.active_cols] - p.col_targets[p.active_cols])
        return float(max(rr.max(initial=0.0), cr.max(initial=0.0)))

    def save_csv(self, path):
        p = self.pattern
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "col", "value", "anchor"])
            w.writerow([p.n1, p.n2, "shape", -1])
            for r, c, v in zip(p.rows.tolist(), p.cols.tolist(), self.values.tolist()):
                w.writerow([r, c, f"{v:.17g}", 0])
            for s, t in zip(p.anchor_sources.tolist(), p.anchor_targets.tolist()):
                w.writerow([s, t, "1", 1])

    @classmethod
    def load_csv(cls, path):
        path = Path(path)
        if not path.exists():
            raise InputError(f"{path}: no such file", code="io.not_found")
        with open(path, newline="", encoding="utf-8") as fh:
            rd = csv.reader(fh)
            next(rd)
            n1, n2, _, _ = next(rd)
            rows, cols, vals, anchors = [], [], [], {}
            for r, c, v, a in rd:
                if a == "1":
                    anchors[int(r)] = int(c)
                else:
                    rows.append(int(r))
                    cols.append(int(c))
                    vals.append(float(v))
        pat = SparsityPattern(int(n1), int(n2), rows, cols, anchors)
        # pattern stores entries sorted by (row, col); reorder values to match
        key = np.asarray(rows, dtype=np.int64) * int(n2) + np.asarray(cols, dtype=np.int64)
        order = np.argsort(key, kind="stable")
        return cls(pat, np.asarray(vals)[order])


@dataclass(frozen=True)
class QapProblem:
    """Operators of both surfaces and the stiffness/mass balance ``mu``."""

    S1: sparse.spmatrix
    S2: sparse.spmatrix
    M1: sparse.spmatrix
    M2: sparse.spmatrix
    mu: float = 1.0

    def __post_init__(self):
        for name in ("S1", "S2", "M1", "M2"):
            op = getattr(self, name)
            op = getattr(op, "matrix", op)
            object.__setattr__(self, name, sparse.csr_matrix(op))
        if self.S1.shape != self.M1.shape or self.S2.shape != self.M2.shape:
            raise ValueError("stiffness and mass shapes differ on the same surface")
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")

    @property
    def n1(self):
        return self.S1.shape[0]

    @property
    def n2(self):
        return self.S2.shape[0]


def _check(pattern, prob):
    if (pattern.n1, pattern.n2) != (prob.n1, prob.n2):
        raise ValueError(f"plan is {pattern.n1}x{pattern.n2} but operators are {prob.n1}x{prob.n2}")


def _residuals(D, prob):
    rs = (prob.S1 @ D - D @ prob.S2).tocsr()
    rm = (prob.M1 @ D - D @ prob.M2).tocsr() if prob.mu else None
    return rs, rm


def _sqnorm(a):
    return float(np.dot(a.data, a.data))


def qap_objective(D: TransportPlan, prob: QapProblem) -> float:
    _check(D.pattern, prob)
    rs, rm = _residuals(D.to_csr(), prob)
    f = 0.5 * _sqnorm(rs)
    if rm is not None:
        f += 0.5 * prob.mu * _sqnorm(rm)
    return f


def sample_entries(A, rows, cols):
    """Values of sparse ``A`` at coordinate pairs (zero where not stored)."""
    A = sparse.csr_matrix(A)
    A.sum_duplicates()
    A.sort_indices()
    n2 = A.shape[1]
    keys_a = np.repeat(np.arange(A.shape[0], dtype=np.int64), np.diff(A.indptr)) * n2 + A.indices
    keys = np.asarray(rows, dtype=np.int64) * n2 + np.asarray(cols, dtype=np.int64)
    pos = np.searchsorted(keys_a, keys)
    pos_c = np.minimum(pos, max(len(keys_a) - 1, 0))
    out = np.zeros(len(keys))
    if len(keys_a):
        hit = keys_a[pos_c] == keys
        out[hit] = A.data[pos_c[hit]]
    return out


def _value_and_gradient(D: TransportPlan, prob: QapProblem):
    p = D.pattern
    rs, rm = _residuals(D.to_csr(), prob)
    f = 0.5 * _sqnorm(rs)
    G = prob.S1 @ rs - rs @ prob.S2
    if rm is not None:
        f += 0.5 * prob.mu * _sqnorm(rm)
        G = G + prob.mu * (prob.M1 @ rm - rm @ prob.M2)
    return f, sample_entries(G, p.rows, p.cols)


class _Quadratic:
    """The objective restricted to one pattern, split as
    ``f(x) = f0 + <g0, x> + 1/2 ||L x||^2`` where ``f0, g0`` come from the
    anchor entries alone and ``L`` acts on the free values. With symmetric
    operators the cross term of the expansion equals ``<g0, x>``, so every
    evaluation touches only the free block."""

    def __init__(self, pattern, prob):
        self.p, self.prob = pattern, prob
        fixed = TransportPlan(SparsityPattern(pattern.n1, pattern.n2, anchors=pattern.anchors), np.zeros(0))
        rs, rm = _residuals(fixed.to_csr(), prob)
        self.f0 = 0.5 * _sqnorm(rs) + (0.5 * prob.mu * _sqnorm(rm) if rm is not None else 0.0)
        G = prob.S1 @ rs - rs @ prob.S2
        if rm is not None:
            G = G + prob.mu * (prob.M1 @ rm - rm @ prob.M2)
        self.g0 = sample_entries(G, pattern.rows, pattern.cols)

    def _free(self, x):
        p = self.p
        return sparse.csr_matrix((x, p.indices, p.indptr), shape=(p.n1, p.n2))

    def __call__(self, x):
        prob = self.prob
        X = self._free(x)
        rs, rm = _residuals(X, prob)
        q = _sqnorm(rs)
        H = prob.S1 @ rs - rs @ prob.S2
        if rm is not None:
            q += prob.mu * _sqnorm(rm)
            H = H + prob.mu * (prob.M1 @ rm - rm @ prob.M2)
        f = self.f0 + float(self.g0 @ x) + 0.5 * q
        return f, self.g0 + sample_entries(H, self.p.rows, self.p.cols)

    def curvature(self, d):
        """``||L d||^2`` and the gradient change ``L'L d`` for a step ``d``."""
        f, g = self(d)
        return 2.0 * (f - self.f0 - float(self.g0 @ d)), g - self.g0


def qap_gradient(D: TransportPlan, prob: QapProblem) -> np.ndarray:
    """Gradient of :func:`qap_objective` on the free entries of ``D``.

    With residuals ``R = S1 D - D S2`` and ``Q = M1 D - D M2`` this is
    ``S1 R - R S2 + mu (M1 Q - Q M2)`` (operators symmetric), sampled at the
    pattern.
    """
    _check(D.pattern, prob)
    return _value_and_gradient(D, prob)[1]


# -------------------------------------------------------------- projection


class _Projector:
    """Euclidean projection onto plans with fixed marginals on a pattern.

    The minimizer has the form ``D_ij = Y_ij - a_i - b_j`` on the free
    entries. A closed form (exact when the free entries form a complete
    bipartite block) is tried first; otherwise the multipliers come from the
    bipartite graph Laplacian system, factorized once per pattern.
    """

    def __init__(self, pattern: SparsityPattern):
        self.p = pattern
        p = pattern
        self.r = np.diff(p.indptr).astype(float)
        self.c = p.free_col_counts.astype(float)
        self.b = p.free_col_targets
        self.fr = p.free_rows
        self.fc = p.free_cols
        bad = np.flatnonzero((p.free_col_counts == 0) & (np.abs(p.free_col_targets) > MARGINAL_TOL) & (p.col_counts > 0))
        if bad.size:
            raise InfeasiblePatternError(cols=bad.tolist())
    def closed_form(self, y):
        p = self.p
        rows, cols = p.rows, p.cols
        rowy = np.bincount(rows, weights=y, minlength=p.n1)
        coly = np.bincount(cols, weights=y, minlength=p.n2)
        with np.errstate(divide="ignore", invalid="ignore"):
            ru = np.where(self.r > 0, (rowy - 1.0) / self.r, 0.0)
            cv = np.where(self.c > 0, (coly - self.b) / self.c, 0.0)
        kappa = (y.sum() - len(self.fr)) / max(len(y), 1)
        return y - ru[rows] - cv[cols] + kappa

    def residual(self, x):
        p = self.p
        rowx = np.bincount(p.rows, weights=x, minlength=p.n1)[self.fr]
        colx = np.bincount(p.cols, weights=x, minlength=p.n2)[self.fc]
        return float(max(np.abs(rowx - 1.0).max(initial=0.0), np.abs(colx - self.b[self.fc]).max(initial=0.0)))

    def _factor(self):
        p = self.p
        nr, nc = len(self.fr), len(self.fc)
        rpos = np.full(p.n1, -1)
        rpos[self.fr] = np.arange(nr)
        cpos = np.full(p.n2, -1)
        cpos[self.fc] = np.arange(nc) + nr
        i, j = rpos[p.rows], cpos[p.cols]
        n = nr + nc
        deg = np.concatenate([self.r[self.fr], self.c[self.fc]])
        L = sparse.coo_matrix((-np.ones(2 * len(i)), (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(n, n))
        L = (L + sparse.diags(deg)).tocsc()
        ncomp, label = csgraph.connected_components(L, directed=False)
        # ground one node per component to remove the constant null space
        _, first = np.unique(label, return_index=True)
        keep = np.ones(n, dtype=bool)
        keep[first] = False
        self._keep = keep
        self._rpos, self._cpos = rpos, cpos
        self._n = n
        Lr = L[keep][:, keep].tocsc()
        self._lu = splu(Lr, permc_spec="MMD_AT_PLUS_A") if Lr.shape[0] else None

    def kkt(self, y):
        if not hasattr(self, "_keep"):
            self._factor()
        p = self.p
        rowy = np.bincount(p.rows, weights=y, minlength=p.n1)[self.fr]
        coly = np.bincount(p.cols, weights=y, minlength=p.n2)[self.fc]
        rhs = np.concatenate([rowy - 1.0, -(coly - self.b[self.fc])])
        x = np.zeros(self._n)
        if self._lu is not None:
            x[self._keep] = self._lu.solve(rhs[self._keep])
        alpha = x[self._rpos[p.rows]]
        beta = -x[self._cpos[p.cols]]
        return y - alpha - beta

    def __call__(self, y):
        x = self.closed_form(y)
        if self.residual(x) <= MARGINAL_TOL:
            return x
        x = self.kkt(y)
        if self.residual(x) > MARGINAL_TOL:
            # re-projecting removes round-off left by the factorization
            x = self.kkt(x)
        return x


def _projector(pattern):
    proj = pattern.__dict__.get("_projector")
    if proj is None:
        proj = _Projector(pattern)
        pattern.__dict__["_projector"] = proj
    return proj


def project(Y, pattern: SparsityPattern | None = None) -> TransportPlan:
    """Nearest plan (Frobenius) with unit row sums and the pattern's column targets.

    ``Y`` is a :class:`TransportPlan` or an array of free-entry values.
    Anchored entries stay fixed at 1; values may become negative.
    """
    if isinstance(Y, TransportPlan):
        pattern = pattern or Y.pattern
        y = Y.values
    else:
        y = np.asarray(Y, dtype=float)
    if pattern is None:
        raise ValueError("a pattern is required")
    return TransportPlan(pattern, _projector(pattern)(y))


def plan_from_map(pattern: SparsityPattern, targets, fill=0.0) -> TransportPlan:
    """Projected one-hot plan for a point map (entries off the pattern are dropped)."""
    targets = np.asarray(targets)
    y = np.full(pattern.n_free, float(fill))
    y[targets[pattern.rows] == pattern.cols] = 1.0
    return project(y, pattern)


# ------------------------------------------------------------------ solver


@dataclass
class SolveResult:
    plan: TransportPlan
    objective: float
    log: list = field(default_factory=list)


def solve(prob: QapProblem, pattern: SparsityPattern, D0: TransportPlan, step0=75.0,
          max_iters=30, tol=1e-4, memory=10, excursion=10.0) -> SolveResult:
    """Projected gradient descent with Barzilai-Borwein steps.

    The first trial step is ``step0``; later trial steps use
    ``<dD, dD> / <dD, dG>`` capped at ``1e3 * step0`` (``step0`` when the
    curvature estimate is non-positive). BB steps are taken as they are
    unless the objective would exceed ``excursion`` times the largest of the
    last ``memory`` values; such a step is replaced by the exact minimizer
    along its direction. Stops after ``max_iters`` or when an iteration
    lowers the objective by a relative amount in ``[0, tol)``. Returns the
    iterate with the lowest objective seen.
    """
    _check(pattern, prob)
    if D0.pattern.n_free != pattern.n_free:
        raise ValueError("initial plan does not match the pattern")
    proj = _projector(pattern)
    hi = 1e3 * step0
    x = D0.values.copy()
    model = _Quadratic(pattern, prob)
    f, g = model(x)
    log = [dict(iter=0, objective=f, step=0.0, residual=proj.residual(x) if len(x) else 0.0)]
    best_f, best_x = f, D0.values
    if f == 0.0 or pattern.n_free == 0:
        return SolveResult(TransportPlan(pattern, x), f, log)
    recent = [f]
    alpha = float(step0)
    for k in range(1, max_iters + 1):
        # the projection is affine, so along d the objective is an exact
        # quadratic in the step fraction: f + frac*gd + frac^2*q/2
        d = proj(x - alpha * g) - x
        q, h = model.curvature(d)
        gd = float(g @ d)
        if gd >= 0 and q <= 0:
            break  # stationary to working precision
        frac = 1.0
        f_new = f + gd + 0.5 * q
        if not np.isfinite(f_new) or f_new > excursion * max(recent[-memory:]):
            frac = min(1.0, -gd / q) if q > 0 else 1.0
            f_new = f + frac * gd + 0.5 * frac * frac * q
        if not np.isfinite(f_new):
            raise DivergenceError(f"objective became non-finite at iteration {k} (step {alpha:.6g})")
        alpha *= frac
        x_new = x + frac * d
        g_new = g + frac * h
        log.append(dict(iter=k, objective=f_new, step=alpha, residual=proj.residual(x_new)))
        recent.append(f_new)
        if f_new < best_f:
            best_f, best_x = f_new, x_new
        rel = (f - f_new) / f if f > 0 else 0.0
        s = x_new - x
        yv = g_new - g
        sy = float(s @ yv)
        alpha = min(float(s @ s / sy), hi) if sy > 0 else float(step0)
        x, f, g = x_new, f_new, g_new
        if 0 <= rel < tol or f == 0.0:
            break
    if best_x is not D0.values:
        best_f = model(best_x)[0]  # drop the drift of the incremental updates
    logger.debug("solve: %d iterations, objective %.6g -> %.6g", len(log) - 1, log[0]["objective"], best_f)
    return SolveResult(TransportPlan(pattern, best_x), best_f, log)


def extract_map(D: TransportPlan) -> np.ndarray:
    """Row-wise argmax over admissible entries; ties go to the smallest target.

    Rows without admissible entries map to -1.
    """
    A = D.to_csr()
    A.sort_indices()
    out = np.full(A.shape[0], -1, dtype=np.int64)
    counts = np.diff(A.indptr)
    nz = np.flatnonzero(counts)
    if nz.size == 0:
        return out
    row_max = np.maximum.reduceat(A.data, A.indptr[nz])
    is_max = A.data == np.repeat(row_max, counts[nz])
    rows = np.repeat(np.arange(A.shape[0]), counts)
    first = np.flatnonzero(is_max)
    # indices are sorted within a row, so the first maximal entry has the smallest target
    r_first, pos = np.unique(rows[first], return_index=True)
    out[r_first] = A.indices[first[pos]]
    return out
