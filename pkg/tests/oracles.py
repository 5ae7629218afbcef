"""Independent reference computations used by the tests.

Everything here is dense and brute force on purpose: it shares no code with
the package beyond plain data.
"""

import itertools

import numpy as np


def floyd_warshall(n, edges, lengths):
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0.0)
    for (a, b), w in zip(edges, lengths):
        d[a, b] = min(d[a, b], w)
        d[b, a] = min(d[b, a], w)
    for k in range(n):
        d = np.minimum(d, d[:, k : k + 1] + d[k : k + 1, :])
    return d


def mesh_floyd(mesh):
    e = mesh.edges
    lengths = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    return floyd_warshall(mesh.n_vertices, e, lengths)


def dense_objective(D, S1, S2, M1, M2, mu):
    rs = S1 @ D - D @ S2
    rm = M1 @ D - D @ M2
    return 0.5 * np.sum(rs * rs) + 0.5 * mu * np.sum(rm * rm)


def dense_gradient(D, S1, S2, M1, M2, mu):
    rs = S1 @ D - D @ S2
    rm = M1 @ D - D @ M2
    return S1.T @ rs - rs @ S2.T + mu * (M1.T @ rm - rm @ M2.T)


def kkt_projection(y, rows, cols, n1, n2, row_targets, col_targets):
    """Least-squares projection of free values ``y`` onto the marginal constraints.

    Solves the KKT system with a pseudo-inverse, which tolerates the one
    redundant constraint per connected component.
    """
    m = len(y)
    active_r = np.unique(rows)
    active_c = np.unique(cols)
    A = np.zeros((len(active_r) + len(active_c), m))
    for k, r in enumerate(active_r):
        A[k, rows == r] = 1.0
    for k, c in enumerate(active_c):
        A[len(active_r) + k, cols == c] = 1.0
    b = np.concatenate([row_targets[active_r], col_targets[active_c]])
    return y - A.T @ np.linalg.pinv(A @ A.T) @ (A @ y - b)


def best_permutation_objective(S1, S2, M1, M2, mu):
    n = len(S1)
    best = np.inf
    for p in itertools.permutations(range(n)):
        P = np.eye(n)[list(p)]
        best = min(best, dense_objective(P, S1, S2, M1, M2, mu))
    return best


def random_laplacian(rng, n, density=0.6):
    W = rng.uniform(0.1, 1.0, (n, n)) * (rng.random((n, n)) < density)
    W = np.triu(W, 1)
    W = W + W.T
    return np.diag(W.sum(1)) - W


def conjugate_instance(rng, n):
    """Operators of a weighted graph and of its relabeled copy."""
    S1 = random_laplacian(rng, n)
    M1 = np.diag(rng.uniform(0.5, 1.5, n))
    perm = rng.permutation(n)
    P = np.eye(n)[perm]
    return S1, P.T @ S1 @ P, M1, P.T @ M1 @ P, perm


def circumcircle_contains(a, b, c, d):
    """Strict in-circle test by explicit circumcenter (floating point, for well-spread data)."""
    ax, ay = a
    bx, by = b
    cx, cy = c
    den = 2 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    ux = ((ax**2 + ay**2) * (by - cy) + (bx**2 + by**2) * (cy - ay) + (cx**2 + cy**2) * (ay - by)) / den
    uy = ((ax**2 + ay**2) * (cx - bx) + (bx**2 + by**2) * (ax - cx) + (cx**2 + cy**2) * (bx - ax)) / den
    r2 = (ax - ux) ** 2 + (ay - uy) ** 2
    return (d[0] - ux) ** 2 + (d[1] - uy) ** 2 < r2 * (1 - 1e-9)
