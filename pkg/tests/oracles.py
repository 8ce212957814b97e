"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from kochlayer.geometry import cell_triangle, iter_addresses


def point_key(pt):
    return tuple(round(float(c), 12) + 0.0 for c in pt)


def p1_elements(points, tris, coef):
    """Element stiffness (``coef_e = int_e a``) and exact P1 mass in extended precision.

    The stiffness diagonal is set to minus the off-diagonal row sum, so constants
    are annihilated exactly; see ``oracle_solve`` for why that matters.
    """
    P = points.astype(np.longdouble)[tris]
    det = (P[:, 1, 0] - P[:, 0, 0]) * (P[:, 2, 1] - P[:, 0, 1]) - (P[:, 2, 0] - P[:, 0, 0]) * (P[:, 1, 1] - P[:, 0, 1])
    # grad phi_i is the rotated opposite edge over det
    opp = np.stack([P[:, 2] - P[:, 1], P[:, 0] - P[:, 2], P[:, 1] - P[:, 0]], axis=1)
    G = np.stack([-opp[..., 1], opp[..., 0]], axis=-1) / det[:, None, None]
    K = coef.astype(np.longdouble)[:, None, None] * np.einsum("eik,ejk->eij", G, G)
    off = ~np.eye(3, dtype=bool)
    K[:, ~off] = -np.where(off, K, 0).sum(axis=2)
    M = (np.abs(det) / 24)[:, None, None] * (np.ones((3, 3)) + np.eye(3)).astype(np.longdouble)
    return K, M


def oracle_solve(points, tris, coef, b, pairs=None, pair_weight=0.0):
    """Direct sparse solve, refined with residuals in extended precision.

    The fiber rows are stiff enough that round-off in a float64 assembly alone
    moves the solution by ~1e-8, so the oracle refines against the exact system.
    Only the mass fixes the constant mode, so the stiffness residual is taken in
    difference form ``sum_j K_ij (u_j - u_i)``: a row-sum error of 1e-13 on entries
    near 1e6 would otherwise shift the solution by a few 1e-10.
    """
    K, M = p1_elements(points, tris, coef)
    n = len(points)
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    A = coo_matrix(((K + M).astype(float).ravel(), (rows, cols)), shape=(n, n)).tocsr()
    if pairs is not None:
        i, j = pairs[:, 0], pairs[:, 1]
        w = np.full(len(pairs), pair_weight)
        A = A + coo_matrix((np.concatenate([w, w, -w, -w]), (np.concatenate([i, j, i, j]), np.concatenate([i, j, j, i]))),
                           shape=(n, n))
    lu = splu(A.tocsc())
    b = np.asarray(b, dtype=np.longdouble)

    def residual(u):
        r = np.zeros(n, dtype=np.longdouble)
        ue = u[tris]
        np.add.at(r, tris, np.einsum("eij,eij->ei", K, ue[:, None, :] - ue[:, :, None]))
        np.add.at(r, tris, np.einsum("eij,ej->ei", M, ue))
        if pairs is not None:
            d = np.longdouble(pair_weight) * (u[pairs[:, 0]] - u[pairs[:, 1]])
            np.add.at(r, pairs[:, 0], d)
            np.add.at(r, pairs[:, 1], -d)
        return r - b

    u = lu.solve(b.astype(float)).astype(np.longdouble)
    for _ in range(4):
        u = u - lu.solve(residual(u).astype(float))
    return u.astype(float)


def set_pairs(m, points):
    tree = cKDTree(points)
    seen = set()
    pairs = []
    for addr in iter_addresses(m):
        tri = np.array([[float(c) for c in v] for v in cell_triangle(addr)])
        d, idx = tree.query(tri)
        assert d.max() < 1e-12
        key = tuple(sorted(idx.tolist()))
        if key in seen:
            continue
        seen.add(key)
        pairs += [(idx[0], idx[1]), (idx[1], idx[2]), (idx[2], idx[0])]
    return np.array(pairs)


def dense_extension(n_fine, fixed_pts, fixed_vals):
    """Harmonic extension on the level-n_fine cell graph built from exact cell triangles."""
    key = {}
    pairs = []
    for addr in iter_addresses(n_fine):
        tri = [point_key(v) for v in cell_triangle(addr)]
        ids = [key.setdefault(v, len(key)) for v in tri]
        pairs += [(ids[0], ids[1]), (ids[1], ids[2]), (ids[2], ids[0])]
    m = len(key)
    L = np.zeros((m, m))
    for i, j in pairs:
        L[i, i] += 1
        L[j, j] += 1
        L[i, j] -= 1
        L[j, i] -= 1
    vals = np.zeros(m)
    fixed = np.zeros(m, dtype=bool)
    for pt, v in zip(fixed_pts, fixed_vals):
        k = key[point_key(pt)]
        vals[k], fixed[k] = v, True
    fr = ~fixed
    vals[fr] = np.linalg.solve(L[np.ix_(fr, fr)], -L[np.ix_(fr, fixed)] @ vals[fixed])
    return key, vals
