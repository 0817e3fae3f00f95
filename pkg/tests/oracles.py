"""
Independent reference computations used by the tests.

None of these share code with the package solvers: the weight problem is
solved by exact geometry on the ordered simplex (a point, a segment or a
triangle for n <= 3), and posterior means by summing over every strain
matrix without any stabilization.
"""
import itertools

import numpy as np


def ordered_simplex_vertices(n):
    """Vertices of {w1 >= ... >= wn >= 0, sum w = 1}: the vectors
    (1/k, ..., 1/k, 0, ..., 0) for k = 1..n."""
    V = np.zeros((n, n))
    for k in range(1, n + 1):
        V[k - 1, :k] = 1.0 / k
    return V


def _min_on_segment(A, b, u, v):
    """min over t in [0, 1] of |A (u + t (v - u)) - b|^2."""
    r0 = A @ u - b
    dv = A @ (v - u)
    a = dv @ dv
    if a <= 1e-300:
        cands = [0.0, 1.0]
    else:
        cands = [0.0, 1.0, min(1.0, max(0.0, -(r0 @ dv) / a))]
    best = None
    for t in cands:
        w = u + t * (v - u)
        r = A @ w - b
        val = float(r @ r)
        if best is None or val < best[0]:
            best = (val, w)
    return best


def min_over_ordered_simplex(A, b):
    """Exact min of |A w - b|^2 over the ordered simplex for n <= 3.

    Returns (value, minimizer).
    """
    n = A.shape[1]
    V = ordered_simplex_vertices(n)
    if n == 1:
        r = A @ V[0] - b
        return float(r @ r), V[0]
    if n == 2:
        return _min_on_segment(A, b, V[0], V[1])
    if n != 3:
        raise ValueError("oracle handles n <= 3")
    best = None
    for i, j in ((0, 1), (1, 2), (0, 2)):
        cand = _min_on_segment(A, b, V[i], V[j])
        if best is None or cand[0] < best[0]:
            best = cand
    # interior stationary point in barycentric coordinates w = V0 + s (V1-V0) + t (V2-V0)
    E = np.column_stack([V[1] - V[0], V[2] - V[0]])
    AE = A @ E
    if np.linalg.matrix_rank(AE) == 2:
        st = np.linalg.solve(AE.T @ AE, AE.T @ (b - A @ V[0]))
        if st.min() > 0 and st.sum() < 1:
            w = V[0] + E @ st
            r = A @ w - b
            if r @ r < best[0]:
                best = (float(r @ r), w)
    # a rank-deficient problem has a line of minimizers, which meets the boundary
    return best


def brute_force_map(d, gamma, m, n):
    """Global optimum over all 2**(m n) binary matrices (p = 2) by exact
    enumeration. ``gamma`` is a scalar or one value per row.

    Returns (objective, matrix, weights).
    """
    d = np.asarray(d, dtype=float)
    sw = 1.0 / np.broadcast_to(np.asarray(gamma, dtype=float), d.shape)
    best = (np.inf, None, None)
    for bits in itertools.product((0.0, 1.0), repeat=m * n):
        M = np.array(bits).reshape(m, n)
        val, w = min_over_ordered_simplex(sw[:, None] * M, sw * d)
        if val < best[0]:
            best = (val, M, w)
    return best


def double_sum_means(d, gamma, nodes, weights, p=2):
    """Posterior means of M and w on a fixed rule by direct double sum.

    Sums exp(-phi / 2) over every node and every block-binary matrix; only
    usable for tiny m * n and moderate noise, where nothing underflows.
    """
    d = np.asarray(d, dtype=float)
    q = d.size
    n = nodes.shape[1]
    prec = 1.0 / np.broadcast_to(np.asarray(gamma, dtype=float), d.shape) ** 2
    # all column patterns of one block: reference (all zero) or one class
    block_cols = [np.zeros(p - 1)] + [np.eye(p - 1)[c] for c in range(p - 1)]
    m = q // (p - 1)
    Z = 0.0
    EM = np.zeros((q, n))
    Ew = np.zeros(n)
    for choice in itertools.product(range(p), repeat=m * n):
        M = np.zeros((q, n))
        for k in range(m):
            for j in range(n):
                M[k * (p - 1) : (k + 1) * (p - 1), j] = block_cols[choice[k * n + j]]
        for w, a in zip(nodes, weights):
            r = M @ w - d
            lik = a * np.exp(-0.5 * float(np.sum(prec * r * r)))
            Z += lik
            EM += lik * M
            Ew += lik * w
    return EM / Z, Ew / Z
