"""
Certified global MAP estimation by branch and bound.

The bilinear products M_ij * w_j are replaced by auxiliary variables Z_ij
constrained by their McCormick envelope. For binary M the envelope is exact,
so the problem becomes a convex MIQP in (w, M, Z). Nodes fix some entries of
M and relax the rest to [0, 1]; the resulting convex QP gives a lower bound
for every completion of the node.

The node QP is solved in a reduced form. Eliminating M from the envelope
leaves ``0 <= Z_ij <= w_j`` for a free entry plus ``sum_i Z_ij <= 1`` over a
block column; fixed zeros drop out and fixed ones become ``Z_ij = w_j``.
Since the objective depends on Z only through row sums, free entries of a
row whose block-column caps cannot bind are aggregated into one variable
``0 <= t_i <= sum_j w_j``. The reduced QP has the same optimal value as the
full relaxation.
"""
from __future__ import annotations

import heapq
import itertools
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bcd import BcdConfig, bcd_map, solve_M_given_w
from .core import (
    FrequencyVector,
    Measurement,
    NoiseModel,
    ProblemDims,
    Reconstruction,
    StrainMatrix,
    objective_phi,
)
from .qp import solve_qp, solve_w_given_M

log = logging.getLogger(__name__)

FREE = -1
INT_TOL = 1e-9


@dataclass(frozen=True)
class McCormickModel:
    """The lifted convex model over x = (w, vec(M), vec(Z)), row-major vecs.

    Constraints are ``A_in x >= b_in`` and ``A_eq x = b_eq`` with variable
    bounds ``lower <= x <= upper``; the objective is
    ``0.5 x^T H x + g^T x + const``.
    """

    dims: ProblemDims
    data: np.ndarray
    precision: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    H: np.ndarray
    g: np.ndarray
    const: float
    n_mccormick: int
    n_block: int
    n_order: int

    @property
    def size(self) -> int:
        return self.lower.size

    def split(self, x):
        n, q = self.dims.n, self.dims.q
        return x[:n], x[n : n + q * n].reshape(q, n), x[n + q * n :].reshape(q, n)

    def pack(self, w, M, Z) -> np.ndarray:
        return np.concatenate([np.ravel(w), np.ravel(M), np.ravel(Z)])

    def objective(self, x) -> float:
        _, _, Z = self.split(np.asarray(x, dtype=np.float64))
        r = Z.sum(axis=1) - self.data
        return float(np.sum(self.precision * r * r))

    def violation(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        return max(
            float(-(self.A_in @ x - self.b_in).min(initial=0.0)),
            float(np.abs(self.A_eq @ x - self.b_eq).max(initial=0.0)),
            float((self.lower - x).max()),
            float((x - self.upper).max()),
        )

    def bounds_for(self, fixed: np.ndarray):
        """Variable bounds with the fixed entries of M pinned."""
        lo, hi = self.lower.copy(), self.upper.copy()
        n, q = self.dims.n, self.dims.q
        f = np.asarray(fixed).reshape(q * n)
        idx = np.flatnonzero(f != FREE)
        lo[n + idx] = f[idx]
        hi[n + idx] = f[idx]
        return lo, hi


def build_mccormick(d: Measurement, noise: NoiseModel, dims: ProblemDims = None) -> McCormickModel:
    """Assemble the McCormick reformulation of the MAP problem.

    Emits 4 q n envelope rows, m n block column-sum rows when p > 2 (for
    p = 2 they are implied by the bounds), one sum-to-one equality and
    n - 1 ordering rows plus ``w_n >= 0``.
    """
    dims = d.dims if dims is None else dims
    n, q, m, p = dims.n, dims.q, dims.m, dims.p
    N = n + 2 * q * n
    iw = np.arange(n)
    iM = n + np.arange(q * n).reshape(q, n)
    iZ = n + q * n + np.arange(q * n).reshape(q, n)
    rows, rhs = [], []

    def row(entries, b):
        r = np.zeros(N)
        for j, v in entries:
            r[j] += v
        rows.append(r)
        rhs.append(b)

    for i in range(q):
        for j in range(n):
            row([(iZ[i, j], 1.0)], 0.0)  # Z >= 0
            row([(iM[i, j], 1.0), (iZ[i, j], -1.0)], 0.0)  # Z <= M
            row([(iw[j], 1.0), (iZ[i, j], -1.0)], 0.0)  # Z <= w
            row([(iZ[i, j], 1.0), (iM[i, j], -1.0), (iw[j], -1.0)], -1.0)  # Z >= M + w - 1
    n_mc = len(rows)
    if p > 2:
        for k in range(m):
            for j in range(n):
                row([(iM[i, j], -1.0) for i in range(k * (p - 1), (k + 1) * (p - 1))], -1.0)
    n_block = len(rows) - n_mc
    for j in range(n - 1):
        row([(iw[j], 1.0), (iw[j + 1], -1.0)], 0.0)
    n_order = n - 1
    row([(iw[n - 1], 1.0)], 0.0)
    A_eq = np.zeros((1, N))
    A_eq[0, iw] = 1.0
    lower = np.zeros(N)
    upper = np.ones(N)
    prec = noise.precision
    # objective sum_i prec_i (sum_j Z_ij - d_i)^2
    B = np.zeros((q, N))
    for i in range(q):
        B[i, iZ[i]] = 1.0
    H = 2.0 * B.T @ (prec[:, None] * B)
    g = -2.0 * B.T @ (prec * d.data)
    const = float(np.sum(prec * d.data**2))
    return McCormickModel(
        dims, d.data.copy(), prec.copy(), np.array(rows), np.array(rhs), A_eq, np.ones(1),
        lower, upper, H, g, const, n_mc, n_block, n_order,
    )


# ---------------------------------------------------------------------------
# node relaxation


def propagate(fixed: np.ndarray, dims: ProblemDims) -> Optional[np.ndarray]:
    """Apply the block column-sum implication of fixed ones.

    Returns the completed assignment, or None when a block column holds two
    ones.
    """
    f = np.array(fixed, dtype=np.int8).reshape(dims.m, dims.p - 1, dims.n)
    ones = (f == 1).sum(axis=1)
    if np.any(ones > 1):
        return None
    has_one = np.broadcast_to((ones == 1)[:, None, :], f.shape)
    f[(f == FREE) & has_one] = 0
    return f.reshape(dims.q, dims.n)


@dataclass
class Relaxation:
    bound: float
    w: np.ndarray
    M: np.ndarray  # fractional strain matrix (q x n)
    Z: np.ndarray
    iterations: int
    converged: bool = True


class _ReducedQP:
    """Reduced node QP over x = (w, t, Z_capped)."""

    def __init__(self, dims: ProblemDims, data, prec, fixed):
        n, q, p = dims.n, dims.q, dims.p
        self.dims, self.data, self.prec, self.fixed = dims, data, prec, fixed
        free = fixed == FREE
        capped = np.zeros_like(free)
        if p > 2:
            fb = free.reshape(dims.m, p - 1, n)
            nfree = fb.sum(axis=1)  # (m, n)
            # cap sum_i Z_ij <= 1 can bind only if (#free rows) * w_j > 1, and w_j <= 1/(j+1)
            need = nfree > (np.arange(n) + 1)[None, :]
            capped = (fb & need[:, None, :]).reshape(q, n)
        agg = free & ~capped
        self.agg, self.capped = agg, capped
        t_rows = np.flatnonzero(agg.any(axis=1))
        z_idx = np.argwhere(capped)
        self.t_rows, self.z_idx = t_rows, z_idx
        nt, nz = len(t_rows), len(z_idx)
        N = n + nt + nz
        self.N = N
        # row sums s = B x
        B = np.zeros((q, N))
        B[:, :n] = (fixed == 1).astype(float)
        B[t_rows, n + np.arange(nt)] = 1.0
        if nz:
            B[z_idx[:, 0], n + nt + np.arange(nz)] = 1.0
        self.B = B
        A, b = [], []
        # ordering and w_n >= 0
        for j in range(n - 1):
            r = np.zeros(N)
            r[j], r[j + 1] = 1.0, -1.0
            A.append(r)
            b.append(0.0)
        r = np.zeros(N)
        r[n - 1] = 1.0
        A.append(r)
        b.append(0.0)
        for a, i in enumerate(t_rows):
            r = np.zeros(N)
            r[n + a] = 1.0
            A.append(r)
            b.append(0.0)
            r = np.zeros(N)
            r[:n] = agg[i]
            r[n + a] = -1.0
            A.append(r)
            b.append(0.0)
        for c, (i, j) in enumerate(z_idx):
            r = np.zeros(N)
            r[n + nt + c] = 1.0
            A.append(r)
            b.append(0.0)
            r = np.zeros(N)
            r[j] = 1.0
            r[n + nt + c] = -1.0
            A.append(r)
            b.append(0.0)
        if nz:
            blk = z_idx[:, 0] // (p - 1)
            for key in sorted(set(zip(blk.tolist(), z_idx[:, 1].tolist()))):
                r = np.zeros(N)
                sel = (blk == key[0]) & (z_idx[:, 1] == key[1])
                r[n + nt + np.flatnonzero(sel)] = -1.0
                A.append(r)
                b.append(-1.0)
        self.A_in = np.array(A)
        self.b_in = np.array(b)
        self.A_eq = np.zeros((1, N))
        self.A_eq[0, :n] = 1.0
        self.H = 2.0 * B.T @ (prec[:, None] * B)
        self.g = -2.0 * B.T @ (prec * data)

    def start(self, w=None, Z=None) -> np.ndarray:
        """Feasible point from a (possibly infeasible for this node) parent point.

        Keeps the parent's weights and capped entries where they stay
        feasible, then sets every aggregated row variable to its best value
        for those weights.
        """
        n, nt = self.dims.n, len(self.t_rows)
        if w is None:
            w = np.full(n, 1.0 / n)
        x = np.zeros(self.N)
        x[:n] = w
        if Z is not None and len(self.z_idx):
            x[n + nt :] = np.clip(Z[self.z_idx[:, 0], self.z_idx[:, 1]], 0.0, w[self.z_idx[:, 1]])
            if (self.A_in @ x - self.b_in).min() < 0:
                x[n + nt :] = 0.0
        if nt:
            x[n : n + nt] = 0.0
            partial = self.B[self.t_rows] @ x
            cap = self.agg[self.t_rows] @ w
            x[n : n + nt] = np.clip(self.data[self.t_rows] - partial, 0.0, cap)
        return x

    def solve(self, x0):
        x, rep = solve_qp(self.H, self.g, self.A_eq, np.ones(1), self.A_in, self.b_in, x0, tol=1e-11)
        return x, rep

    def expand(self, x):
        """Map a reduced point back to (w, fractional M, Z).

        Any split of an aggregated row total over its free entries is
        optimal for the full relaxation; the greedy split chosen here keeps
        the relaxed matrix close to binary.
        """
        n, q = self.dims.n, self.dims.q
        w = x[:n].copy()
        M = np.where(self.fixed == 1, 1.0, 0.0)
        Z = M * w[None, :]
        nt = len(self.t_rows)
        for a, i in enumerate(self.t_rows):
            cols = self.agg[i]
            # fill the row total into the heaviest strains first, so at most
            # one entry per row is fractional
            rem = max(float(x[n + a]), 0.0)
            for j in np.flatnonzero(cols):
                if w[j] <= 1e-14:
                    continue
                z = min(rem, w[j])
                M[i, j] = min(z / w[j], 1.0)
                Z[i, j] = z
                rem -= z
        for c, (i, j) in enumerate(self.z_idx):
            z = x[n + nt + c]
            Z[i, j] = z
            M[i, j] = min(max(z / w[j], 0.0), 1.0) if w[j] > 1e-14 else 0.0
        return w, M, Z

    def value(self, x) -> float:
        r = self.B @ x - self.data
        return float(np.sum(self.prec * r * r))


def solve_relaxation(model: McCormickModel, fixed=None, start=None) -> Optional[Relaxation]:
    """Lower bound for all completions of a partial assignment of M.

    ``fixed`` is a q x n integer array with -1 for free entries. Returns None
    when the assignment is infeasible. ``start`` may be a parent relaxation
    whose point is used as a warm start.
    """
    dims = model.dims
    if fixed is None:
        fixed = np.full((dims.q, dims.n), FREE, dtype=np.int8)
    f = propagate(fixed, dims)
    if f is None:
        return None
    red = _ReducedQP(dims, model.data, model.precision, f)
    x0 = red.start(start.w, start.Z) if start is not None else red.start()
    x, rep = red.solve(x0)
    w, M, Z = red.expand(x)
    if not rep.converged:
        log.warning("node relaxation stopped after %d iterations without converging", rep.iterations)
    return Relaxation(max(red.value(x), 0.0), w, M, Z, rep.iterations, rep.converged)


# ---------------------------------------------------------------------------
# branch and bound


@dataclass
class BnbNode:
    fixed: np.ndarray
    lower_bound: float
    relaxation: Relaxation
    depth: int = 0


@dataclass
class GlobalSolveReport:
    incumbent: Reconstruction
    nodes_explored: int
    final_gap: float
    wall_time: float
    lower_bound: float = 0.0
    trace: list = field(default_factory=list)


def _gap(upper: float, lower: float) -> float:
    return max(0.0, upper - lower) / max(1e-10, abs(upper))


def round_relaxation(M_frac: np.ndarray, dims: ProblemDims) -> np.ndarray:
    """Threshold at 0.5, then keep only the largest entry of any block column
    holding more than one."""
    R = (M_frac >= 0.5).astype(float)
    Rb = R.reshape(dims.m, dims.p - 1, dims.n)
    Fb = M_frac.reshape(dims.m, dims.p - 1, dims.n)
    over = Rb.sum(axis=1) > 1
    for k, j in zip(*np.nonzero(over)):
        keep = int(np.argmax(Fb[k, :, j]))
        Rb[k, :, j] = 0.0
        Rb[k, keep, j] = 1.0
    return Rb.reshape(dims.q, dims.n)


def _branch_entry(node_fixed, M_frac, dims):
    """Most fractional free entry, ties by row-major position. Falls back to
    a free entry in a violated block column when all entries are integral."""
    free = node_fixed == FREE
    dist = np.where(free, np.abs(M_frac - 0.5), np.inf)
    frac = free & (np.minimum(M_frac, 1.0 - M_frac) > INT_TOL)
    if frac.any():
        dmin = dist[frac].min()
        cand = np.argwhere(frac & (dist <= dmin + 1e-12))
        return tuple(cand[0])
    R = np.round(M_frac).reshape(dims.m, dims.p - 1, dims.n)
    bad = R.sum(axis=1) > 1
    Fb = free.reshape(dims.m, dims.p - 1, dims.n)
    for k, j in zip(*np.nonzero(bad)):
        rows = np.flatnonzero(Fb[k, :, j] & (R[k, :, j] == 1))
        if rows.size:
            return (k * (dims.p - 1) + int(rows[0]), int(j))
    return None


def solve_global(
    d: Measurement,
    noise: NoiseModel,
    dims: ProblemDims = None,
    mip_gap: float = 1e-6,
    node_limit: int = 10**6,
    warm_start: Optional[Reconstruction] = None,
    trace: bool = False,
    time_limit: Optional[float] = None,
) -> GlobalSolveReport:
    """Best-first branch and bound over the binary entries of M.

    Nodes are expanded in order of their relaxation bound. Every expanded
    node proposes incumbents by rounding its relaxation point and by an exact
    matrix update at its relaxed weights, each followed by a weight solve.
    Stops when the relative gap (upper - lower) / max(1e-10, |upper|) is at
    most ``mip_gap``; if ``node_limit`` runs out first the incumbent is
    returned uncertified with the gap achieved.
    """
    t0 = time.perf_counter()
    dims = d.dims if dims is None else dims
    if dims.n != d.dims.n:
        d = d.with_n(dims.n)
    if not mip_gap > 0:
        raise ValueError("mip_gap must be > 0")
    model = build_mccormick(d, noise, dims)
    counter = itertools.count()
    best: Optional[Reconstruction] = None
    tried = set()

    def offer(M_bin, w_guess):
        nonlocal best
        key = np.asarray(M_bin, dtype=np.int8).tobytes()
        if key in tried:
            return
        tried.add(key)
        M = StrainMatrix(dims, M_bin)
        upd = solve_w_given_M(M, d, noise, w_guess)
        cand = Reconstruction.evaluate(upd.matrix, upd.weights, d, noise)
        if best is None or cand.objective < best.objective:
            best = cand

    if warm_start is not None:
        best = Reconstruction.evaluate(warm_start.matrix, warm_start.weights, d, noise)

    root_fixed = np.full((dims.q, dims.n), FREE, dtype=np.int8)
    root = solve_relaxation(model, root_fixed)
    heap = [(root.bound, next(counter), BnbNode(root_fixed, root.bound, root))]
    explored = 0
    pruned_floor = np.inf  # smallest bound of nodes discarded within the gap
    history = []

    def upper():
        return best.objective if best is not None else np.inf

    def lower():
        lo = min(heap[0][0] if heap else np.inf, pruned_floor)
        return min(lo, upper())

    def closes(bound):
        u = upper()
        return np.isfinite(u) and (u - bound) <= mip_gap * max(1e-10, abs(u))

    limited = False
    while heap:
        if closes(heap[0][0]):
            break
        if explored >= node_limit or (time_limit is not None and time.perf_counter() - t0 > time_limit):
            limited = True
            break
        bound, _, node = heapq.heappop(heap)
        explored += 1
        rel = node.relaxation
        w_rel = np.clip(rel.w, 0.0, None)
        w_rel = w_rel / w_rel.sum()
        offer(round_relaxation(rel.M, dims), w_rel)
        w_sorted = -np.sort(-w_rel)
        offer(solve_M_given_w(w_sorted, d, noise).matrix.entries, w_sorted)

        f = propagate(node.fixed, dims)
        entry = _branch_entry(f, rel.M, dims)
        if entry is None:
            # integral and block-feasible: the relaxation is attained
            offer(np.round(rel.M), w_rel)
        else:
            for val in (0, 1):
                child = f.copy()
                child[entry] = val
                crel = solve_relaxation(model, child, start=rel)
                if crel is None:
                    continue
                # an unconverged relaxation value is not a valid bound
                cb = max(crel.bound, bound) if crel.converged else bound
                if closes(cb) or cb >= upper():
                    pruned_floor = min(pruned_floor, cb)
                    continue
                heapq.heappush(heap, (cb, next(counter), BnbNode(child, cb, crel, node.depth + 1)))
        if trace:
            history.append((lower(), upper()))

    lo = lower()
    gap = _gap(upper(), lo)
    certified = not limited and gap <= mip_gap
    inc = Reconstruction(best.matrix, best.weights, best.objective, certified=certified, gap=gap)
    wall = time.perf_counter() - t0
    log.debug("branch and bound: %d nodes, gap %.3g, %.3fs", explored, gap, wall)
    return GlobalSolveReport(inc, explored, gap, wall, lo, history)


def map_estimate(
    d: Measurement,
    noise: NoiseModel,
    method: str = "bcd",
    config: BcdConfig = None,
    mip_gap: float = 1e-6,
    node_limit: int = 10**6,
) -> Reconstruction:
    """MAP estimate by "bcd", "global" or "hybrid" (global warm-started by bcd)."""
    if method == "bcd":
        return bcd_map(d, noise, d.dims, config).best
    if method == "global":
        return solve_global(d, noise, d.dims, mip_gap, node_limit).incumbent
    if method == "hybrid":
        warm = bcd_map(d, noise, d.dims, config).best
        return solve_global(d, noise, d.dims, mip_gap, node_limit, warm_start=warm).incumbent
    raise ValueError(f"unknown method {method!r}")
