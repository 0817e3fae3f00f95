"""
Primal active-set method for small dense convex quadratic programs.

    minimize    0.5 x^T H x + g^T x
    subject to  A_eq x  = b_eq
                A_in x >= b_in

H only needs to be positive semidefinite. Each iteration solves the
equality-constrained subproblem on the working set in a null-space basis;
when the reduced Hessian is singular and the reduced gradient has a
component in its kernel, that component is a descent direction of zero
curvature and the step runs to the first blocking constraint. Constraints
enter and leave the working set by the smallest-index rule to avoid
cycling. The feasible set is assumed bounded.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .core import DimensionError, FrequencyVector, Measurement, NoiseModel, StrainMatrix


class InfeasibleStartError(ValueError):
    """The starting point violates the constraints."""


class UnboundedQPError(RuntimeError):
    """A descent direction without blocking constraint was found."""


@dataclass
class QPReport:
    converged: bool
    iterations: int
    objective: float
    stationarity: float
    feasibility: float
    complementarity: float
    active: tuple = ()


def _null_space(A: np.ndarray, n: int, rtol: float = 1e-12):
    """Orthonormal basis of ker(A) and rank of A."""
    if A.shape[0] == 0:
        return np.eye(n), 0
    Q, R = np.linalg.qr(A.T, mode="complete")
    diag = np.abs(np.diag(R)) if R.size else np.zeros(0)
    scale = max(1.0, float(diag.max(initial=0.0)))
    r = int(np.sum(diag > rtol * scale))
    return Q[:, r:], r


def _independent(A_eq: np.ndarray, rows: np.ndarray, rtol: float = 1e-10) -> list:
    """Greedily keep the rows of ``rows`` that extend the span of ``A_eq``."""
    full = np.vstack([A_eq, rows])
    if full.shape[0] <= full.shape[1]:
        sv = np.linalg.svd(full, compute_uv=False)
        if sv.min() > rtol * max(1.0, sv.max()):
            return list(range(rows.shape[0]))
    keep = []
    basis = A_eq.copy()
    rank = np.linalg.matrix_rank(basis) if basis.size else 0
    for i, a in enumerate(rows):
        trial = np.vstack([basis, a]) if basis.size else a[None, :]
        r = np.linalg.matrix_rank(trial, tol=rtol * max(1.0, np.abs(trial).max()))
        if r > rank:
            keep.append(i)
            basis, rank = trial, r
    return keep


def solve_qp(
    H: np.ndarray,
    g: np.ndarray,
    A_eq: Optional[np.ndarray],
    b_eq: Optional[np.ndarray],
    A_in: Optional[np.ndarray],
    b_in: Optional[np.ndarray],
    x0: np.ndarray,
    max_iters: Optional[int] = None,
    tol: float = 1e-10,
    feas_tol: float = 1e-9,
    working_set=None,
):
    """Solve a convex QP from a feasible starting point.

    Arguments:
        - H, g: objective 0.5 x^T H x + g^T x, H symmetric PSD
        - A_eq, b_eq: equality constraints (may be None)
        - A_in, b_in: inequalities A_in x >= b_in (may be None)
        - x0: feasible starting point
        - working_set: optional initial guess of active inequality indices

    Returns:
        - x: the minimizer reached along the active-set path from x0
        - report (`QPReport`)
    """
    x = np.array(x0, dtype=np.float64)
    N = x.size
    H = np.asarray(H, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    A_eq = np.zeros((0, N)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=np.float64))
    b_eq = np.zeros(0) if b_eq is None else np.atleast_1d(np.asarray(b_eq, dtype=np.float64))
    A_in = np.zeros((0, N)) if A_in is None else np.atleast_2d(np.asarray(A_in, dtype=np.float64))
    b_in = np.zeros(0) if b_in is None else np.atleast_1d(np.asarray(b_in, dtype=np.float64))
    if H.shape != (N, N) or g.shape != (N,):
        raise DimensionError("objective does not match the starting point")
    if max_iters is None:
        max_iters = 50 * max(N, 1) + 10 * A_in.shape[0]

    eq_res = np.abs(A_eq @ x - b_eq).max(initial=0.0)
    slack = A_in @ x - b_in
    if eq_res > feas_tol or slack.min(initial=0.0) < -feas_tol:
        raise InfeasibleStartError(
            f"start violates constraints (equality {eq_res:.3g}, inequality {-slack.min(initial=0.0):.3g})"
        )

    # the working set keeps A_eq plus linearly independent active rows
    if working_set is None:
        cand = np.flatnonzero(slack <= feas_tol)
    else:
        cand = np.array([i for i in working_set if slack[i] <= feas_tol], dtype=int)
    W = sorted(int(cand[i]) for i in _independent(A_eq, A_in[cand])) if cand.size else []

    def f(v):
        return float(0.5 * v @ H @ v + g @ v)

    hscale = max(1.0, float(np.abs(H).max(initial=0.0)))
    # gradients vanish at the optimum, so multiplier and curvature tests are
    # measured against the size of the objective terms instead
    pscale = max(hscale * max(1.0, float(np.abs(x).max(initial=0.0))), float(np.abs(g).max(initial=0.0)))
    obj = f(x)
    converged = False
    it = 0
    lam = np.zeros(0)
    for it in range(1, max_iters + 1):
        grad = H @ x + g
        AW = np.vstack([A_eq, A_in[W]]) if W else A_eq
        Z, _ = _null_space(AW, N)
        gscale = max(pscale, float(np.abs(grad).max()))
        if Z.shape[1]:
            gr = Z.T @ grad
            Hr = Z.T @ H @ Z
            evals, evecs = np.linalg.eigh(0.5 * (Hr + Hr.T))
            zero = evals <= 1e-11 * hscale
            gproj = evecs.T @ gr
            if np.any(zero) and np.abs(gproj[zero]).max() > tol * gscale:
                # zero-curvature descent direction
                v = -evecs[:, zero] @ gproj[zero]
                step = Z @ v
                unbounded = True
            else:
                coef = np.where(zero, 0.0, -gproj / np.where(zero, 1.0, evals))
                step = Z @ (evecs @ coef)
                unbounded = False
        else:
            step = np.zeros(N)
            unbounded = False

        if np.abs(step).max(initial=0.0) <= tol * max(1.0, np.abs(x).max(initial=0.0)):
            # stationary on the working set; check multipliers
            if AW.shape[0]:
                mult, *_ = np.linalg.lstsq(AW.T, grad, rcond=None)
                lam = mult[A_eq.shape[0] :]
            else:
                lam = np.zeros(0)
            neg = [k for k, l in enumerate(lam) if l < -tol * gscale]
            if not neg:
                converged = True
                break
            W.pop(neg[0])  # smallest index with a negative multiplier
            continue

        # ratio test over inactive inequalities
        Ap = A_in @ step
        alpha = np.inf if unbounded else 1.0
        block = None
        inW = np.zeros(A_in.shape[0], dtype=bool)
        inW[W] = True
        cand = np.flatnonzero((~inW) & (Ap < -1e-14 * max(1.0, np.abs(step).max())))
        if cand.size:
            ratios = (b_in[cand] - A_in[cand] @ x) / Ap[cand]
            ratios = np.maximum(ratios, 0.0)
            rmin = ratios.min()
            if rmin <= alpha:
                ties = cand[ratios <= rmin + 1e-15 * max(1.0, rmin)]
                block = int(ties.min())
                alpha = rmin
        if not np.isfinite(alpha):
            raise UnboundedQPError("objective decreases without bound along a feasible ray")
        x = x + alpha * step
        new_obj = f(x)
        obj = min(obj, new_obj)
        if block is not None:
            W = sorted(W + [block])

    grad = H @ x + g
    report = _kkt_report(x, grad, A_eq, b_eq, A_in, b_in, W, lam, converged, it, f(x))
    return x, report


def _kkt_report(x, grad, A_eq, b_eq, A_in, b_in, W, lam, converged, it, obj):
    neq = A_eq.shape[0]
    AW = np.vstack([A_eq, A_in[W]]) if W else A_eq
    if AW.shape[0]:
        mult, *_ = np.linalg.lstsq(AW.T, grad, rcond=None)
        stat = float(np.abs(grad - AW.T @ mult).max())
        lam_in = mult[neq:]
    else:
        stat = float(np.abs(grad).max())
        lam_in = np.zeros(0)
    slack = A_in @ x - b_in
    feas = max(
        float(np.abs(A_eq @ x - b_eq).max(initial=0.0)),
        float(-slack.min(initial=0.0)),
    )
    comp = float(np.abs(lam_in * slack[W]).max(initial=0.0)) if W else 0.0
    return QPReport(converged, it, obj, stat, feas, comp, tuple(W))


@dataclass(frozen=True)
class SimplexQP:
    """Convex QP with box bounds and a single linear equality.

        minimize 0.5 x^T hessian x + gradient^T x
        s.t.     lower <= x <= upper,  coefficients . x = rhs
    """

    hessian: np.ndarray
    gradient: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    coefficients: np.ndarray
    rhs: float

    def __post_init__(self):
        H = np.asarray(self.hessian, dtype=np.float64)
        n = H.shape[0]
        if H.shape != (n, n):
            raise DimensionError("hessian must be square")
        if not np.allclose(H, H.T, atol=1e-12 * max(1.0, np.abs(H).max())):
            raise ValueError("hessian is not symmetric")
        if n and np.linalg.eigvalsh(H).min() < -1e-10 * max(1.0, np.abs(H).max()):
            raise ValueError("hessian is not positive semidefinite")
        for name in ("gradient", "lower", "upper", "coefficients"):
            if np.asarray(getattr(self, name)).shape != (n,):
                raise DimensionError(f"{name} must have length {n}")

    @property
    def n(self) -> int:
        return len(self.gradient)

    def objective(self, x) -> float:
        x = np.asarray(x)
        return float(0.5 * x @ self.hessian @ x + self.gradient @ x)


def solve_simplex_qp(problem: SimplexQP, start, max_iters: Optional[int] = None, tol: float = 1e-10):
    """Active-set solve of a :class:`SimplexQP` from a feasible ``start``.

    Raises :class:`InfeasibleStartError` if ``start`` violates the bounds or
    the equality by more than 1e-9. If ``max_iters`` (default 50 n) runs out
    the last iterate is returned with ``report.converged = False``.
    """
    return _box_qp(
        problem.hessian, problem.gradient, problem.lower, problem.upper,
        problem.coefficients, problem.rhs, start, max_iters, tol,
    )


def _box_qp(H, g, lower, upper, coef, rhs, start, max_iters=None, tol=1e-10):
    n = len(g)
    A_in = np.vstack([np.eye(n), -np.eye(n)])
    b_in = np.concatenate([np.asarray(lower, dtype=np.float64), -np.asarray(upper, dtype=np.float64)])
    return solve_qp(
        H, g,
        np.asarray(coef, dtype=np.float64)[None, :],
        np.array([rhs], dtype=np.float64),
        A_in, b_in, start,
        max_iters=50 * n if max_iters is None else max_iters,
        tol=tol,
    )


class WUpdate(NamedTuple):
    matrix: StrainMatrix
    weights: FrequencyVector
    unique: bool
    report: QPReport


def solve_w_given_M(
    M: StrainMatrix,
    d: Measurement,
    noise: NoiseModel,
    w_start,
    max_steps: int = 5,
    tol: float = 1e-10,
) -> WUpdate:
    """Minimize the objective over the weights for a fixed strain matrix.

    Steps ``dw`` solve the local QP with ``0 <= w + dw <= 1`` and
    ``sum(dw) = 0`` until the step vanishes. The result is sorted in
    descending order and the columns of ``M`` are permuted to match, so the
    returned pair is in the ordered feasible set and has the same objective.
    ``unique`` is False when rank(M) < n - 1.
    """
    n = M.dims.n
    data = d.data if isinstance(d, Measurement) else np.asarray(d, dtype=np.float64)
    w = np.array(w_start.values if isinstance(w_start, FrequencyVector) else w_start, dtype=np.float64)
    if w.shape != (n,):
        raise DimensionError("starting weights do not match the matrix")
    prec = noise.precision
    A = M.entries
    H = A.T @ (prec[:, None] * A)
    report = None
    for _ in range(max_steps):
        grad = A.T @ (prec * (A @ w - data))
        dw, report = _box_qp(H, grad, -w, 1.0 - w, np.ones(n), 0.0, np.zeros(n), tol=tol)
        w = np.clip(w + dw, 0.0, 1.0)
        w = w / w.sum()
        # the step problem is the exact objective, so one converged solve suffices
        if report.converged or np.abs(dw).max() <= 1e-12:
            break
    order = np.argsort(-w, kind="stable")
    unique = n == 1 or np.linalg.matrix_rank(A) >= n - 1
    return WUpdate(M.permute_columns(order), FrequencyVector(w[order]), bool(unique), report)
