"""
Multi-start block coordinate descent for the MAP estimate.

Each trial alternates an exact strain-matrix update (the problem splits into
m independent per-site searches over p**n block candidates) with a convex QP
update of the weights, until the matrix stops changing and the weights move
less than ``tol_w``.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np

from .core import (
    FrequencyVector,
    Measurement,
    NoiseModel,
    ProblemDims,
    Reconstruction,
    StrainMatrix,
    enumerate_block_candidates,
    objective_phi,
)
from .posterior import sample_omega_w_uniform
from .qp import solve_w_given_M

log = logging.getLogger(__name__)

TIE_TOL = 1e-12


@dataclass(frozen=True)
class BcdConfig:
    n_trials: int = 20
    tol_w: float = 1e-3
    max_iters: int = 10
    rng_seed: int = 0
    keep_all_modes: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.n_trials < 1 or self.max_iters < 1:
            raise ValueError("n_trials and max_iters must be >= 1")
        if not self.tol_w > 0:
            raise ValueError("tol_w must be > 0")


@dataclass
class ModeSet:
    """Distinct terminal points of the trials and the index of the best one.

    ``trials`` holds every trial's terminal point in trial order when the
    configuration asks for all modes.
    """

    modes: List[Reconstruction]
    best_index: int
    trials: Optional[List[Reconstruction]] = None

    @property
    def best(self) -> Reconstruction:
        return self.modes[self.best_index]


class MUpdate(NamedTuple):
    matrix: StrainMatrix
    ties: np.ndarray


def site_residuals(w, d: Measurement, noise: NoiseModel) -> np.ndarray:
    """Weighted residual of every block candidate at every site, shape (m, p**n)."""
    wv = w.values if isinstance(w, FrequencyVector) else np.asarray(w, dtype=np.float64)
    p = d.dims.p
    cand = enumerate_block_candidates(wv.size, p)
    pred = cand @ wv  # (J, p-1)
    r = pred[None, :, :] - d.blocks[:, None, :]
    prec = noise.precision.reshape(d.dims.m, p - 1)
    return np.einsum("mjr,mr->mj", r * r, prec)


def solve_M_given_w(w, d: Measurement, noise: NoiseModel) -> MUpdate:
    """Exact strain-matrix update for fixed weights.

    Each site independently takes the block candidate with the smallest
    weighted residual; candidates within 1e-12 (relative to the minimum, with
    a floor of one) of the minimum count as tied and the smallest index wins.
    Returns the matrix and a per-site flag marking ties.
    """
    wv = w.values if isinstance(w, FrequencyVector) else np.asarray(w, dtype=np.float64)
    R = site_residuals(wv, d, noise)
    best = R.min(axis=1, keepdims=True)
    near = R <= best + TIE_TOL * np.maximum(1.0, best)
    choice = np.argmax(near, axis=1)
    ties = near.sum(axis=1) >= 2
    cand = enumerate_block_candidates(wv.size, d.dims.p)
    entries = cand[choice].reshape(d.dims.q, wv.size)
    return MUpdate(StrainMatrix(ProblemDims(d.dims.m, wv.size, d.dims.p), entries), ties)


def min_objective_over_M(W: np.ndarray, d: Measurement, noise: NoiseModel) -> np.ndarray:
    """min over strain matrices of the objective, for each row of ``W``."""
    W = np.atleast_2d(W)
    return np.array([site_residuals(w, d, noise).min(axis=1).sum() for w in W])


@dataclass
class TrialResult:
    reconstruction: Reconstruction
    iterations: int
    history: list = field(default_factory=list)


def bcd_trial(
    d: Measurement,
    noise: NoiseModel,
    w0,
    tol_w: float = 1e-3,
    max_iters: int = 10,
    trace: bool = False,
) -> TrialResult:
    """One descent run from ``w0``.

    With ``trace`` the history records, per iteration, the objective before
    the matrix update, after it and after the weight update.
    """
    w = FrequencyVector(w0) if not isinstance(w0, FrequencyVector) else w0
    d = d if d.dims.n == w.n else d.with_n(w.n)
    prev_M = None
    history = []
    M = None
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        step_M = solve_M_given_w(w, d, noise).matrix
        upd = solve_w_given_M(step_M, d, noise, w)
        if trace:
            before = objective_phi(prev_M, w, d, noise) if prev_M is not None else np.inf
            history.append(
                (before, objective_phi(step_M, w, d, noise), objective_phi(upd.matrix, upd.weights, d, noise))
            )
        stalled = prev_M is not None and step_M == prev_M
        moved = float(np.linalg.norm(upd.weights.values - w.values))
        M, w = upd.matrix, upd.weights
        prev_M = M
        if stalled and moved < tol_w:
            converged = True
            break
    rec = Reconstruction.evaluate(M, w, d, noise, converged=converged)
    return TrialResult(rec, it, history)


def _run_trial(args):
    d, noise, w0, tol_w, max_iters = args
    return bcd_trial(d, noise, w0, tol_w, max_iters).reconstruction


def _mode_key(r: Reconstruction):
    return (r.matrix.entries.tobytes(), tuple(np.round(r.weights.values, 6)))


def _rank_key(r: Reconstruction, t: int):
    return (r.objective, tuple(r.matrix.entries.T.ravel()), t)


def bcd_map(d: Measurement, noise: NoiseModel, dims: ProblemDims = None, config: BcdConfig = None) -> ModeSet:
    """Multi-start block coordinate descent MAP estimate.

    Trial starting points are drawn uniformly from the ordered simplex with
    a generator seeded by ``config.rng_seed``, so results are reproducible.
    The best mode minimizes (objective, column-major matrix entries, trial).
    """
    config = config or BcdConfig()
    dims = d.dims if dims is None else dims
    if dims.q != d.dims.q:
        raise ValueError("dims do not match the measurement")
    if dims.n != d.dims.n:
        d = d.with_n(dims.n)
    starts = sample_omega_w_uniform(dims.n, config.n_trials, config.rng_seed)
    jobs = [(d, noise, w0, config.tol_w, config.max_iters) for w0 in starts]
    if config.workers > 1 and config.n_trials > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as ex:
            results = list(ex.map(_run_trial, jobs, chunksize=max(1, len(jobs) // (4 * config.workers))))
    else:
        results = [_run_trial(j) for j in jobs]
    order = sorted(range(len(results)), key=lambda t: _rank_key(results[t], t))
    modes, seen = [], set()
    # walk trials in rank order so the first mode is the best one
    for t in order:
        key = _mode_key(results[t])
        if key not in seen:
            seen.add(key)
            modes.append(results[t])
    return ModeSet(modes, 0, results if config.keep_all_modes else None)


@dataclass
class MoiEstimate:
    n: int
    discrepancies: List[float]
    reached: bool
    estimates: List[Reconstruction]


def estimate_moi(
    d: Measurement,
    noise: NoiseModel,
    m: int = None,
    p: int = None,
    n_max: int = 6,
    solver: str = "bcd",
    config: BcdConfig = None,
    mip_gap: float = 1e-6,
    node_limit: int = 10**6,
) -> MoiEstimate:
    """Smallest number of strains whose MAP fit meets the noise level.

    Tries n = 1, 2, ... and stops at the first n with
    ||M(n) w(n) - d||**2 <= sum_i gamma_i**2. If ``n_max`` is reached
    without meeting the bound, returns ``n_max`` with ``reached = False``.
    ``solver`` is one of "bcd", "global" or "hybrid".
    """
    from .miqp import map_estimate

    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    m = d.dims.m if m is None else m
    p = d.dims.p if p is None else p
    if m * (p - 1) != d.dims.q:
        raise ValueError("m and p do not match the measurement length")
    bound = float(np.sum(noise.variance))
    disc, ests = [], []
    for n in range(1, n_max + 1):
        dn = Measurement(ProblemDims(m, n, p), d.data) if d.dims.n != n else d
        rec = map_estimate(dn, noise, solver, config=config, mip_gap=mip_gap, node_limit=node_limit)
        r = rec.matrix.entries @ rec.weights.values - d.data
        disc.append(float(r @ r))
        ests.append(rec)
        log.debug("n=%d discrepancy %.6g (bound %.6g)", n, disc[-1], bound)
        if disc[-1] <= bound:
            return MoiEstimate(n, disc, True, ests)
    return MoiEstimate(n_max, disc, False, ests)
