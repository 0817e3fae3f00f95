"""
Synthetic instances, the permutation-invariant reconstruction error and the
benchmark harness.

The error between two (M, w) pairs compares their weighted barcodes
tau(M) diag(w), where tau restores each site's reference-class row so that
every block column sums to one. The 1-norm distance is minimized over all
relabelings of the strains.
"""
from __future__ import annotations

import itertools
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .bcd import BcdConfig, bcd_map
from .core import (
    CapacityError,
    DimensionError,
    FrequencyVector,
    Measurement,
    NoiseModel,
    ProblemDims,
    Reconstruction,
    StrainMatrix,
    forward,
)
from .miqp import solve_global
from .posterior import simplex_grid

log = logging.getLogger(__name__)

MAX_REJECTIONS = 10_000
BACKENDS = ("bcd", "global")
QUANTILES = (0.1, 0.25, 0.5, 0.75, 0.9)


def _seed(root: int, *key: int) -> np.random.Generator:
    """Independent generator for one (cell, sample, ...) coordinate."""
    return np.random.default_rng(np.random.SeedSequence(root, spawn_key=tuple(int(k) for k in key)))


# ---------------------------------------------------------------------------
# weighted barcodes and the reconstruction error


@dataclass(frozen=True)
class WeightedBarcode:
    """tau(M) diag(w): an (m*p) x n matrix whose block column sums are w_j.

    Row ``k*p`` is the reference class of site ``k``.
    """

    augmented: np.ndarray

    @classmethod
    def from_pair(cls, M: StrainMatrix, w) -> "WeightedBarcode":
        wv = w.values if isinstance(w, FrequencyVector) else np.asarray(w, dtype=np.float64)
        if wv.shape != (M.dims.n,):
            raise DimensionError(f"{wv.size} weights for {M.dims.n} strains")
        return cls(M.augmented() * wv[None, :])


@lru_cache(maxsize=16)
def _permutations(n: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n))), dtype=np.intp)


def _min_perm_l1(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """min over column permutations P of |A - B P|_1 for stacks of matrices.

    A, B have shape (..., rows, n). The cost of matching column a of A with
    column b of B is tabulated once, then summed along every permutation.
    """
    n = A.shape[-1]
    cost = np.abs(A[..., :, :, None] - B[..., :, None, :]).sum(axis=-3)  # (..., n, n)
    perms = _permutations(n)
    totals = cost[..., np.arange(n)[None, :], perms].sum(axis=-1)  # (..., n!)
    return totals.min(axis=-1)


def recon_error(truth: Tuple[StrainMatrix, FrequencyVector], estimate: Tuple[StrainMatrix, FrequencyVector]) -> float:
    """Reconstruction error between two (M, w) pairs.

    Minimum over all n! strain relabelings of the entrywise 1-norm of the
    difference of the weighted barcodes. Each weighted barcode has total
    mass m (every site's block sums to the weights), so e lies in [0, 2m].
    """
    (M, w), (Mh, wh) = truth, estimate
    if M.dims != Mh.dims:
        raise DimensionError(f"dims differ: {M.dims} vs {Mh.dims}")
    A = WeightedBarcode.from_pair(M, w).augmented
    B = WeightedBarcode.from_pair(Mh, wh).augmented
    return float(_min_perm_l1(A, B))


def best_permutation(truth, estimate) -> Tuple[int, ...]:
    """Relabeling ``perm`` with estimate column ``perm[j]`` matched to truth
    column ``j``; the first minimizer in lexicographic order."""
    (M, w), (Mh, wh) = truth, estimate
    A = WeightedBarcode.from_pair(M, w).augmented
    B = WeightedBarcode.from_pair(Mh, wh).augmented
    n = M.dims.n
    cost = np.abs(A[:, :, None] - B[:, None, :]).sum(axis=0)
    perms = _permutations(n)
    totals = cost[np.arange(n)[None, :], perms].sum(axis=1)
    return tuple(int(v) for v in perms[int(np.argmin(totals))])


# ---------------------------------------------------------------------------
# synthetic instances


def distinct_column_capacity(dims: ProblemDims) -> float:
    """Number of distinct admissible barcode columns, p**m (as a float)."""
    return math.exp(dims.m * math.log(dims.p)) if dims.m * math.log(dims.p) < 700 else math.inf


def _random_matrix(dims: ProblemDims, rng: np.random.Generator) -> np.ndarray:
    classes = rng.integers(0, dims.p, size=(dims.m, dims.n))
    blocks = np.zeros((dims.m, dims.p - 1, dims.n))
    for c in range(1, dims.p):
        blocks[:, c - 1, :] = classes == c
    return blocks.reshape(dims.q, dims.n)


def sample_ground_truth(dims: ProblemDims, rng_seed=None) -> Tuple[StrainMatrix, FrequencyVector]:
    """Draw (M, w) from the uniform prior with pairwise distinct columns.

    Every site independently gives every strain a uniformly chosen class;
    draws with repeated columns are rejected. w is uniform on the ordered
    simplex.

    Raises:
        CapacityError: fewer than n distinct columns exist, or no draw with
            distinct columns was found within 10**4 attempts.
    """
    if distinct_column_capacity(dims) < dims.n:
        raise CapacityError(f"only {dims.p}**{dims.m} distinct columns exist, need {dims.n}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    for _ in range(MAX_REJECTIONS):
        E = _random_matrix(dims, rng)
        if len({col.tobytes() for col in E.T}) == dims.n:
            break
    else:
        raise CapacityError(f"no matrix with distinct columns after {MAX_REJECTIONS} draws")
    e = rng.exponential(size=dims.n)
    return StrainMatrix(dims, E), FrequencyVector(-np.sort(-e / e.sum()))


def add_noise(d_clean, noise: NoiseModel, rng_seed=None) -> Measurement:
    """``d_clean`` plus independent N(0, gamma_i**2) noise.

    ``d_clean`` is a :class:`Measurement` or a raw vector (read as p = 2
    with one strain; pass a Measurement to keep the dims).
    """
    if isinstance(d_clean, Measurement):
        dims, clean = d_clean.dims, d_clean.data
    else:
        clean = np.asarray(d_clean, dtype=np.float64).ravel()
        dims = ProblemDims(clean.size, 1, 2)
    if noise.q != clean.size:
        raise DimensionError(f"noise has {noise.q} rows, data has {clean.size}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    noisy = clean + noise.stddevs * rng.standard_normal(clean.size)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return Measurement(dims, noisy)


def random_pair_baseline(dims: ProblemDims, pairs: int = 10_000, rng_seed=None) -> float:
    """Mean reconstruction error between independent prior samples."""
    rng = np.random.default_rng(rng_seed)
    A = np.empty((pairs, dims.m * dims.p, dims.n))
    B = np.empty_like(A)
    for k in range(pairs):
        M, w = sample_ground_truth(dims, rng)
        A[k] = WeightedBarcode.from_pair(M, w).augmented
        M, w = sample_ground_truth(dims, rng)
        B[k] = WeightedBarcode.from_pair(M, w).augmented
    return float(_min_perm_l1(A, B).mean())


# ---------------------------------------------------------------------------
# benchmark


@dataclass(frozen=True)
class BenchmarkSpec:
    """Grid of benchmark cells.

    ``node_limit`` bounds each global solve; when ``warm_start_global`` is
    set and the BCD backend also runs, the global backend starts from the
    BCD estimate of the same instance. Instances and noise are seeded per
    (cell, sample), so every noise level of a cell sees the same truths.
    """

    cells: Tuple[ProblemDims, ...] = (ProblemDims(10, 3, 2),)
    gammas: Tuple[float, ...] = (1e-2, 1e-3)
    sample_count: int = 200
    backends: Tuple[str, ...] = BACKENDS
    rng_seed: int = 0
    bcd: BcdConfig = BcdConfig()
    mip_gap: float = 1e-6
    node_limit: int = 10**6
    warm_start_global: bool = True
    baseline_pairs: int = 10_000
    workers: int = 1

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if not self.cells or not self.gammas:
            raise ValueError("need at least one cell and one noise level")
        bad = [b for b in self.backends if b not in BACKENDS]
        if bad or not self.backends:
            raise ValueError(f"unknown backends {bad}; choose from {BACKENDS}")
        if any(not g > 0 for g in self.gammas):
            raise ValueError("noise levels must be > 0")
        object.__setattr__(self, "cells", tuple(self.cells))
        object.__setattr__(self, "gammas", tuple(float(g) for g in self.gammas))
        object.__setattr__(self, "backends", tuple(self.backends))


@dataclass
class BenchmarkRow:
    cell: int
    dims: ProblemDims
    gamma: float
    sample: int
    backend: str
    error: float
    objective: float
    certified: bool
    gap: float
    wall_time: float
    status: str = "ok"


@dataclass
class CellSummary:
    dims: ProblemDims
    gamma: float
    backend: str
    sorted_errors: np.ndarray
    mean: float
    quantiles: Dict[float, float]
    baseline: float
    failures: int
    certified_fraction: float


@dataclass
class BenchmarkResult:
    spec: BenchmarkSpec
    rows: List[BenchmarkRow]
    baselines: Dict[int, float]
    summaries: List[CellSummary] = field(default_factory=list)

    def summary(self, dims: ProblemDims, gamma: float, backend: str) -> CellSummary:
        for s in self.summaries:
            if s.dims == dims and s.gamma == gamma and s.backend == backend:
                return s
        raise KeyError((dims, gamma, backend))


def _run_sample(job):
    spec, ci, gi, s = job
    dims, gamma = spec.cells[ci], spec.gammas[gi]
    truth = sample_ground_truth(dims, _seed(spec.rng_seed, ci, s))
    noise = NoiseModel.uniform(gamma, dims.q)
    with warnings.catch_warnings():
        # sums of weights may exceed 1 by a rounding error
        warnings.simplefilter("ignore")
        clean = Measurement(dims, forward(*truth))
    d = add_noise(clean, noise, _seed(spec.rng_seed, ci, s, gi + 1))
    rows, local = [], None
    for backend in spec.backends:
        t0 = time.perf_counter()
        try:
            if backend == "bcd":
                rec = bcd_map(d, noise, dims, spec.bcd).best
                local = rec
            else:
                warm = local if spec.warm_start_global else None
                rec = solve_global(d, noise, dims, spec.mip_gap, spec.node_limit, warm_start=warm).incumbent
            err = recon_error(truth, (rec.matrix, rec.weights))
            row = BenchmarkRow(ci, dims, gamma, s, backend, err, rec.objective, rec.certified,
                               rec.gap if rec.gap is not None else float("nan"), time.perf_counter() - t0)
        except Exception as exc:  # recorded per row, the run goes on
            log.warning("cell %d sample %d %s failed: %s", ci, s, backend, exc)
            row = BenchmarkRow(ci, dims, gamma, s, backend, float("nan"), float("nan"), False,
                               float("nan"), time.perf_counter() - t0, f"error: {exc}")
        rows.append(row)
    return rows


def summarize(rows: Sequence[BenchmarkRow], dims, gamma, backend, baseline) -> CellSummary:
    sel = [r for r in rows if r.dims == dims and r.gamma == gamma and r.backend == backend]
    ok = np.array([r.error for r in sel if r.status == "ok"])
    errs = np.sort(ok)
    q = {p: float(np.quantile(errs, p)) for p in QUANTILES} if errs.size else {p: float("nan") for p in QUANTILES}
    cert = float(np.mean([r.certified for r in sel if r.status == "ok"])) if errs.size else 0.0
    mean = float(errs.mean()) if errs.size else float("nan")
    return CellSummary(dims, gamma, backend, errs, mean, q, baseline, len(sel) - errs.size, cert)


def run_benchmark(spec: BenchmarkSpec) -> BenchmarkResult:
    """Run every backend on every (cell, noise level, sample).

    Rows come back in (cell, noise level, sample, backend) order whatever
    the worker count. Failed solves are kept as rows with a status message.
    """
    jobs = [
        (spec, ci, gi, s)
        for ci in range(len(spec.cells))
        for gi in range(len(spec.gammas))
        for s in range(spec.sample_count)
    ]
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as ex:
            chunks = list(ex.map(_run_sample, jobs, chunksize=max(1, len(jobs) // (8 * spec.workers))))
    else:
        chunks = [_run_sample(j) for j in jobs]
    rows = [r for chunk in chunks for r in chunk]
    for r in rows:
        if r.status == "ok" and not r.error <= 2.0 * r.dims.m + 1e-9:
            raise AssertionError(f"reconstruction error {r.error} exceeds 2m")
    baselines = {
        ci: random_pair_baseline(dims, spec.baseline_pairs, _seed(spec.rng_seed, ci, 2**31))
        for ci, dims in enumerate(spec.cells)
    }
    result = BenchmarkResult(spec, rows, baselines)
    for ci, dims in enumerate(spec.cells):
        for gamma in spec.gammas:
            for backend in spec.backends:
                result.summaries.append(summarize(rows, dims, gamma, backend, baselines[ci]))
    return result


# ---------------------------------------------------------------------------
# error map over the simplex


def error_vs_w_map(
    M_fixed: StrainMatrix,
    gammas: Sequence[float],
    resolution: int = 60,
    rng_seed: int = 0,
    config: Optional[BcdConfig] = None,
) -> Dict[float, np.ndarray]:
    """Reconstruction error of the BCD estimate over a grid of three-strain
    frequency vectors, for a fixed barcode matrix.

    Returns, per noise level, rows (w1, w2, w3, e) over the ordered
    barycentric lattice with spacing 1/resolution.
    """
    if M_fixed.dims.n != 3:
        raise DimensionError(f"error maps need n = 3, got n = {M_fixed.dims.n}")
    config = config or BcdConfig()
    dims = M_fixed.dims
    grid = simplex_grid(resolution, 3)
    out = {}
    for gi, gamma in enumerate(gammas):
        noise = NoiseModel.uniform(gamma, dims.q)
        errs = np.empty(len(grid))
        for k, wv in enumerate(grid):
            w = FrequencyVector(wv)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                clean = Measurement(dims, forward(M_fixed, w))
            d = add_noise(clean, noise, _seed(rng_seed, gi, k))
            rec = bcd_map(d, noise, dims, config).best
            errs[k] = recon_error((M_fixed, w), (rec.matrix, rec.weights))
        out[float(gamma)] = np.column_stack([grid, errs])
    return out
