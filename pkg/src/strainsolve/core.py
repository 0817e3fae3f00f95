"""
Domain types, feasible sets and the forward model shared by every solver.

A mixed sample is described by a block-binary strain matrix ``M`` (q x n,
m stacked blocks of shape (p-1) x n) and an ordered frequency vector ``w``
on the simplex. Measurements are ``d = M w + noise`` with independent
Gaussian noise of known per-row standard deviation.
"""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

#: Soft upper limit on the number of per-site block candidates p**n.
MAX_BLOCK_CANDIDATES = 2**20

SUM_TOL = 1e-9
ORDER_TOL = 1e-9


class DimensionError(ValueError):
    """Raised when array shapes do not agree with the problem dimensions."""


class CapacityError(ValueError):
    """Raised when a request exceeds what can be enumerated or sampled."""


def worker_count() -> int:
    """Number of worker processes allowed, capped by ``STRAINSOLVE_THREADS``."""
    cap = os.environ.get("STRAINSOLVE_THREADS")
    ncpu = os.cpu_count() or 1
    if cap:
        try:
            return max(1, min(ncpu, int(cap)))
        except ValueError:
            pass
    return ncpu


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ProblemDims:
    """Instance shape: ``m`` sites, ``n`` strains, ``p`` classes per site."""

    m: int
    n: int
    p: int = 2

    def __post_init__(self):
        for name in ("m", "n", "p"):
            v = getattr(self, name)
            if int(v) != v:
                raise DimensionError(f"{name} must be an integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if self.m < 1 or self.n < 1:
            raise DimensionError(f"m and n must be >= 1, got m={self.m}, n={self.n}")
        if self.p < 2:
            raise DimensionError(f"p must be >= 2, got {self.p}")

    @property
    def q(self) -> int:
        """Number of measurement rows, m * (p - 1)."""
        return self.m * (self.p - 1)

    @property
    def block(self) -> int:
        return self.p - 1

    def with_n(self, n: int) -> "ProblemDims":
        return ProblemDims(self.m, n, self.p)

    def block_slice(self, k: int) -> slice:
        return slice(k * (self.p - 1), (k + 1) * (self.p - 1))


@dataclass(frozen=True)
class StrainMatrix:
    """Block-binary barcode matrix, one column per strain."""

    dims: ProblemDims
    entries: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.entries)
        if e.shape != (self.dims.q, self.dims.n):
            raise DimensionError(
                f"strain matrix has shape {e.shape}, expected {(self.dims.q, self.dims.n)}"
            )
        if not np.all((e == 0) | (e == 1)):
            raise ValueError("strain matrix entries must be 0 or 1")
        blocks = e.reshape(self.dims.m, self.dims.p - 1, self.dims.n)
        if np.any(blocks.sum(axis=1) > 1):
            raise ValueError("a block column selects more than one class")
        object.__setattr__(self, "entries", _frozen(e))

    @classmethod
    def from_array(cls, entries, p: int = 2) -> "StrainMatrix":
        e = np.atleast_2d(np.asarray(entries, dtype=np.float64))
        q, n = e.shape
        if q % (p - 1):
            raise DimensionError(f"{q} rows cannot be split into blocks of {p - 1}")
        return cls(ProblemDims(q // (p - 1), n, p), e)

    @property
    def blocks(self) -> np.ndarray:
        """View of shape (m, p-1, n)."""
        return self.entries.reshape(self.dims.m, self.dims.p - 1, self.dims.n)

    def permute_columns(self, order) -> "StrainMatrix":
        return StrainMatrix(self.dims, self.entries[:, list(order)])

    def augmented(self) -> np.ndarray:
        """Add each block's reference-class row so block column sums are one.

        Returns an (m*p) x n array where row ``k*p`` is the reference class of
        site ``k``.
        """
        b = self.blocks
        ref = 1.0 - b.sum(axis=1, keepdims=True)
        return np.concatenate([ref, b], axis=1).reshape(self.dims.m * self.dims.p, self.dims.n)

    def __eq__(self, other):
        if not isinstance(other, StrainMatrix):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.entries, other.entries)

    def __hash__(self):
        return hash((self.dims, self.entries.tobytes()))


@dataclass(frozen=True)
class FrequencyVector:
    """Strain proportions: non-negative, non-increasing, summing to one.

    The constructor normalizes by the sum and rejects ordering violations;
    use :meth:`sorted_from` to sort an unordered vector.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.values, dtype=np.float64))
        if v.ndim != 1 or v.size == 0:
            raise DimensionError("frequency vector must be a non-empty 1-d array")
        if not np.all(np.isfinite(v)):
            raise ValueError("frequency vector has non-finite entries")
        if np.any(v < -ORDER_TOL):
            raise ValueError(f"negative frequency in {v}")
        s = v.sum()
        if abs(s - 1.0) > SUM_TOL:
            if s <= 0:
                raise ValueError("frequencies sum to zero")
        v = np.clip(v, 0.0, None) / np.clip(v, 0.0, None).sum()
        if np.any(np.diff(v) > ORDER_TOL):
            raise ValueError(f"frequencies must be non-increasing, got {v}")
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def sorted_from(cls, values) -> "FrequencyVector":
        v = np.asarray(values, dtype=np.float64)
        return cls(-np.sort(-v))

    @property
    def n(self) -> int:
        return self.values.size

    def __len__(self):
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, FrequencyVector):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.values.tobytes())


@dataclass(frozen=True)
class Measurement:
    """Measured class frequencies, block ``k`` holding the non-reference
    classes of site ``k``. Values outside [0, 1] are kept and flagged."""

    dims: ProblemDims
    data: np.ndarray
    out_of_range: bool = field(init=False, default=False)

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64).ravel()
        if d.size != self.dims.q:
            raise DimensionError(f"measurement has length {d.size}, expected {self.dims.q}")
        if np.any(np.isnan(d)):
            raise ValueError("measurement contains NaN")
        object.__setattr__(self, "data", _frozen(d))
        flag = bool(np.any(d < 0) or np.any(d > 1))
        object.__setattr__(self, "out_of_range", flag)
        if flag:
            warnings.warn("measurement has values outside [0, 1]", stacklevel=3)

    @classmethod
    def from_array(cls, data, n: int, p: int = 2) -> "Measurement":
        d = np.asarray(data, dtype=np.float64).ravel()
        if d.size % (p - 1):
            raise DimensionError(f"length {d.size} is not a multiple of p-1={p - 1}")
        return cls(ProblemDims(d.size // (p - 1), n, p), d)

    @property
    def blocks(self) -> np.ndarray:
        return self.data.reshape(self.dims.m, self.dims.p - 1)

    def with_n(self, n: int) -> "Measurement":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return Measurement(self.dims.with_n(n), self.data)


@dataclass(frozen=True)
class NoiseModel:
    """Diagonal Gaussian noise, one standard deviation per measurement row."""

    stddevs: np.ndarray

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.stddevs, dtype=np.float64))
        if g.ndim != 1:
            raise DimensionError("stddevs must be 1-d")
        if not np.all(g > 0):
            raise ValueError("all noise standard deviations must be > 0")
        object.__setattr__(self, "stddevs", _frozen(g))

    @classmethod
    def uniform(cls, gamma: float, q: int) -> "NoiseModel":
        return cls(np.full(q, float(gamma)))

    @property
    def q(self) -> int:
        return self.stddevs.size

    @property
    def precision(self) -> np.ndarray:
        """Diagonal of the inverse covariance, 1 / gamma_i**2."""
        return 1.0 / self.stddevs**2

    @property
    def variance(self) -> np.ndarray:
        return self.stddevs**2

    def block(self, k: int, p: int) -> np.ndarray:
        return self.stddevs[k * (p - 1) : (k + 1) * (p - 1)]


@dataclass(frozen=True)
class Reconstruction:
    """A MAP candidate together with its objective value.

    ``gap`` is ``None`` for local (uncertified) solutions.
    """

    matrix: StrainMatrix
    weights: FrequencyVector
    objective: float
    certified: bool = False
    gap: Optional[float] = None
    converged: bool = True

    @classmethod
    def evaluate(cls, matrix, weights, d, noise, **kw) -> "Reconstruction":
        return cls(matrix, weights, objective_phi(matrix, weights, d, noise), **kw)


def _check_pair(M: StrainMatrix, w) -> np.ndarray:
    wv = w.values if isinstance(w, FrequencyVector) else np.asarray(w, dtype=np.float64)
    if wv.shape != (M.dims.n,):
        raise DimensionError(f"weights have shape {wv.shape}, matrix has {M.dims.n} columns")
    return wv


def forward(M: StrainMatrix, w) -> np.ndarray:
    """Noise-free measurement ``M @ w``.

    ``w`` may be a :class:`FrequencyVector` or a raw vector of length n.
    """
    return M.entries @ _check_pair(M, w)


def objective_phi(M: StrainMatrix, w, d: Measurement, noise: NoiseModel) -> float:
    """Negative log posterior up to a constant: sum_i (M w - d)_i**2 / gamma_i**2."""
    r = forward(M, w) - _data(d, M.dims.q)
    if noise.q != r.size:
        raise DimensionError(f"noise has {noise.q} rows, data has {r.size}")
    return float(np.sum(r * r * noise.precision))


def _data(d, q: int) -> np.ndarray:
    arr = d.data if isinstance(d, Measurement) else np.asarray(d, dtype=np.float64)
    if arr.size != q:
        raise DimensionError(f"data has length {arr.size}, expected {q}")
    return arr


@lru_cache(maxsize=64)
def _candidates(n: int, p: int) -> np.ndarray:
    if p**n > MAX_BLOCK_CANDIDATES:
        raise CapacityError(
            f"p**n = {p}**{n} exceeds the candidate limit {MAX_BLOCK_CANDIDATES}"
        )
    J = p**n
    idx = np.arange(J)
    digits = (idx[:, None] // p ** np.arange(n)[None, :]) % p  # (J, n), digit t -> strain t
    blocks = np.zeros((J, p - 1, n))
    for c in range(1, p):
        blocks[:, c - 1, :] = digits == c
    blocks.setflags(write=False)
    return blocks


def enumerate_block_candidates(n: int, p: int) -> np.ndarray:
    """All p**n admissible (p-1) x n blocks in canonical order.

    Candidate ``j`` is ``j`` written in base ``p``; the least significant
    digit gives the class of strain 1. Digit 0 is the reference class (an
    all-zero column), digit ``c >= 1`` puts a one in row ``c``. Ties between
    candidates are always broken in favour of the smaller index.

    Returns an array of shape (p**n, p-1, n).
    """
    if n < 1 or p < 2:
        raise DimensionError(f"need n >= 1 and p >= 2, got n={n}, p={p}")
    return _candidates(int(n), int(p))


def sign_vectors(n: int) -> np.ndarray:
    """All vectors in {-1, 0, 1}**n except zero, shape (3**n - 1, n)."""
    grid = np.array(np.meshgrid(*[[-1, 0, 1]] * n, indexing="ij")).reshape(n, -1).T
    return grid[np.any(grid != 0, axis=1)]


def bi_independence_margin(w) -> float:
    """Smallest |c^T w| over nonzero sign vectors c."""
    wv = w.values if isinstance(w, FrequencyVector) else np.asarray(w, dtype=np.float64)
    return float(np.min(np.abs(sign_vectors(wv.size) @ wv)))


def is_bi_independent(w, tol: float = 1e-9) -> bool:
    """True when no nonzero {-1, 0, 1} combination of ``w`` is within ``tol`` of zero."""
    return bi_independence_margin(w) > tol
