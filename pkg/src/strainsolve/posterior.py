"""
Posterior moments by exact summation over strain matrices and quadrature
over the ordered simplex.

For a fixed weight vector the posterior over strain matrices factorizes
across sites, so a separable integrand ``f(M, w) = sum_k f_k(M_k, w)`` can be
summed over all p**(m n) matrices in O(m p**n) work per quadrature node. All
exponentials are shifted by their per-site maximum and the node weights by
the global maximum of the log-scales, so nothing underflows to zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .core import (
    DimensionError,
    FrequencyVector,
    Measurement,
    NoiseModel,
    ProblemDims,
    enumerate_block_candidates,
)

SeedLike = Union[int, np.random.Generator, np.random.SeedSequence, None]

# nodes per chunk are chosen so that one chunk holds about this many floats
_CHUNK_FLOATS = 4_000_000


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_omega_w_uniform(n: int, count: int, rng_seed: SeedLike = None) -> np.ndarray:
    """Draw ``count`` points uniformly from the ordered simplex.

    Points are uniform on the full simplex (normalized exponential
    spacings) and then sorted in descending order; sorting folds the n!
    congruent chambers onto the ordered one, so the result is uniform there.

    Returns an array of shape (count, n), one frequency vector per row.
    """
    if n < 1 or count < 1:
        raise ValueError(f"need n >= 1 and count >= 1, got n={n}, count={count}")
    rng = _rng(rng_seed)
    e = rng.exponential(size=(count, n))
    w = e / e.sum(axis=1, keepdims=True)
    return -np.sort(-w, axis=1)


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes in the ordered simplex (rows of ``nodes``) with positive weights."""

    nodes: np.ndarray
    weights: np.ndarray
    kind: str = "user-supplied"

    def __post_init__(self):
        nodes = np.atleast_2d(np.asarray(self.nodes, dtype=np.float64))
        weights = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        if nodes.shape[0] != weights.size or weights.size < 1:
            raise DimensionError("need one positive weight per node and at least one node")
        if np.any(weights <= 0):
            raise ValueError("quadrature weights must be positive")
        if np.any(nodes < -1e-12) or np.any(np.abs(nodes.sum(axis=1) - 1) > 1e-9):
            raise ValueError("quadrature nodes must lie on the simplex")
        if np.any(np.diff(nodes, axis=1) > 1e-9):
            raise ValueError("quadrature nodes must be in non-increasing order")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def monte_carlo(cls, n: int, count: int, rng_seed: SeedLike = None) -> "QuadratureRule":
        nodes = sample_omega_w_uniform(n, count, rng_seed)
        return cls(nodes, np.full(count, 1.0 / count), "monte-carlo-uniform")

    @classmethod
    def from_vectors(cls, vectors: Sequence[FrequencyVector], weights=None) -> "QuadratureRule":
        nodes = np.array([v.values for v in vectors])
        if weights is None:
            weights = np.full(len(nodes), 1.0 / len(nodes))
        return cls(nodes, weights)

    @property
    def size(self) -> int:
        return self.weights.size


@dataclass(frozen=True)
class SeparableFunction:
    """Integrand of the form ``f(M, w) = sum_k f_k(M_k, w)``.

    ``block(k, candidates, nodes)`` returns ``f_k`` for every block candidate
    and node, with shape (S or 1, J, *block_shape); ``place(k)`` is the index
    of the output array that ``f_k`` contributes to.
    """

    shape: tuple
    block: Callable[[int, np.ndarray, np.ndarray], np.ndarray]
    place: Callable[[int], object]

    @classmethod
    def constant_one(cls, m: int) -> "SeparableFunction":
        return cls((), lambda k, c, w: np.full((1, len(c)), 1.0 / m), lambda k: ())

    @classmethod
    def strain_matrix(cls, dims: ProblemDims) -> "SeparableFunction":
        return cls((dims.q, dims.n), lambda k, c, w: c[None], dims.block_slice)

    @classmethod
    def weights(cls, m: int, power: int = 1) -> "SeparableFunction":
        return cls(None, lambda k, c, w: (w**power / m)[:, None, :], lambda k: slice(None))


@dataclass
class IntegrationWorkspace:
    """Per-node accumulators of the stabilized sum-of-products.

    ``log_scale[s]`` holds sum_k U_k + sum_k log P_k, so that the product of
    per-site partition sums cannot overflow for large m; ``ratio[f][s]`` is
    J_s(f) / J_s(1) = sum_k G_k / P_k.
    """

    log_scale: np.ndarray
    ratios: list


def _site_loglik(cand_pred: np.ndarray, d_k: np.ndarray, prec_k: np.ndarray) -> np.ndarray:
    r = cand_pred - d_k[None, None, :]
    return -0.5 * np.einsum("sjr,r->sj", r * r, prec_k)


def _node_pass(fs, d: Measurement, noise: NoiseModel, nodes: np.ndarray) -> IntegrationWorkspace:
    m, p = d.dims.m, d.dims.p
    n = nodes.shape[1]
    cand = enumerate_block_candidates(n, p)  # (J, p-1, n)
    prec = noise.precision
    S = nodes.shape[0]
    log_scale = np.zeros(S)
    ratios = []
    for f in fs:
        shape = (n,) if f.shape is None else f.shape
        ratios.append(np.zeros((S,) + tuple(shape)))
    pred = np.einsum("sn,jrn->sjr", nodes, cand)
    for k in range(m):
        sl = d.dims.block_slice(k)
        L = _site_loglik(pred, d.data[sl], prec[sl])
        U = L.max(axis=1)
        E = np.exp(L - U[:, None])
        P = E.sum(axis=1)
        log_scale += U + np.log(P)
        for f, acc in zip(fs, ratios):
            F = f.block(k, cand, nodes)
            G = np.einsum("sj,sj...->s...", E, np.broadcast_to(F, (S,) + F.shape[1:]))
            G = G / P.reshape((S,) + (1,) * (G.ndim - 1))
            idx = f.place(k)
            if idx == ():
                acc += G
            else:
                acc[(slice(None),) + (idx if isinstance(idx, tuple) else (idx,))] += G
    return IntegrationWorkspace(log_scale, ratios)


def conditional_means(fs, d: Measurement, noise: NoiseModel, rule: QuadratureRule) -> list:
    """Posterior means of several separable functions on the same nodes."""
    if np.any(~np.isfinite(d.data)):
        raise ValueError("measurement contains non-finite values")
    if noise.q != d.dims.q:
        raise DimensionError("noise does not match the measurement")
    if rule.nodes.shape[1] != d.dims.n:
        raise DimensionError("quadrature nodes do not match the number of strains")
    J = d.dims.p ** d.dims.n
    width = max(
        [d.dims.p * J] + [J * int(np.prod(f.shape if f.shape is not None else (d.dims.n,))) for f in fs]
    )
    chunk = max(1, _CHUNK_FLOATS // width)
    logw = np.log(rule.weights)
    scales, parts = [], []
    for start in range(0, rule.size, chunk):
        ws = _node_pass(fs, d, noise, rule.nodes[start : start + chunk])
        scales.append(ws.log_scale + logw[start : start + chunk])
        parts.append(ws.ratios)
    lam = np.concatenate(scales)
    shift = lam.max()
    assert np.isfinite(shift), "all posterior partition sums vanished"
    omega = np.exp(lam - shift)
    total = omega.sum()
    out = []
    for i in range(len(fs)):
        R = np.concatenate([p[i] for p in parts], axis=0)
        out.append(np.tensordot(omega, R, axes=(0, 0)) / total)
    return out


def conditional_mean(f: SeparableFunction, d: Measurement, noise: NoiseModel, rule: QuadratureRule):
    """Posterior mean E[f(M, W) | d] of a separable function."""
    (res,) = conditional_means([f], d, noise, rule)
    return res


@dataclass(frozen=True)
class PosteriorStats:
    M_mean: np.ndarray
    M_std: np.ndarray
    w_mean: np.ndarray
    w_std: np.ndarray
    node_count: int
    rng_seed: object = None


def posterior_stats(
    d: Measurement,
    noise: NoiseModel,
    dims: ProblemDims = None,
    node_count: int = 10_000,
    rng_seed: SeedLike = None,
    rule: QuadratureRule = None,
) -> PosteriorStats:
    """Conditional mean and standard deviation of M and w.

    M, w and w**2 are integrated on one shared Monte Carlo rule. Because M
    is binary, its standard deviation follows from the mean alone.
    """
    dims = d.dims if dims is None else dims
    if dims.q != d.dims.q:
        raise DimensionError("dims do not match the measurement")
    if dims.n != d.dims.n:
        d = d.with_n(dims.n)
    if node_count < 1:
        raise ValueError("node_count must be >= 1")
    if rule is None:
        rule = QuadratureRule.monte_carlo(dims.n, node_count, rng_seed)
    fM = SeparableFunction.strain_matrix(dims)
    fw = SeparableFunction.weights(dims.m)
    fw2 = SeparableFunction.weights(dims.m, power=2)
    M_mean, w_mean, w2 = conditional_means([fM, fw, fw2], d, noise, rule)
    M_mean = np.clip(M_mean, 0.0, 1.0)
    M_std = np.sqrt(np.clip(M_mean * (1.0 - M_mean), 0.0, None))
    w_std = np.sqrt(np.clip(w2 - w_mean**2, 0.0, None))
    seed = rng_seed if isinstance(rng_seed, (int, type(None))) else None
    return PosteriorStats(M_mean, M_std, w_mean, w_std, rule.size, seed)


def _site_entropies(W: np.ndarray, d: Measurement, noise: NoiseModel) -> np.ndarray:
    """Per-site entropies in bits, shape (len(W), m)."""
    cand = enumerate_block_candidates(W.shape[1], d.dims.p)
    pred = np.einsum("sn,jrn->sjr", W, cand)
    prec = noise.precision
    out = np.zeros((W.shape[0], d.dims.m))
    for k in range(d.dims.m):
        sl = d.dims.block_slice(k)
        L = _site_loglik(pred, d.data[sl], prec[sl])
        L = L - L.max(axis=1, keepdims=True)
        E = np.exp(L)
        P = E / E.sum(axis=1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(P > 0, P * np.log2(P), 0.0)
        out[:, k] = -t.sum(axis=1)
    return np.clip(out, 0.0, None)


def entropy_of_M_given_w(w, d: Measurement, noise: NoiseModel, per_site: bool = False):
    """Shannon entropy (bits) of the strain-matrix posterior at fixed ``w``.

    The conditional distribution factorizes over sites, so the total is the
    sum of per-site block entropies. Uses the convention 0 log 0 = 0.
    """
    wv = np.atleast_2d(w.values if isinstance(w, FrequencyVector) else np.asarray(w, dtype=np.float64))
    if wv.shape[1] != d.dims.n and d.dims.n:
        d = d.with_n(wv.shape[1])
    H = _site_entropies(wv, d, noise)[0]
    return H if per_site else float(H.sum())


def simplex_grid(resolution: int, n: int = 3) -> np.ndarray:
    """Barycentric lattice points of the ordered simplex with spacing 1/resolution."""
    if n != 3:
        raise DimensionError("grids are only provided for n = 3")
    R = int(resolution)
    pts = [(a, b, R - a - b) for a in range(R + 1) for b in range(R + 1 - a) if a >= b >= R - a - b]
    return np.array(pts, dtype=np.float64) / R


def entropy_map(d: Measurement, noise: NoiseModel, dims: ProblemDims = None, resolution: int = 100) -> np.ndarray:
    """Entropy of the strain-matrix posterior on a grid over the ordered
    simplex for three strains.

    Returns rows (w1, w2, w3, entropy_bits).
    """
    n = d.dims.n if dims is None else dims.n
    if n != 3:
        raise DimensionError(f"entropy maps need n = 3, got n = {n}")
    d = d.with_n(3)
    W = simplex_grid(resolution)
    H = _site_entropies(W, d, noise).sum(axis=1)
    return np.column_stack([W, H])
