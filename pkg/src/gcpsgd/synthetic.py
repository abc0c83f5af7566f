"""Synthetic test problems with known solutions, and the recovery score."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError
from .tensor import (
    DENSE_GUARD,
    DenseTensor,
    KruskalModel,
    Shape,
    ShapeLike,
    SparseTensor,
    _guard,
    full_model,
    linear_index,
    model_entries,
    multi_index,
)

RECOVERY_THRESHOLD = 0.9
_EXHAUSTIVE_MAX_RANK = 8


def gen_gamma_problem(shape: ShapeLike, rank: int, rng) -> tuple[DenseTensor, KruskalModel]:
    """Dense tensor with ``x_i ~ Gamma(shape=1, scale=m_i)`` for a uniform(0,1) model."""
    shape = Shape.of(shape)
    _guard(shape, DENSE_GUARD)
    truth = KruskalModel(tuple(rng.random((n, rank)) for n in shape.dims))
    m = full_model(truth).values
    return DenseTensor(shape, rng.gamma(1.0, m)), truth


@dataclass(frozen=True)
class BinaryProblemSpec:
    """Parameters of a sparse binary odds-model problem.

    The first ``rank - 1`` factor columns are sparse with density ``delta``
    and entries near ``(p_high / (1 - p_high)) ** (1/d)``; the last column is
    the constant ``(p_low / (1 - p_low)) ** (1/d)`` and produces background
    noise ones with probability ``p_low``.
    """

    shape: tuple[int, ...]
    rank: int
    delta: float = 0.15
    p_high: float = 0.9
    p_low: float = 0.0025
    spread: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "shape", Shape.of(self.shape).dims)
        if self.rank < 1:
            raise ValueError("rank must be positive")
        if not 0 < self.delta < 0.5:
            raise ValueError("delta must lie in (0, 1/2)")
        if not 0 < self.p_low < self.p_high < 1:
            raise ValueError("need 0 < p_low < p_high < 1")
        if self.spread < 0:
            raise ValueError("spread must be nonnegative")


def _structural_candidates(truth: KruskalModel, sparse_cols: int) -> np.ndarray:
    """Sorted unique linear indices covered by any sparse column's support."""
    shape = truth.shape
    keys = []
    for j in range(sparse_cols):
        support = [np.flatnonzero(a[:, j]) for a in truth.factors]
        if any(len(s) == 0 for s in support):
            continue
        grids = np.meshgrid(*support, indexing="ij")
        idx = np.stack([g.ravel() for g in grids], axis=1)
        keys.append(linear_index(idx, shape))
    if not keys:
        return np.zeros(0, dtype=np.int64 if shape.fits_int64 else object)
    return np.unique(np.concatenate(keys))


def gen_binary_problem(spec: BinaryProblemSpec, rng) -> tuple[SparseTensor, KruskalModel]:
    """Sparse binary tensor whose ones follow ``P(x_i = 1) = m_i / (1 + m_i)``.

    Every index in the support of a sparse column is drawn exactly from the
    model probability. Elsewhere the model equals ``p_low / (1 - p_low)``, so
    the noise ones are placed in bulk: a binomial count, then distinct uniform
    positions outside the structural set.
    """
    shape = Shape(spec.shape)
    d, r = shape.ndim, spec.rank
    high = (spec.p_high / (1 - spec.p_high)) ** (1 / d)
    low = (spec.p_low / (1 - spec.p_low)) ** (1 / d)
    factors = []
    for n in shape.dims:
        a = np.empty((n, r))
        mask = rng.random((n, r - 1)) < spec.delta
        # an empty support would erase the component entirely
        for j in np.flatnonzero(~mask.any(axis=0)):
            mask[rng.integers(n), j] = True
        vals = np.maximum(rng.normal(high, spec.spread, size=(n, r - 1)), 0.0)
        a[:, : r - 1] = np.where(mask, vals, 0.0)
        a[:, r - 1] = low
        factors.append(a)
    truth = KruskalModel(tuple(factors))

    cand = _structural_candidates(truth, r - 1)
    if len(cand):
        m = model_entries(truth, multi_index(cand, shape))
        ones = cand[rng.random(len(cand)) < m / (1 + m)]
    else:
        ones = cand

    # every non-candidate entry has model value low**d, i.e. probability p_low
    free = shape.total - len(cand)
    n_noise = int(rng.binomial(free, spec.p_low)) if free > 0 else 0
    noise = _distinct_outside(shape, n_noise, cand, rng)
    keys = np.concatenate([ones, noise]) if len(noise) else ones
    idx = multi_index(keys, shape) if len(keys) else np.zeros((0, d), dtype=np.int64)
    return SparseTensor(shape, idx, np.ones(len(keys))), truth


def _distinct_outside(shape: Shape, n: int, excluded: np.ndarray, rng) -> np.ndarray:
    """``n`` distinct uniform linear indices not in the sorted array ``excluded``."""
    dtype = np.int64 if shape.fits_int64 else object
    got = np.zeros(0, dtype=dtype)
    while len(got) < n:
        need = n - len(got)
        idx = rng.integers(0, np.asarray(shape.dims), size=(int(need * 1.1) + 8, shape.ndim))
        keys = linear_index(idx, shape)
        if len(excluded):
            pos = np.searchsorted(excluded, keys)
            hit = np.zeros(len(keys), dtype=bool)
            inside = pos < len(excluded)
            hit[inside] = excluded[pos[inside]] == keys[inside]
            keys = keys[~hit]
        # keep first occurrences in draw order so truncation stays uniform
        merged = np.concatenate([got, keys])
        _, first = np.unique(merged, return_index=True)
        got = merged[np.sort(first)]
    return got[:n]


def _column_cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    denom = np.outer(na, nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = (a.T @ b) / denom
    return np.where(denom > 0, c, 0.0)


def cosine_similarity_score(est: KruskalModel, truth: KruskalModel) -> float:
    """Permutation-matched mean over components of the product of column cosines.

    For rank up to 8 every permutation is tried; above that, component pairs
    are matched greedily, best pair first.
    """
    if est.shape.dims != truth.shape.dims or est.rank != truth.rank:
        raise ShapeMismatchError("models differ in shape or rank")
    r = truth.rank
    sim = np.ones((r, r))
    for a_true, a_est in zip(truth.factors, est.factors):
        sim *= _column_cosines(a_true, a_est)
    if r <= _EXHAUSTIVE_MAX_RANK:
        rows = np.arange(r)
        best = max(sim[rows, list(p)].sum() for p in itertools.permutations(range(r)))
        return float(best / r)
    total, free_rows, free_cols = 0.0, set(range(r)), set(range(r))
    order = np.dstack(np.unravel_index(np.argsort(-sim, axis=None), sim.shape))[0]
    for i, j in order:
        if i in free_rows and j in free_cols:
            total += sim[i, j]
            free_rows.discard(i)
            free_cols.discard(j)
    return float(total / r)


def is_recovered(score: float) -> bool:
    return score >= RECOVERY_THRESHOLD


def binary_problem_density(x: SparseTensor) -> float:
    return x.nnz / x.shape.total if x.shape.total else math.nan
