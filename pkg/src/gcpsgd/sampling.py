"""Stochastic GCP gradients from sampled tensor entries.

Three samplers build a sparse tensor ``Y~`` with ``E[Y~] = Y``, where
``y_i = g(x_i, m_i)`` is the elementwise derivative tensor:

* uniform: ``s`` indices drawn uniformly with replacement, weight ``N/s``
  (``N`` = number of tensor entries);
* stratified: ``p`` nonzeros (weight ``eta/p``) and ``q`` rejection-sampled
  zeros (weight ``zeta/q``);
* semi-stratified: ``p`` nonzeros weighted ``eta/p`` with the correction
  ``g(x, m) - g(0, m)``, plus ``q`` unrestricted indices treated as zeros
  with weight ``N/q``.

Internally a draw is a list of indices, their data values and two weight
vectors ``(wx, w0)``; the sampled value at each index is
``wx * g(x, m) + w0 * g(0, m)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .errors import InfeasibleSampleError, ShapeMismatchError
from .losses import LossFunction
from .mttkrp import (
    _PARALLEL_MIN,
    GradientSet,
    SampledY,
    _accumulate,
    gradient_full,
    leave_one_out_products,
    mttkrp_sampled_all,
    vectorize,
)
from .tensor import (
    KruskalModel,
    Shape,
    SparseTensor,
    Tensor,
    check_compatible,
    linear_index,
    model_entries,
    model_rows,
)

SAMPLER_NAMES = ("uniform", "stratified", "semi-stratified")
DEFAULT_OVERSAMPLE = 1.1
DEFAULT_QUANTILE = 0.999999


@dataclass(frozen=True)
class SamplerKind:
    """Sampler choice and its budgets.

    ``samples`` is used by the uniform sampler; ``nonzeros`` (p) and
    ``zeros`` (q) by the stratified ones. ``oversample`` (rho) only affects
    the stratified sampler's rejection step.
    """

    name: str
    samples: int = 0
    nonzeros: int = 0
    zeros: int = 0
    oversample: float = DEFAULT_OVERSAMPLE

    def __post_init__(self):
        if self.name not in SAMPLER_NAMES:
            raise ValueError(f"unknown sampler {self.name!r}; expected one of {SAMPLER_NAMES}")
        if self.name == "uniform":
            if self.samples < 1:
                raise ValueError("uniform sampler needs at least one sample")
        elif self.nonzeros < 0 or self.zeros < 0 or self.nonzeros + self.zeros < 1:
            raise ValueError("need p >= 0, q >= 0 and p + q >= 1")
        if not self.oversample > 1:
            raise ValueError("oversample rate must exceed 1")

    @classmethod
    def from_total(cls, name: str, s: int, oversample: float = DEFAULT_OVERSAMPLE):
        """Split a total budget ``s`` as ``p = floor(s/2)``, ``q = ceil(s/2)``."""
        if name == "uniform":
            return cls(name, samples=s, oversample=oversample)
        return cls(name, nonzeros=s // 2, zeros=s - s // 2, oversample=oversample)

    @property
    def total(self) -> int:
        return self.samples if self.name == "uniform" else self.nonzeros + self.zeros


@dataclass(frozen=True, eq=False)
class _Draw:
    indices: np.ndarray
    x: np.ndarray
    wx: np.ndarray
    w0: np.ndarray


def _random_indices(shape: Shape, n: int, rng) -> np.ndarray:
    # d independent randi(n_k) draws per index
    return rng.integers(0, np.asarray(shape.dims, dtype=np.int64), size=(n, shape.ndim))


def _lookup(x: Tensor, idx: np.ndarray) -> np.ndarray:
    return x.lookup(idx) if len(idx) else np.zeros(0)


def _draw_uniform(x: Tensor, s: int, rng) -> _Draw:
    idx = _random_indices(x.shape, s, rng)
    w = np.full(s, x.shape.total / s)
    return _Draw(idx, _lookup(x, idx), w, np.zeros(s))


def _require_sparse(x) -> None:
    if not isinstance(x, SparseTensor):
        raise TypeError("stratified samplers require a sparse tensor")


def _draw_nonzeros(x: SparseTensor, p: int, rng) -> tuple[np.ndarray, np.ndarray]:
    pos = rng.integers(0, x.nnz, size=p)
    return x.indices[pos], x.values[pos]


def _split_budget(x: SparseTensor, p: int, q: int) -> tuple[int, int]:
    # an empty nonzero stratum hands its budget to the zeros
    if x.nnz == 0:
        return 0, p + q
    return p, q


def sample_zeros_rejection(
    x: SparseTensor, q: int, rho: float, rng, return_stats: bool = False
):
    """Draw ``q`` indices uniformly from the zero entries of ``x``.

    Candidates are drawn in bulk, ``ceil(rho * (N/zeta) * q)`` at a time,
    and nonzeros are rejected by binary search on the sorted linear keys.
    A shortfall triggers another bulk draw for the remainder.

    Returns an ``(q, d)`` index array, plus ``(drawn, accepted)`` counts
    when ``return_stats`` is set.
    """
    _require_sparse(x)
    shape = x.shape
    zeta = x.num_zeros
    if q > zeta:
        raise InfeasibleSampleError(f"requested {q} zeros but the tensor has only {zeta}")
    if rho <= 1:
        raise ValueError("oversample rate must exceed 1")
    ratio = shape.total / zeta if zeta else math.inf
    parts, have, drawn, accepted = [], 0, 0, 0
    while have < q:
        n = max(1, math.ceil(rho * ratio * (q - have)))
        cand = _random_indices(shape, n, rng)
        if x.nnz:
            _, found = x.find(cand)
            cand = cand[~found]
        drawn += n
        accepted += len(cand)
        parts.append(cand)
        have += len(cand)
    out = np.concatenate(parts)[:q] if parts else np.zeros((0, shape.ndim), dtype=np.int64)
    return (out, drawn, accepted) if return_stats else out


def _draw_stratified(x: SparseTensor, p: int, q: int, rho: float, rng) -> _Draw:
    _require_sparse(x)
    p, q = _split_budget(x, p, q)
    eta, zeta = x.nnz, x.num_zeros
    nz_idx, nz_x = _draw_nonzeros(x, p, rng)
    z_idx = sample_zeros_rejection(x, q, rho, rng)
    wx = np.concatenate([np.full(p, eta / p if p else 0.0), np.full(q, zeta / q if q else 0.0)])
    return _Draw(
        np.concatenate([nz_idx, z_idx]),
        np.concatenate([nz_x, np.zeros(q)]),
        wx,
        np.zeros(p + q),
    )


def _draw_semistratified(x: SparseTensor, p: int, q: int, rng) -> _Draw:
    _require_sparse(x)
    p, q = _split_budget(x, p, q)
    eta, total = x.nnz, x.shape.total
    nz_idx, nz_x = _draw_nonzeros(x, p, rng)
    z_idx = _random_indices(x.shape, q, rng)
    w_nz = eta / p if p else 0.0
    w_z = total / q if q else 0.0
    return _Draw(
        np.concatenate([nz_idx, z_idx]),
        np.concatenate([nz_x, np.zeros(q)]),
        np.concatenate([np.full(p, w_nz), np.full(q, w_z)]),
        np.concatenate([np.full(p, -w_nz), np.zeros(q)]),
    )


def _draw(sampler: SamplerKind, x: Tensor, rng) -> _Draw:
    if sampler.name == "uniform":
        return _draw_uniform(x, sampler.samples, rng)
    if sampler.name == "stratified":
        return _draw_stratified(x, sampler.nonzeros, sampler.zeros, sampler.oversample, rng)
    return _draw_semistratified(x, sampler.nonzeros, sampler.zeros, rng)


def _draw_values(draw: _Draw, m: np.ndarray, loss: LossFunction) -> np.ndarray:
    y = draw.wx * loss.grad(draw.x, m)
    corr = draw.w0 != 0
    if corr.any():
        y[corr] += draw.w0[corr] * loss.grad(0.0, m[corr])
    return y


def _to_sampled(draw: _Draw, x: Tensor, model: KruskalModel, loss: LossFunction) -> SampledY:
    check_compatible(x.shape, model)
    m = model_entries(model, draw.indices) if len(draw.indices) else np.zeros(0)
    return SampledY(x.shape, draw.indices, _draw_values(draw, m, loss))


def sample_uniform(x: Tensor, model: KruskalModel, loss: LossFunction, s: int, rng) -> SampledY:
    """Sampled gradient tensor from ``s`` uniform draws with replacement."""
    if s < 1:
        raise ValueError("s must be at least 1")
    return _to_sampled(_draw_uniform(x, s, rng), x, model, loss)


def sample_stratified(
    x: SparseTensor,
    model: KruskalModel,
    loss: LossFunction,
    p: int,
    q: int,
    rho: float = DEFAULT_OVERSAMPLE,
    rng=None,
) -> SampledY:
    """Sampled gradient tensor from ``p`` nonzeros and ``q`` true zeros."""
    return _to_sampled(_draw_stratified(x, p, q, rho, rng), x, model, loss)


def sample_semistratified(
    x: SparseTensor, model: KruskalModel, loss: LossFunction, p: int, q: int, rng=None
) -> SampledY:
    """Sampled gradient tensor from ``p`` nonzeros and ``q`` unrestricted "zeros"."""
    return _to_sampled(_draw_semistratified(x, p, q, rng), x, model, loss)


def sample(sampler: SamplerKind, x: Tensor, model: KruskalModel, loss: LossFunction, rng) -> SampledY:
    """Dispatch to the sampler named by ``sampler``."""
    return _to_sampled(_draw(sampler, x, rng), x, model, loss)


def stochastic_gradient(
    sampler: SamplerKind,
    x: Tensor,
    model: KruskalModel,
    loss: LossFunction,
    rng,
    threads: int = 1,
    deterministic: bool = True,
) -> GradientSet:
    """Stochastic gradient ``G~_k = Y~_(k) Z_k`` for every mode.

    Equivalent to ``mttkrp_sampled_all(sample(...))`` for the same random
    stream. The row products computed for the model entries are reused by
    the d MTTKRPs. Very large draws may be split across ``threads``.
    """
    check_compatible(x.shape, model)
    draw = _draw(sampler, x, rng)
    grads = [np.zeros_like(a) for a in model.factors]
    if len(draw.indices) == 0:
        return grads
    if threads > 1 and len(draw.indices) >= _PARALLEL_MIN:
        y = _draw_values(draw, model_entries(model, draw.indices), loss)
        return mttkrp_sampled_all(
            SampledY(x.shape, draw.indices, y), model, threads, deterministic
        )
    full, others = leave_one_out_products(model_rows(model, draw.indices))
    y = _draw_values(draw, full.sum(axis=1), loss)
    for k in range(model.ndim):
        _accumulate(grads[k], draw.indices[:, k], y[:, None] * others[k])
    return grads


def oversample_rate(p0: float, s0: int, quantile: float = DEFAULT_QUANTILE) -> float:
    """Oversampling factor that yields ``s0`` zeros with probability ``quantile``.

    ``p0`` is the fraction of zeros. The number of rejections before ``s0``
    zeros is negative binomial; its ``quantile`` point ``s_reject`` is found
    by summing the pmf with the recurrence
    ``pmf(k+1) = pmf(k) (k + s0) / (k + 1) (1 - p0)``, carried in log space
    so that ``p0**s0`` cannot underflow. Returns
    ``max((s0 + s_reject) p0 / s0, 1 + 1e-6)``.
    """
    if not 0 < p0 < 1:
        raise ValueError("zero fraction p0 must lie strictly between 0 and 1")
    if s0 < 1:
        raise ValueError("s0 must be at least 1")
    if not 0 < quantile < 1:
        raise ValueError("quantile must lie strictly between 0 and 1")
    s_reject = negbin_quantile(s0, p0, quantile)
    return max((s0 + s_reject) * p0 / s0, 1 + 1e-6)


def negbin_quantile(successes: int, p: float, quantile: float) -> int:
    """Smallest ``k`` with ``P(failures <= k) >= quantile``."""
    log_pmf = successes * math.log(p)
    log_fail = math.log1p(-p)
    cdf = math.exp(log_pmf)
    k = 0
    while cdf < quantile:
        log_pmf += math.log((k + successes) / (k + 1)) + log_fail
        k += 1
        cdf += math.exp(log_pmf)
    return k


@dataclass(frozen=True, eq=False)
class EstimatorSamples:
    """Fixed sample set for estimating the loss.

    Each distinct sampled index is stored once; ``weights`` fold in the
    number of times it was drawn together with ``N/s`` (uniform) or
    ``eta/p`` and ``zeta/q`` (stratified).
    """

    kind: str
    shape: Shape
    indices: np.ndarray
    x: np.ndarray
    counts: np.ndarray
    weights: np.ndarray
    nonzeros: int = 0
    zeros: int = 0

    @property
    def size(self) -> int:
        return int(self.counts.sum())


def _collapse(shape: Shape, idx: np.ndarray):
    if len(idx) == 0:
        return idx, np.zeros(0, dtype=np.int64)
    keys = linear_index(idx, shape)
    _, first, counts = np.unique(keys, return_index=True, return_counts=True)
    return idx[first], counts


def draw_estimator_samples(
    x: Tensor,
    kind: str,
    count: int,
    rng,
    oversample: float = DEFAULT_OVERSAMPLE,
    split: tuple[int, int] | None = None,
) -> EstimatorSamples:
    """Draw, once, the samples used to estimate the loss every epoch.

    ``kind`` is ``uniform`` or ``stratified``; stratified splits ``count``
    evenly between nonzeros and zeros unless ``split=(p, q)`` is given.
    """
    shape = x.shape
    empty = np.zeros((0, shape.ndim), dtype=np.int64)
    if kind == "uniform":
        idx = _random_indices(shape, count, rng) if count else empty
        uidx, counts = _collapse(shape, idx)
        w = counts * (shape.total / count) if count else np.zeros(0)
        return EstimatorSamples(kind, shape, uidx, _lookup(x, uidx), counts, w)
    if kind != "stratified":
        raise ValueError(f"unknown estimator kind {kind!r}")
    _require_sparse(x)
    p, q = split if split is not None else (count // 2, count - count // 2)
    p, q = _split_budget(x, p, q)
    if x.num_zeros == 0:
        p, q = p + q, 0
    nz_pos = rng.integers(0, x.nnz, size=p) if p else np.zeros(0, dtype=np.int64)
    upos, nz_counts = np.unique(nz_pos, return_counts=True)
    z_idx, z_counts = _collapse(shape, sample_zeros_rejection(x, q, oversample, rng) if q else empty)
    idx = np.concatenate([x.indices[upos], z_idx])
    xv = np.concatenate([x.values[upos], np.zeros(len(z_idx))])
    counts = np.concatenate([nz_counts, z_counts])
    w = np.concatenate([
        nz_counts * (x.nnz / p) if p else np.zeros(0),
        z_counts * (x.num_zeros / q) if q else np.zeros(0),
    ])
    return EstimatorSamples(kind, shape, idx, xv, counts, w, nonzeros=p, zeros=q)


def estimate_loss(
    x: Tensor, model: KruskalModel, loss: LossFunction, est: EstimatorSamples
) -> float:
    """Weighted-sample estimate of ``F = sum_i f(x_i, m_i)``; unbiased for F."""
    if est.shape.dims != x.shape.dims:
        raise ShapeMismatchError("estimator was drawn for a different tensor shape")
    check_compatible(x.shape, model)
    if len(est.indices) == 0:
        return 0.0
    m = model_entries(model, est.indices)
    return float(np.dot(est.weights, loss.value(est.x, m)))


GradientSampler = Callable[[np.random.Generator], GradientSet]


def empirical_bias_variance(
    sampler: Union[SamplerKind, GradientSampler],
    x: Tensor,
    model: KruskalModel,
    loss: LossFunction,
    n_draws: int,
    rng,
    exact: GradientSet | None = None,
) -> tuple[float, float]:
    """Empirical bias and variance of a stochastic gradient over ``n_draws`` realizations.

    With ``g`` the exact vectorized gradient and ``g~_1..g~_N`` the draws,
    returns ``(||mean - g||, (1/N) sum ||g~_xi - mean||^2)``.

    ``sampler`` is a :class:`SamplerKind` or any callable taking a generator
    and returning a gradient set.
    """
    if n_draws < 2:
        raise ValueError("need at least two realizations")
    if exact is None:
        exact = gradient_full(x, model, loss)
    g = vectorize(exact)
    if isinstance(sampler, SamplerKind):
        kind = sampler

        def sampler(r):
            return stochastic_gradient(kind, x, model, loss, r)

    mean = np.zeros_like(g)
    m2 = np.zeros_like(g)
    for n in range(1, n_draws + 1):
        v = vectorize(sampler(rng))
        delta = v - mean
        mean += delta / n
        m2 += delta * (v - mean)
    return float(np.linalg.norm(mean - g)), float(m2.sum() / n_draws)


def gradient_mean(
    sampler: SamplerKind, x: Tensor, model: KruskalModel, loss: LossFunction, n_draws: int, rng
) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate mean and standard error of ``n_draws`` vectorized stochastic gradients."""
    draws = np.stack([
        vectorize(stochastic_gradient(sampler, x, model, loss, rng)) for _ in range(n_draws)
    ])
    return draws.mean(axis=0), draws.std(axis=0, ddof=1) / math.sqrt(n_draws)
