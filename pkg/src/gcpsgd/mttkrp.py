"""MTTKRP kernels and exact GCP gradients.

Every kernel works entrywise: for a tensor entry ``(i, y_i)`` the mode-k
MTTKRP adds ``y_i * prod_{k' != k} A_{k'}(i_{k'}, :)`` to row ``i_k``. The
Khatri-Rao product is never formed, so a tensor with ``s`` stored entries
costs ``O(s r d)``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError
from .losses import LossFunction
from .tensor import (
    DENSE_GUARD,
    DenseTensor,
    KruskalModel,
    Shape,
    SparseTensor,
    Tensor,
    _guard,
    all_indices,
    check_compatible,
    full_model,
    model_rows,
)

_CHUNK = 1 << 18
_PARALLEL_MIN = 1 << 15

GradientSet = list  # list of d arrays, G_k of shape (n_k, r)


@dataclass(frozen=True, eq=False)
class SampledY:
    """Sparse stochastic gradient tensor.

    ``values`` already carry the unbiasedness weights; repeated indices are
    allowed and are summed by the MTTKRP.
    """

    shape: Shape
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        shape = Shape.of(self.shape)
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1, shape.ndim)
        vals = np.asarray(self.values, dtype=np.float64).ravel()
        if idx.shape[0] != vals.shape[0]:
            raise ShapeMismatchError("indices and values differ in length")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)

    @property
    def count(self) -> int:
        return int(self.values.shape[0])


def leave_one_out_products(rows: list[np.ndarray]) -> tuple[np.ndarray, list[np.ndarray]]:
    """Full Hadamard product of ``rows`` and, per mode, the product of all others.

    Uses prefix/suffix products so zero entries need no special care.
    """
    d = len(rows)
    prefix = [np.ones_like(rows[0])]
    for k in range(d - 1):
        prefix.append(prefix[-1] * rows[k])
    full = prefix[-1] * rows[-1]
    others = [None] * d
    suffix = np.ones_like(rows[0])
    for k in range(d - 1, -1, -1):
        others[k] = prefix[k] * suffix
        suffix = suffix * rows[k]
    return full, others


def _accumulate(target: np.ndarray, rows_idx: np.ndarray, contrib: np.ndarray) -> None:
    n = target.shape[0]
    for j in range(target.shape[1]):
        target[:, j] += np.bincount(rows_idx, weights=contrib[:, j], minlength=n)


def _mttkrp_chunk(idx, vals, model, modes, others=None):
    if others is None:
        _, others = leave_one_out_products(model_rows(model, idx))
    out = {}
    for k in modes:
        g = np.zeros_like(model.factors[k])
        _accumulate(g, idx[:, k], vals[:, None] * others[k])
        out[k] = g
    return out


def _mttkrp_entries(idx, vals, model, modes, threads=1, deterministic=True):
    """Sum the per-entry contributions, optionally across worker threads."""
    s = idx.shape[0]
    result = {k: np.zeros_like(model.factors[k]) for k in modes}
    if s == 0:
        return result
    if threads > 1 and s >= _PARALLEL_MIN:
        bounds = np.linspace(0, s, threads + 1).astype(int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(_mttkrp_chunk, idx[a:b], vals[a:b], model, modes)
                for a, b in zip(bounds[:-1], bounds[1:])
            ]
            # fixed reduction order when deterministic
            done = futures if deterministic else as_completed(futures)
            for f in done:
                for k, g in f.result().items():
                    result[k] += g
        return result
    for a in range(0, s, _CHUNK):
        for k, g in _mttkrp_chunk(idx[a:a + _CHUNK], vals[a:a + _CHUNK], model, modes).items():
            result[k] += g
    return result


def mttkrp_sampled(y: SampledY, model: KruskalModel, k: int) -> np.ndarray:
    """Mode-k MTTKRP of a sparse sampled tensor."""
    check_compatible(y.shape, model)
    _check_mode(k, model)
    return _mttkrp_entries(y.indices, y.values, model, [k])[k]


def mttkrp_sampled_all(
    y: SampledY, model: KruskalModel, threads: int = 1, deterministic: bool = True
) -> GradientSet:
    """All d MTTKRPs of a sampled tensor, sharing the per-sample row products."""
    check_compatible(y.shape, model)
    res = _mttkrp_entries(
        y.indices, y.values, model, range(model.ndim), threads, deterministic
    )
    return [res[k] for k in range(model.ndim)]


def mttkrp_dense(y: DenseTensor, model: KruskalModel, k: int) -> np.ndarray:
    """Mode-k MTTKRP ``Y_(k) Z_k`` of a dense tensor, accumulated entrywise."""
    return mttkrp_dense_all(y, model, modes=[k])[0]


def mttkrp_dense_all(y: DenseTensor, model: KruskalModel, modes=None) -> GradientSet:
    check_compatible(y.shape, model)
    modes = list(range(model.ndim)) if modes is None else modes
    for k in modes:
        _check_mode(k, model)
    result = {k: np.zeros_like(model.factors[k]) for k in modes}
    total = y.shape.total
    for a in range(0, total, _CHUNK):
        b = min(a + _CHUNK, total)
        idx = all_indices(y.shape, a, b)
        for k, g in _mttkrp_chunk(idx, y.values[a:b], model, modes).items():
            result[k] += g
    return [result[k] for k in modes]


def _check_mode(k: int, model: KruskalModel) -> None:
    if not 0 <= k < model.ndim:
        raise ValueError(f"mode {k} out of range for a {model.ndim}-way model")


def _dense_model_and_data(x: Tensor, model: KruskalModel):
    check_compatible(x.shape, model)
    _guard(x.shape, DENSE_GUARD)
    m = full_model(model).values
    if isinstance(x, DenseTensor):
        xv = x.values
    else:
        # oracle path: look every dense index up in the nonzero list
        xv = x.lookup(all_indices(x.shape))
    return xv, m


def objective(x: Tensor, model: KruskalModel, loss: LossFunction) -> float:
    """Exact ``F = sum_i f(x_i, m_i)`` over every entry (small problems only)."""
    xv, m = _dense_model_and_data(x, model)
    return float(np.sum(loss.value(xv, m)))


def gradient_full(x: Tensor, model: KruskalModel, loss: LossFunction) -> GradientSet:
    """Exact gradient through the dense elementwise derivative tensor.

    Intended as a ground-truth oracle for the stochastic gradients.
    """
    xv, m = _dense_model_and_data(x, model)
    y = DenseTensor(x.shape, loss.grad(xv, m))
    return mttkrp_dense_all(y, model)


def gradient_poisson_implicit(
    x: SparseTensor, model: KruskalModel, loss: LossFunction | None = None
) -> GradientSet:
    """Exact Poisson gradient without forming a dense tensor.

    ``G_k = 1_(k) Z_k - V_(k) Z_k`` where ``v_i = x_i / m_i`` on the nonzeros.
    The first term reduces to products of column sums of the other factors.
    """
    if loss is not None and loss.kind != "poisson":
        raise ValueError(f"implicit gradient is only valid for poisson loss, not {loss.kind}")
    if not isinstance(x, SparseTensor):
        raise TypeError("implicit Poisson gradient requires a sparse tensor")
    check_compatible(x.shape, model)
    eps = loss.eps if loss is not None else LossFunction("poisson").eps
    colsums = [a.sum(axis=0) for a in model.factors]
    full, others = leave_one_out_products(model_rows(model, x.indices))
    v = x.values / (full.sum(axis=1) + eps)
    grads = []
    for k in range(model.ndim):
        ones_term = np.prod([c for kk, c in enumerate(colsums) if kk != k], axis=0)
        g = np.broadcast_to(ones_term, model.factors[k].shape).copy()
        _accumulate(g, x.indices[:, k], -v[:, None] * others[k])
        grads.append(g)
    return grads


def vectorize(grads: GradientSet) -> np.ndarray:
    """Stack ``[vec(G_1); ...; vec(G_d)]`` column-major."""
    return np.concatenate([np.asarray(g).ravel(order="F") for g in grads])
