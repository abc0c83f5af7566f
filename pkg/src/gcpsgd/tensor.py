"""Tensor and Kruskal model types, index arithmetic and norms.

Indices are zero-based and linearized first-mode-fastest, so the linear
index of ``(i_1, ..., i_d)`` is ``sum_k i_k * prod_{k' < k} n_{k'}``.
Linear indices are exact for any tensor with fewer than ``2**128`` entries:
they are stored as ``int64`` when the tensor fits, and as arrays of Python
integers otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .errors import IndexRangeError, ShapeMismatchError, SizeGuardError

MAX_ORDER = 16
DENSE_GUARD = 10**8
_INT64_LIMIT = 2**63 - 1
_LINEAR_LIMIT = 2**128


@dataclass(frozen=True)
class Shape:
    """Extents ``(n_1, ..., n_d)`` of a d-way tensor."""

    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if not 1 <= len(dims) <= MAX_ORDER:
            raise ValueError(f"tensor order must be in [1, {MAX_ORDER}], got {len(dims)}")
        if any(n < 1 for n in dims):
            raise ValueError(f"all extents must be positive, got {dims}")
        if math.prod(dims) >= _LINEAR_LIMIT:
            raise ValueError("tensor has 2**128 or more entries")
        object.__setattr__(self, "dims", dims)

    @classmethod
    def of(cls, shape: "ShapeLike") -> "Shape":
        return shape if isinstance(shape, Shape) else cls(tuple(shape))

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def total(self) -> int:
        """Number of entries as an exact Python integer."""
        return math.prod(self.dims)

    @property
    def mean_dim(self) -> float:
        return sum(self.dims) / len(self.dims)

    @property
    def strides(self) -> tuple[int, ...]:
        out, acc = [], 1
        for n in self.dims:
            out.append(acc)
            acc *= n
        return tuple(out)

    @property
    def fits_int64(self) -> bool:
        return self.total <= _INT64_LIMIT

    def __len__(self):
        return len(self.dims)

    def __iter__(self):
        return iter(self.dims)

    def __getitem__(self, k):
        return self.dims[k]


ShapeLike = Union[Shape, Sequence[int]]


def _check_coords(idx: np.ndarray, shape: Shape) -> None:
    if idx.shape[-1] != shape.ndim:
        raise IndexRangeError(f"expected {shape.ndim} coordinates, got {idx.shape[-1]}")
    if idx.size == 0:
        return
    dims = np.asarray(shape.dims, dtype=np.int64)
    bad = (idx < 0) | (idx >= dims)
    if bad.any():
        k = int(np.nonzero(bad.any(axis=tuple(range(bad.ndim - 1))))[0][0])
        raise IndexRangeError(
            f"coordinate out of range in mode {k} (extent {shape.dims[k]})"
        )


def linear_index(i, shape: ShapeLike):
    """Linear index of a multi-index, or of each row of an ``(s, d)`` array.

    A single multi-index returns a Python int. An array returns an ``int64``
    array when the tensor has fewer than ``2**63`` entries and an object
    array of Python ints otherwise.
    """
    shape = Shape.of(shape)
    idx = np.asarray(i, dtype=np.int64)
    scalar = idx.ndim == 1
    idx = np.atleast_2d(idx)
    _check_coords(idx, shape)
    if shape.fits_int64:
        lin = idx @ np.asarray(shape.strides, dtype=np.int64)
    else:
        lin = idx.astype(object) @ np.asarray(shape.strides, dtype=object)
    return int(lin[0]) if scalar else lin


def multi_index(lin, shape: ShapeLike):
    """Inverse of :func:`linear_index`.

    A scalar returns a tuple of ints; an array of length s returns an
    ``(s, d)`` ``int64`` array.
    """
    shape = Shape.of(shape)
    scalar = np.ndim(lin) == 0
    if scalar:
        lin = int(lin)
        if not 0 <= lin < shape.total:
            raise IndexRangeError(f"linear index {lin} outside [0, {shape.total})")
        out = []
        for n in shape.dims:
            lin, r = divmod(lin, n)
            out.append(r)
        return tuple(out)
    arr = np.asarray(lin, dtype=np.int64 if shape.fits_int64 else object)
    if arr.size and (arr.min() < 0 or arr.max() >= shape.total):
        raise IndexRangeError(f"linear index outside [0, {shape.total})")
    out = np.empty((arr.shape[0], shape.ndim), dtype=np.int64)
    rem = arr.copy()
    for k, n in enumerate(shape.dims):
        out[:, k] = rem % n
        rem = rem // n
    return out


def all_indices(shape: ShapeLike, start: int = 0, stop: int | None = None) -> np.ndarray:
    """Multi-indices of linear positions ``start..stop-1`` in linear order."""
    shape = Shape.of(shape)
    stop = shape.total if stop is None else stop
    _guard(shape)
    return multi_index(np.arange(start, stop, dtype=np.int64), shape)


def _guard(shape: Shape, limit: int = DENSE_GUARD) -> None:
    if shape.total > limit:
        raise SizeGuardError(
            f"tensor with {shape.total} entries exceeds the dense guard of {limit}"
        )


@dataclass(frozen=True, eq=False)
class DenseTensor:
    """Dense tensor stored as a first-mode-fastest linearized vector."""

    shape: Shape
    values: np.ndarray

    def __post_init__(self):
        shape = Shape.of(self.shape)
        values = np.ascontiguousarray(self.values, dtype=np.float64).ravel()
        if values.shape[0] != shape.total:
            raise ShapeMismatchError(
                f"{values.shape[0]} values given for shape {shape.dims}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_array(cls, array) -> "DenseTensor":
        array = np.asarray(array, dtype=np.float64)
        return cls(Shape(array.shape), array.ravel(order="F"))

    def to_array(self) -> np.ndarray:
        return self.values.reshape(self.shape.dims, order="F")

    def lookup(self, idx: np.ndarray) -> np.ndarray:
        return self.values[linear_index(idx, self.shape)]

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.values))

    def to_sparse(self) -> "SparseTensor":
        nz = np.flatnonzero(self.values)
        return SparseTensor(self.shape, multi_index(nz, self.shape), self.values[nz])


@dataclass(frozen=True, eq=False)
class SparseTensor:
    """Coordinate-format tensor with entries sorted by linear index.

    Construction sums duplicate coordinates and drops explicit zeros.

    Attributes
    ----------
    shape : Shape
    indices : ndarray of int64, shape (nnz, d)
    values : ndarray of float64, shape (nnz,)
    keys : ndarray
        Strictly increasing linear indices of the stored entries.
    """

    shape: Shape
    indices: np.ndarray
    values: np.ndarray
    keys: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        shape = Shape.of(self.shape)
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1, shape.ndim)
        vals = np.asarray(self.values, dtype=np.float64).ravel()
        if idx.shape[0] != vals.shape[0]:
            raise ShapeMismatchError("indices and values differ in length")
        keys = linear_index(idx, shape) if idx.shape[0] else _empty_keys(shape)
        if keys.shape[0]:
            uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
            if uniq.shape[0] != keys.shape[0]:
                summed = np.zeros(uniq.shape[0])
                np.add.at(summed, inverse.ravel(), vals)
                idx, vals, keys = idx[first], summed, uniq
            else:
                order = np.argsort(keys, kind="stable")
                idx, vals, keys = idx[order], vals[order], keys[order]
            keep = vals != 0
            idx, vals, keys = idx[keep], vals[keep], keys[keep]
        for a in (idx, vals, keys):
            a.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "keys", keys)

    @property
    def nnz(self) -> int:
        return int(self.values.shape[0])

    @property
    def num_zeros(self) -> int:
        return self.shape.total - self.nnz

    def find(self, idx: np.ndarray):
        """Positions of ``idx`` rows among the stored entries.

        Returns ``(pos, found)``; ``pos`` is only meaningful where ``found``.
        """
        keys = linear_index(np.atleast_2d(idx), self.shape)
        return self.find_keys(keys)

    def find_keys(self, keys: np.ndarray):
        pos = np.searchsorted(self.keys, keys)
        found = np.zeros(len(keys), dtype=bool)
        inside = pos < self.nnz
        found[inside] = self.keys[pos[inside]] == keys[inside]
        return pos, found

    def lookup(self, idx: np.ndarray) -> np.ndarray:
        """Values at each row of ``idx`` (zero where absent)."""
        pos, found = self.find(idx)
        out = np.zeros(found.shape[0])
        out[found] = self.values[pos[found]]
        return out

    def to_dense(self) -> DenseTensor:
        _guard(self.shape)
        vals = np.zeros(self.shape.total)
        vals[self.keys.astype(np.int64)] = self.values
        return DenseTensor(self.shape, vals)


def _empty_keys(shape: Shape) -> np.ndarray:
    return np.empty(0, dtype=np.int64 if shape.fits_int64 else object)


Tensor = Union[SparseTensor, DenseTensor]


@dataclass(frozen=True, eq=False)
class KruskalModel:
    """Low-rank model ``M = sum_j a_j^(1) o ... o a_j^(d)`` held as factor matrices."""

    factors: tuple[np.ndarray, ...]

    def __post_init__(self):
        factors = tuple(np.array(a, dtype=np.float64, ndmin=2) for a in self.factors)
        if not 1 <= len(factors) <= MAX_ORDER:
            raise ValueError(f"model order must be in [1, {MAX_ORDER}]")
        ranks = {a.shape[1] for a in factors}
        if len(ranks) != 1:
            raise ShapeMismatchError(f"factor matrices disagree on rank: {sorted(ranks)}")
        if not all(np.isfinite(a).all() for a in factors):
            raise ValueError("factor matrices contain non-finite entries")
        for a in factors:
            a.setflags(write=False)
        object.__setattr__(self, "factors", factors)

    @property
    def rank(self) -> int:
        return self.factors[0].shape[1]

    @property
    def ndim(self) -> int:
        return len(self.factors)

    @property
    def shape(self) -> Shape:
        return Shape(tuple(a.shape[0] for a in self.factors))

    def copy(self) -> "KruskalModel":
        return KruskalModel(tuple(a.copy() for a in self.factors))

    def __getitem__(self, k) -> np.ndarray:
        return self.factors[k]

    def __len__(self):
        return len(self.factors)


def check_compatible(shape: Shape, model: KruskalModel) -> None:
    if model.shape.dims != Shape.of(shape).dims:
        raise ShapeMismatchError(
            f"model shape {model.shape.dims} does not match tensor shape {Shape.of(shape).dims}"
        )


def model_rows(model: KruskalModel, idx: np.ndarray) -> list[np.ndarray]:
    """Rows ``A_k[i_k, :]`` for each mode, each of shape ``(s, r)``."""
    return [a[idx[:, k]] for k, a in enumerate(model.factors)]


def model_entries(model: KruskalModel, idx: np.ndarray) -> np.ndarray:
    """Vectorized :func:`model_entry` over the rows of an ``(s, d)`` index array."""
    idx = np.atleast_2d(np.asarray(idx, dtype=np.int64))
    _check_coords(idx, model.shape)
    prod = np.ones((idx.shape[0], model.rank))
    for k, a in enumerate(model.factors):
        prod *= a[idx[:, k]]
    return prod.sum(axis=1)


def model_entry(model: KruskalModel, i) -> float:
    """Single model entry ``m_i = sum_j prod_k A_k(i_k, j)``."""
    return float(model_entries(model, np.asarray(i, dtype=np.int64)[None, :])[0])


def full_model(model: KruskalModel, guard: int = DENSE_GUARD) -> DenseTensor:
    """Materialize the model as a dense tensor (small problems only)."""
    shape = model.shape
    _guard(shape, guard)
    out = np.zeros(shape.total)
    for j in range(model.rank):
        col = np.ones(1)
        for a in model.factors:
            # kron(a, col) keeps earlier modes varying fastest
            col = np.kron(a[:, j], col)
        out += col
    return DenseTensor(shape, out)


def sparse_lookup(x: SparseTensor, i) -> float:
    """Value stored at multi-index ``i``, or 0 if absent."""
    idx = np.asarray(i, dtype=np.int64)[None, :]
    return float(x.lookup(idx)[0])


def norm(x) -> float:
    """Frobenius norm of a sparse tensor, dense tensor or Kruskal model.

    The Kruskal case uses ``sqrt(1' (A_1'A_1 * ... * A_d'A_d) 1)`` and never
    forms the full tensor.
    """
    if isinstance(x, KruskalModel):
        gram = np.ones((x.rank, x.rank))
        for a in x.factors:
            gram *= a.T @ a
        return math.sqrt(max(float(gram.sum()), 0.0))
    if isinstance(x, (SparseTensor, DenseTensor)):
        return float(np.linalg.norm(x.values))
    raise TypeError(f"cannot take the norm of {type(x).__name__}")


def as_dense_values(x: Tensor) -> np.ndarray:
    """Linearized dense values of either tensor kind (guarded)."""
    return x.values if isinstance(x, DenseTensor) else x.to_dense().values
