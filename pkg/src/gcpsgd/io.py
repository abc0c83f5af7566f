"""Readers and writers for tensors, models and fit traces.

Text floats are written with 17 significant digits, which round-trips every
64-bit float exactly.

Formats
-------
``.tns``
    One nonzero per line: d one-based indices then the value. An optional
    ``#shape: n1 ... nd`` header fixes the shape; otherwise it is inferred
    from the per-mode maxima. Other ``#`` lines are comments.
model
    ``#kruskal``, then a ``d r`` line and an ``n1 ... nd`` line, then each
    factor matrix row by row.
dense text
    ``#shape: n1 ... nd`` then one value per line, first mode fastest.
dense binary
    Raw little-endian float64 values, first mode fastest, with the shape in
    a sidecar text file ``<path>.shape``.
trace CSV
    Columns ``epoch,loss_estimate,learning_rate,seconds,accepted``.
"""

from __future__ import annotations

import csv
import os
from pathlib import Path

import numpy as np

from .errors import GCPError
from .optimizer import EpochRecord, FitTrace
from .tensor import DenseTensor, KruskalModel, Shape, SparseTensor

FLOAT_FMT = "%.17g"
TRACE_COLUMNS = ("epoch", "loss_estimate", "learning_rate", "seconds", "accepted")


class FormatError(GCPError, ValueError):
    """A file does not follow the expected format."""


def _fmt(v: float) -> str:
    return FLOAT_FMT % v


def _parse_shape_header(line: str, path, lineno: int) -> tuple[int, ...]:
    body = line.split(":", 1)[1] if ":" in line else line[len("#shape"):]
    try:
        dims = tuple(int(t) for t in body.split())
        return Shape(dims).dims
    except ValueError as exc:
        raise FormatError(f"{path}:{lineno}: bad shape header: {exc}") from None


def read_tns(path) -> SparseTensor:
    """Read a coordinate-format ``.tns`` file into a zero-based sparse tensor."""
    path = Path(path)
    shape = None
    idx_rows, vals = [], []
    d = None
    try:
        fh = open(path)
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                if s.lower().startswith("#shape"):
                    shape = _parse_shape_header(s, path, lineno)
                    if d is not None and len(shape) != d:
                        raise FormatError(f"{path}:{lineno}: shape header has wrong order")
                    d = len(shape)
                continue
            tok = s.split()
            if d is None:
                d = len(tok) - 1
                if d < 1:
                    raise FormatError(f"{path}:{lineno}: expected indices and a value")
            if len(tok) != d + 1:
                raise FormatError(f"{path}:{lineno}: expected {d + 1} fields, got {len(tok)}")
            try:
                ii = [int(t) for t in tok[:d]]
                v = float(tok[d])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: malformed entry {s!r}") from None
            if min(ii) < 1:
                raise FormatError(f"{path}:{lineno}: indices are one-based")
            if shape is not None and any(i > n for i, n in zip(ii, shape)):
                raise FormatError(f"{path}:{lineno}: index exceeds declared shape {shape}")
            idx_rows.append(ii)
            vals.append(v)
    if d is None:
        raise FormatError(f"{path}: no entries and no shape header")
    idx = np.array(idx_rows, dtype=np.int64).reshape(-1, d) - 1
    if shape is None:
        shape = tuple(int(c) for c in idx.max(axis=0) + 1)
    return SparseTensor(Shape(shape), idx, np.array(vals, dtype=np.float64))


def write_tns(x: SparseTensor, path) -> None:
    """Write ``x`` as a one-based ``.tns`` file with a shape header."""
    with _open_w(path) as fh:
        fh.write("#shape: " + " ".join(str(n) for n in x.shape.dims) + "\n")
        for row, v in zip(x.indices + 1, x.values):
            fh.write(" ".join(str(int(i)) for i in row) + " " + _fmt(v) + "\n")


def _open_w(path):
    try:
        return open(path, "w", newline="")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def write_model(model: KruskalModel, path) -> None:
    with _open_w(path) as fh:
        fh.write("#kruskal\n")
        fh.write(f"{model.ndim} {model.rank}\n")
        fh.write(" ".join(str(n) for n in model.shape.dims) + "\n")
        for a in model.factors:
            for row in a:
                fh.write(" ".join(_fmt(v) for v in row) + "\n")


def read_model(path) -> KruskalModel:
    path = Path(path)
    with open(path) as fh:
        lines = [ln for ln in (s.strip() for s in fh) if ln and not ln.startswith("#")]
    try:
        d, r = (int(t) for t in lines[0].split())
        dims = [int(t) for t in lines[1].split()]
    except (IndexError, ValueError):
        raise FormatError(f"{path}: bad model header") from None
    if len(dims) != d:
        raise FormatError(f"{path}: header declares {d} modes but lists {len(dims)} extents")
    body = lines[2:]
    if len(body) != sum(dims):
        raise FormatError(f"{path}: expected {sum(dims)} factor rows, found {len(body)}")
    factors, pos = [], 0
    for n in dims:
        try:
            a = np.array([[float(t) for t in ln.split()] for ln in body[pos:pos + n]])
        except ValueError:
            raise FormatError(f"{path}: malformed factor row") from None
        if a.shape != (n, r):
            raise FormatError(f"{path}: factor row has wrong length")
        factors.append(a)
        pos += n
    return KruskalModel(tuple(factors))


def write_dense_text(x: DenseTensor, path) -> None:
    with _open_w(path) as fh:
        fh.write("#shape: " + " ".join(str(n) for n in x.shape.dims) + "\n")
        for v in x.values:
            fh.write(_fmt(v) + "\n")


def read_dense_text(path) -> DenseTensor:
    path = Path(path)
    shape, vals = None, []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                if s.lower().startswith("#shape"):
                    shape = _parse_shape_header(s, path, lineno)
                continue
            try:
                vals.append(float(s))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: malformed value {s!r}") from None
    if shape is None:
        raise FormatError(f"{path}: missing #shape header")
    if len(vals) != Shape(shape).total:
        raise FormatError(f"{path}: {len(vals)} values for shape {shape}")
    return DenseTensor(Shape(shape), np.array(vals))


def _sidecar(path) -> str:
    return os.fspath(path) + ".shape"


def write_dense_binary(x: DenseTensor, path) -> None:
    x.values.astype("<f8").tofile(os.fspath(path))
    with _open_w(_sidecar(path)) as fh:
        fh.write(" ".join(str(n) for n in x.shape.dims) + "\n")


def read_dense_binary(path) -> DenseTensor:
    with open(_sidecar(path)) as fh:
        dims = tuple(int(t) for t in fh.read().split())
    vals = np.fromfile(os.fspath(path), dtype="<f8")
    shape = Shape(dims)
    if vals.shape[0] != shape.total:
        raise FormatError(f"{path}: {vals.shape[0]} values for shape {dims}")
    return DenseTensor(shape, vals.astype(np.float64))


def read_tensor(path):
    """Read a tensor, choosing the format by extension.

    ``.tns`` is sparse, ``.bin`` is dense binary, anything else dense text.
    """
    suffix = Path(path).suffix.lower()
    if suffix == ".tns":
        return read_tns(path)
    if suffix == ".bin":
        return read_dense_binary(path)
    return read_dense_text(path)


def write_tensor(x, path) -> None:
    suffix = Path(path).suffix.lower()
    if isinstance(x, SparseTensor):
        if suffix != ".tns":
            x = x.to_dense()
        else:
            return write_tns(x, path)
    if suffix == ".tns":
        return write_tns(x.to_sparse(), path)
    if suffix == ".bin":
        return write_dense_binary(x, path)
    return write_dense_text(x, path)


def write_trace_csv(trace: FitTrace, path) -> None:
    with _open_w(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for rec in trace:
            w.writerow([
                rec.epoch, _fmt(rec.loss_estimate), _fmt(rec.learning_rate),
                _fmt(rec.seconds), int(rec.accepted),
            ])


def read_trace_csv(path) -> FitTrace:
    trace = FitTrace()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
            raise FormatError(f"{path}: unexpected trace columns {reader.fieldnames}")
        for row in reader:
            trace.append(EpochRecord(
                int(row["epoch"]), float(row["loss_estimate"]), float(row["learning_rate"]),
                float(row["seconds"]), bool(int(row["accepted"])),
            ))
    return trace
