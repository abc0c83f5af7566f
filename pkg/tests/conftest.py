import numpy as np
import pytest

from gcpsgd import KruskalModel, Shape, SparseTensor

ACCEPTANCE_LINES: list[str] = []


def random_model(rng, dims, r, positive=False):
    draw = rng.random if positive else rng.standard_normal
    return KruskalModel(tuple(draw((n, r)) for n in dims))


def random_sparse(rng, dims, nnz, values=None):
    idx = np.stack([rng.integers(0, n, nnz) for n in dims], axis=1)
    vals = rng.standard_normal(nnz) if values is None else values(nnz)
    return SparseTensor(Shape(dims), idx, vals)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
