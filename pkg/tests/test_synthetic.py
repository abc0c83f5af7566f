import numpy as np
import pytest

from gcpsgd import (
    BinaryProblemSpec,
    KruskalModel,
    cosine_similarity_score,
    full_model,
    gen_binary_problem,
    gen_gamma_problem,
    make_rng,
)
from gcpsgd.errors import ShapeMismatchError
from gcpsgd.synthetic import binary_problem_density


def test_gamma_mean_matches_model():
    x, truth = gen_gamma_problem((30, 20, 10, 5), 2, make_rng(0))
    m = full_model(truth).values
    # Gamma(1, m) has mean m and variance m^2
    z = (x.values - m).sum() / np.sqrt((m**2).sum())
    assert abs(z) < 4
    assert x.values.min() >= 0


def test_gamma_deterministic():
    a, ta = gen_gamma_problem((4, 3, 2), 2, make_rng(7))
    b, tb = gen_gamma_problem((4, 3, 2), 2, make_rng(7))
    assert a.values.tobytes() == b.values.tobytes()
    for fa, fb in zip(ta.factors, tb.factors):
        np.testing.assert_array_equal(fa, fb)


def test_binary_structure():
    spec = BinaryProblemSpec((20, 15, 10, 5), 3)
    x, truth = gen_binary_problem(spec, make_rng(1))
    assert set(np.unique(x.values)) <= {1.0}
    low = (spec.p_low / (1 - spec.p_low)) ** 0.25
    for a in truth.factors:
        np.testing.assert_allclose(a[:, -1], low)
        assert a.min() >= 0
        assert np.all(np.count_nonzero(a[:, :-1], axis=0) >= 1)


def test_binary_background_density():
    spec = BinaryProblemSpec((60, 50, 40), 2, delta=0.01, p_low=0.01)
    x, _ = gen_binary_problem(spec, make_rng(2))
    n = x.shape.total
    # structural positions are few; density should be close to p_low
    assert abs(binary_problem_density(x) - 0.01) < 5 * np.sqrt(0.01 / n) + 2e-3


def test_binary_fully_structural_probability():
    # a single structural index with mean-valued entries fires with probability near p_high
    spec = BinaryProblemSpec((1, 1, 1), 2, spread=0.0)
    hits = sum(gen_binary_problem(spec, make_rng(s))[0].nnz for s in range(2000))
    assert abs(hits / 2000 - 0.9) < 0.05


@pytest.mark.slow
def test_binary_full_scale_density():
    spec = BinaryProblemSpec((200, 150, 100, 50), 5)
    x, _ = gen_binary_problem(spec, make_rng(0))
    assert abs(binary_problem_density(x) - 0.0035) <= 0.0005


def test_binary_spec_validation():
    for kw in [dict(delta=0.6), dict(p_low=0.95), dict(rank=0)]:
        args = dict(shape=(3, 3), rank=2) | kw
        with pytest.raises(ValueError):
            BinaryProblemSpec(**args)


class TestScore:
    def model(self, seed=0, dims=(5, 4, 3), r=3):
        rng = np.random.default_rng(seed)
        return KruskalModel(tuple(rng.random((n, r)) for n in dims))

    def test_identical(self):
        m = self.model()
        assert cosine_similarity_score(m, m) == pytest.approx(1.0)

    def test_permutation_and_scaling_invariant(self):
        m = self.model()
        perm = [2, 0, 1]
        scaled = KruskalModel(tuple(a[:, perm] * (k + 2.0) for k, a in enumerate(m.factors)))
        assert cosine_similarity_score(scaled, m) == pytest.approx(1.0)

    def test_orthogonal_components_score_zero(self):
        e = np.eye(3)
        a = KruskalModel((e[:, :2], e[:, :2]))
        b = KruskalModel((e[:, [2, 2]], e[:, :2]))
        assert cosine_similarity_score(a, b) == pytest.approx(0.0)

    def test_zero_column(self):
        m = self.model(r=2)
        z = KruskalModel(tuple(np.column_stack([a[:, 0], np.zeros(len(a))]) for a in m.factors))
        assert 0.0 <= cosine_similarity_score(z, m) <= 0.5 + 1e-12

    def test_greedy_for_large_rank(self):
        m = self.model(dims=(12, 11, 10), r=10)
        perm = np.random.default_rng(1).permutation(10)
        p = KruskalModel(tuple(a[:, perm] for a in m.factors))
        assert cosine_similarity_score(p, m) == pytest.approx(1.0)

    def test_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            cosine_similarity_score(self.model(r=2), self.model(r=3))
