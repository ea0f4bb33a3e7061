"""Dense/sparse representations, FLOP penalty, relevance scoring, text formats."""

import math

import numpy as np
import pytest

from retlab.autodiff import Tensor, finite_difference_check
from retlab.errors import ContractError, InputError, ParseError, ShapeError
from retlab.represent import DenseVector, SparseVector, dense_pool, flop_penalty, \
    read_dense_vectors, read_sparse_vectors, relevance_score, sparse_project, \
    write_dense_vectors, write_sparse_vectors


class TestSparseVector:
    def test_sorted_positive_invariants(self):
        with pytest.raises(InputError):
            SparseVector([3, 1], [1.0, 1.0])
        with pytest.raises(InputError):
            SparseVector([1, 1], [1.0, 1.0])
        with pytest.raises(InputError):
            SparseVector([1, 2], [1.0, 0.0])

    def test_from_dense_drops_nonpositive(self):
        vec = SparseVector.from_dense(np.array([0.0, 2.0, -1.0, 0.5]))
        assert list(vec.items()) == [(1, 2.0), (3, 0.5)]

    def test_from_dense_prune_threshold(self):
        vec = SparseVector.from_dense(np.array([5e-5, 2e-4]), min_weight=1e-4)
        assert list(vec.items()) == [(1, 2e-4)]

    def test_round_trip_dense(self):
        dense = np.array([0.0, 1.5, 0.0, 0.25])
        np.testing.assert_array_equal(SparseVector.from_dense(dense).to_dense(4), dense)


class TestDensePool:
    def test_single_column_unchanged(self):
        h = Tensor(np.array([[1.5], [-2.0]]))
        out = dense_pool(h, [True])
        np.testing.assert_array_equal(out.numpy(), [1.5, -2.0])

    def test_hand_mean(self):
        h = Tensor(np.array([[1.0, 3.0], [0.0, 2.0]]))
        out = dense_pool(h, [True, True])
        np.testing.assert_array_equal(out.numpy(), [2.0, 1.0])

    def test_padding_excluded(self):
        h = Tensor(np.array([[1.0, 9.0], [0.0, 9.0]]))
        out = dense_pool(h, [True, False])
        np.testing.assert_array_equal(out.numpy(), [1.0, 0.0])

    def test_all_padding_rejected(self):
        with pytest.raises(ContractError):
            dense_pool(Tensor(np.ones((2, 2))), [False, False])

    def test_padding_invariance(self):
        rng = np.random.default_rng(0)
        base = rng.normal(size=(3, 4))
        h1 = Tensor(base)
        h2 = Tensor(np.concatenate([base, rng.normal(size=(3, 2))], axis=1))
        out1 = dense_pool(h1, [True] * 4)
        out2 = dense_pool(h2, [True] * 4 + [False] * 2)
        np.testing.assert_array_equal(out1.numpy(), out2.numpy())


class TestSparseProject:
    def test_hand_max_then_rescale(self):
        # with E = I, E^T . H = H = [[-1, 0.5], [2, -3]] for V=2, L=2
        embedding = Tensor(np.eye(2))
        h = Tensor(np.array([[-1.0, 0.5], [2.0, -3.0]]))
        activation, vec = sparse_project(h, embedding, [True, True])
        np.testing.assert_allclose(activation.data, [math.log1p(0.5), math.log1p(2.0)],
                                   atol=1e-12)
        assert activation.data[0] == pytest.approx(0.4055, abs=1e-4)
        assert activation.data[1] == pytest.approx(1.0986, abs=1e-4)
        assert vec.nnz == 2

    def test_relu_kills_everything(self):
        embedding = Tensor(-np.ones((2, 3)))
        h = Tensor(np.ones((2, 2)))
        activation, vec = sparse_project(h, embedding, [True, True])
        np.testing.assert_array_equal(activation.data, np.zeros(3))
        assert vec.nnz == 0

    def test_padding_column_with_row_max_excluded(self):
        embedding = Tensor(np.eye(2))
        h = Tensor(np.array([[1.0, 50.0], [2.0, 50.0]]))
        activation, _ = sparse_project(h, embedding, [True, False])
        np.testing.assert_allclose(activation.data, [math.log1p(1.0), math.log1p(2.0)])

    def test_all_padding_rejected(self):
        with pytest.raises(ContractError):
            sparse_project(Tensor(np.ones((2, 2))), Tensor(np.eye(2)), [False, False])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sparse_project(Tensor(np.ones((3, 2))), Tensor(np.eye(2)), [True, True])

    def test_monotonicity(self):
        rng = np.random.default_rng(1)
        embedding = Tensor(rng.normal(size=(3, 5)))
        base = rng.normal(size=(3, 4))
        act0, _ = sparse_project(Tensor(base), embedding, [True] * 4)
        bumped = base + 0.3 * embedding.data[:, 2:3]  # raise term 2 pre-activations
        act1, _ = sparse_project(Tensor(bumped), embedding, [True] * 4)
        assert act1.data[2] >= act0.data[2]

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(2)
        embedding = Tensor(rng.normal(size=(3, 4)))
        h = Tensor(rng.normal(size=(3, 5)) + 0.5, requires_grad=True)
        mask = [True, True, True, True, False]

        def f(t):
            activation, _ = sparse_project(t, embedding, mask)
            from retlab import autodiff as ad

            return ad.sum_axis(activation, 0)

        assert finite_difference_check(f, h, 1e-5) < 1e-4


class TestFlopPenalty:
    def test_zero_batch(self):
        assert flop_penalty(Tensor(np.zeros((3, 4))), 1.0).item() == 0.0

    def test_hand_mean_then_square(self):
        batch = Tensor(np.array([[0.0, 2.0], [0.0, 4.0]]))
        assert flop_penalty(batch, 1.0).item() == pytest.approx(9.0)

    def test_lambda_zero(self):
        rng = np.random.default_rng(3)
        batch = Tensor(rng.uniform(0, 2, size=(4, 6)))
        assert flop_penalty(batch, 0.0).item() == 0.0

    def test_negative_activation_rejected(self):
        with pytest.raises(ContractError):
            flop_penalty(Tensor(np.array([[-0.1, 1.0]])), 1.0)

    def test_batch_permutation_invariance(self):
        rng = np.random.default_rng(4)
        batch = rng.uniform(0, 2, size=(5, 7))
        p1 = flop_penalty(Tensor(batch), 0.3).item()
        p2 = flop_penalty(Tensor(batch[rng.permutation(5)]), 0.3).item()
        assert p1 == pytest.approx(p2, abs=1e-12)

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(5)
        batch = Tensor(rng.uniform(0.2, 2.0, size=(3, 4)), requires_grad=True)
        assert finite_difference_check(lambda t: flop_penalty(t, 0.7), batch, 1e-5) < 1e-4


class TestRelevanceScore:
    def test_sparse_single_intersection(self):
        q = SparseVector([1, 3], [1.0, 2.0])
        d = SparseVector([3, 7], [1.5, 4.0])
        assert relevance_score(q, d) == pytest.approx(3.0)

    def test_orthogonal_supports(self):
        q = SparseVector([1], [1.0])
        d = SparseVector([2], [5.0])
        assert relevance_score(q, d) == 0.0

    def test_dense_dot(self):
        q = DenseVector(Tensor([1.0, 0.0, 2.0]))
        d = DenseVector(Tensor([3.0, 1.0, 1.0]))
        assert relevance_score(q, d).item() == pytest.approx(5.0)

    def test_mixed_kinds_rejected(self):
        with pytest.raises(ContractError):
            relevance_score(DenseVector(Tensor([1.0])), SparseVector([0], [1.0]))

    def test_sparse_score_equals_dense_expansion(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            size = int(rng.integers(4, 40))
            dense_q = np.where(rng.random(size) < 0.3, rng.uniform(0.1, 2, size), 0.0)
            dense_d = np.where(rng.random(size) < 0.3, rng.uniform(0.1, 2, size), 0.0)
            q = SparseVector.from_dense(dense_q)
            d = SparseVector.from_dense(dense_d)
            assert relevance_score(q, d) == pytest.approx(float(dense_q @ dense_d), abs=1e-12)


class TestTextFormats:
    def test_sparse_round_trip(self, tmp_path):
        items = [("docA", SparseVector([1, 5], [0.5, 1.25])),
                 ("docB", SparseVector([], []))]
        path = tmp_path / "vecs.txt"
        write_sparse_vectors(path, items)
        loaded = read_sparse_vectors(path)
        assert loaded[0][0] == "docA"
        assert list(loaded[0][1].items()) == [(1, 0.5), (5, 1.25)]
        assert loaded[1][1].nnz == 0

    def test_sparse_six_significant_digits(self, tmp_path):
        path = tmp_path / "vecs.txt"
        write_sparse_vectors(path, [("d", SparseVector([0], [1.2345678]))])
        assert path.read_text() == "d\t0:1.23457\n"

    def test_sparse_parse_error_cites_line(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("d1\t0:1.0\nd2\t5:not-a-number\n")
        with pytest.raises(ParseError, match="line 2"):
            read_sparse_vectors(path)

    def test_dense_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        items = [("a", rng.normal(size=4)), ("b", rng.normal(size=4))]
        path = tmp_path / "dense.txt"
        write_dense_vectors(path, items)
        loaded = dict(read_dense_vectors(path))
        for doc_id, values in items:
            np.testing.assert_array_equal(loaded[doc_id], values)

    def test_doc_id_with_whitespace_rejected(self, tmp_path):
        with pytest.raises(InputError):
            write_sparse_vectors(tmp_path / "x.txt", [("bad id", SparseVector([], []))])
