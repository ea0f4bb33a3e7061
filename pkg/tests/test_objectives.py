"""Fine-tuning loss identities, gradients, and teacher-score sources."""

import math

import numpy as np
import pytest

from retlab import autodiff as ad
from retlab.autodiff import Tensor, finite_difference_check
from retlab.errors import ContractError, InputError, ParseError
from retlab.objectives import FileTeacher, OracleTeacher, TrainingGroup, cl_loss, \
    combined_loss, kl_div_loss, margin_mse_loss, oracle_teacher_score

LN17 = 2.833213344056216
LN_1_PLUS_E_MINUS_1 = 0.31326168751822286
KL_WORKED_EXAMPLE = 1.5231883119115297  # teacher [2,0] vs student [0,2]


def scalars(values):
    return [Tensor(float(v)) for v in values]


class TestClLoss:
    def test_seventeen_equal_scores(self):
        pos, *negs = scalars([1.3] * 17)
        assert cl_loss(pos, negs).item() == pytest.approx(LN17, abs=1e-10)

    def test_single_negative(self):
        assert cl_loss(Tensor(1.0), [Tensor(0.0)]).item() == pytest.approx(
            LN_1_PLUS_E_MINUS_1, abs=1e-12)

    def test_dominant_positive_is_finite_and_tiny(self):
        loss = cl_loss(Tensor(1000.0), scalars([0.0, -5.0]))
        assert 0.0 <= loss.item() < 1e-300 or loss.item() == 0.0
        assert math.isfinite(loss.item())

    def test_strictly_positive(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            pos = Tensor(rng.normal())
            negs = scalars(rng.normal(size=rng.integers(1, 6)))
            assert cl_loss(pos, negs).item() > 0.0

    def test_empty_negatives_rejected(self):
        with pytest.raises(ContractError):
            cl_loss(Tensor(1.0), [])

    def test_invariant_to_negative_permutation(self):
        rng = np.random.default_rng(1)
        values = rng.normal(size=5)
        pos = Tensor(0.3)
        a = cl_loss(pos, scalars(values)).item()
        b = cl_loss(pos, scalars(values[::-1])).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(2)
        packed = Tensor(rng.normal(size=4), requires_grad=True)

        def f(t):
            parts = [ad.take_per_row(ad.stack_rows([t]), [i]) for i in range(4)]
            parts = [ad.sum_axis(p, 0) for p in parts]
            return cl_loss(parts[0], parts[1:])

        assert finite_difference_check(f, packed, 1e-5) < 1e-4


class TestMarginMse:
    def test_matched_margins(self):
        assert margin_mse_loss(Tensor(2.0), Tensor(1.0), 4.0, 3.0).item() == 0.0

    def test_hand_value(self):
        # ((2-1) - (3-1))^2 = 1
        assert margin_mse_loss(Tensor(2.0), Tensor(1.0), 3.0, 1.0).item() == pytest.approx(1.0)

    def test_square_symmetry(self):
        a = margin_mse_loss(Tensor(2.0), Tensor(0.5), 3.0, 1.0).item()
        b = margin_mse_loss(Tensor(-2.0), Tensor(-0.5), -3.0, -1.0).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=2), requires_grad=True)

        def f(t):
            s_pos = ad.sum_axis(ad.take_per_row(ad.stack_rows([t]), [0]), 0)
            s_neg = ad.sum_axis(ad.take_per_row(ad.stack_rows([t]), [1]), 0)
            return margin_mse_loss(s_pos, s_neg, 1.7, -0.4)

        assert finite_difference_check(f, x, 1e-5) < 1e-4


class TestKlDivLoss:
    def test_identical_lists(self):
        student = scalars([0.5, -1.0, 2.0])
        assert kl_div_loss(student, [0.5, -1.0, 2.0]).item() == pytest.approx(0.0, abs=1e-12)

    def test_worked_example(self):
        loss = kl_div_loss(scalars([0.0, 2.0]), [2.0, 0.0])
        assert loss.item() == pytest.approx(KL_WORKED_EXAMPLE, abs=1e-3)

    def test_student_shift_invariance(self):
        teacher = [1.0, 0.0, -1.0]
        a = kl_div_loss(scalars([0.2, 0.9, -0.3]), teacher).item()
        b = kl_div_loss(scalars([5.2, 5.9, 4.7]), teacher).item()
        assert a == pytest.approx(b, abs=1e-10)

    def test_teacher_shift_invariance(self):
        student = scalars([0.2, 0.9, -0.3])
        a = kl_div_loss(student, [1.0, 0.0, -1.0]).item()
        b = kl_div_loss(student, [11.0, 10.0, 9.0]).item()
        assert a == pytest.approx(b, abs=1e-10)

    def test_non_negative(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            n = int(rng.integers(2, 7))
            loss = kl_div_loss(scalars(rng.normal(size=n)), list(rng.normal(size=n)))
            assert loss.item() >= -1e-12

    def test_length_mismatch_rejected(self):
        with pytest.raises(ContractError):
            kl_div_loss(scalars([1.0, 2.0]), [1.0, 2.0, 3.0])

    def test_gradient(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=3), requires_grad=True)
        teacher = list(rng.normal(size=3))

        def f(t):
            parts = [ad.sum_axis(ad.take_per_row(ad.stack_rows([t]), [i]), 0) for i in range(3)]
            return kl_div_loss(parts, teacher)

        assert finite_difference_check(f, x, 1e-5) < 1e-4


class TestCombinedLoss:
    def test_direct_formula(self):
        assert combined_loss(2.0, 0.0).item() == 1.0

    def test_zero_case(self):
        assert combined_loss(0.0, 0.0).item() == 0.0

    def test_sum_of_worked_examples(self):
        value = combined_loss(LN17, KL_WORKED_EXAMPLE).item()
        assert value == pytest.approx(2.1782, abs=1e-4)

    def test_gradient_flows_through_both_terms(self):
        x = Tensor(1.0, requires_grad=True)
        loss = combined_loss(ad.mul(x, x), ad.scale(x, 3.0))
        ad.backward(loss)
        assert x.grad == pytest.approx(0.5 * (2.0 + 3.0))


class TestOracleTeacher:
    def test_identical_texts(self):
        assert oracle_teacher_score("a b c", "a b c") == pytest.approx(10.0)

    def test_disjoint(self):
        assert oracle_teacher_score("a b", "c d") == 0.0

    def test_hand_value(self):
        # overlap 1 over sqrt(2*2)
        assert oracle_teacher_score("a b", "a c") == pytest.approx(5.0)

    def test_multiset_counting(self):
        assert oracle_teacher_score("a a", "a a") == pytest.approx(10.0)
        assert oracle_teacher_score("a a", "a b") == pytest.approx(10.0 / 2)

    def test_empty_text_rejected(self):
        with pytest.raises(InputError):
            oracle_teacher_score("", "a")
        with pytest.raises(InputError):
            oracle_teacher_score("a", "...")

    def test_source_wrapper_caches_and_validates(self):
        teacher = OracleTeacher({"q1": "a b"}, {"d1": "a c"}, scale=10.0)
        assert teacher.score("q1", "d1") == pytest.approx(5.0)
        with pytest.raises(InputError):
            teacher.score("q2", "d1")
        with pytest.raises(InputError):
            teacher.score("q1", "d9")


class TestFileTeacher:
    def test_round_trip_and_lookup(self, tmp_path):
        path = tmp_path / "scores.tsv"
        path.write_text("q1\td1\t3.5\nq1\td2\t-0.25\n")
        teacher = FileTeacher.load(path)
        assert teacher.score("q1", "d1") == 3.5
        assert teacher.score("q1", "d2") == -0.25

    def test_duplicate_is_load_error(self, tmp_path):
        path = tmp_path / "scores.tsv"
        path.write_text("q1\td1\t3.5\nq1\td1\t3.5\n")
        with pytest.raises(ParseError, match="duplicate"):
            FileTeacher.load(path)

    def test_uncovered_pair_is_hard_error(self, tmp_path):
        path = tmp_path / "scores.tsv"
        path.write_text("q1\td1\t3.5\n")
        with pytest.raises(InputError):
            FileTeacher.load(path).score("q1", "d2")


class TestTrainingGroup:
    def test_invariants(self):
        with pytest.raises(ContractError):
            TrainingGroup("q", "d1", ())
        with pytest.raises(ContractError):
            TrainingGroup("q", "d1", ("d1",))
        with pytest.raises(ContractError):
            TrainingGroup("q", "d1", ("d2", "d2"))
        with pytest.raises(ContractError):
            TrainingGroup("q", "d1", ("d2",), teacher_scores={"d1": 1.0})
        TrainingGroup("q", "d1", ("d2",), teacher_scores={"d1": 1.0, "d2": 0.0})
