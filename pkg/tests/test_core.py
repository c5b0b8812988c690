import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskguard.core import (DimensionMismatch, Example, MultiLabelExample, NegativeEntry, RandomnessContract,
                            RiskguardError, SizeMismatch, SplitPlan, SumOutOfTolerance, check_alpha,
                            make_prob_vector, split_dataset, stream)


class TestMakeProbVector:
    def test_valid_vector_is_kept(self):
        pv = make_prob_vector([0.2, 0.3, 0.5])
        assert pv.probs == (0.2, 0.3, 0.5)
        assert len(pv) == 3 and pv[2] == 0.5

    def test_small_drift_is_renormalized(self):
        pv = make_prob_vector([0.5, 0.5000001])
        assert math.isclose(sum(pv.probs), 1.0, abs_tol=1e-15)

    def test_negative_entry(self):
        with pytest.raises(NegativeEntry):
            make_prob_vector([-0.1, 1.1])

    def test_nan_rejected(self):
        with pytest.raises(NegativeEntry):
            make_prob_vector([float("nan"), 1.0])

    def test_sum_out_of_tolerance(self):
        with pytest.raises(SumOutOfTolerance):
            make_prob_vector([0.5, 0.6])

    def test_needs_two_labels(self):
        with pytest.raises(DimensionMismatch):
            make_prob_vector([1.0])

    def test_errors_share_a_base(self):
        assert issubclass(NegativeEntry, RiskguardError)
        assert issubclass(RiskguardError, ValueError)

    @given(st.lists(st.floats(1e-6, 1.0), min_size=2, max_size=8))
    def test_reparse_is_identity(self, raw):
        total = math.fsum(raw)
        pv = make_prob_vector([v / total for v in raw])
        assert make_prob_vector(pv.probs).probs == pv.probs


class TestExamples:
    def test_size_mismatch(self):
        with pytest.raises(DimensionMismatch):
            Example(0, make_prob_vector([0.5, 0.5]), make_prob_vector([0.2, 0.3, 0.5]))

    def test_label_out_of_range(self):
        with pytest.raises(DimensionMismatch):
            Example(0, make_prob_vector([0.5, 0.5]), make_prob_vector([0.5, 0.5]), label=2)

    def test_multilabel_validation(self):
        MultiLabelExample(0, (0.1, 0.9), frozenset({1}))
        with pytest.raises(RiskguardError):
            MultiLabelExample(0, (0.1, 1.5))
        with pytest.raises(DimensionMismatch):
            MultiLabelExample(0, (0.1, 0.9), frozenset({2}))


class TestRandomness:
    def test_stream_depends_only_on_seed_and_index(self):
        a = RandomnessContract(5).stream(3).random(4)
        _ = RandomnessContract(5).stream(2).random(100)
        b = stream(5, 3).random(4)
        np.testing.assert_array_equal(a, b)

    def test_distinct_indices_differ(self):
        c = RandomnessContract(5)
        assert not np.array_equal(c.stream(0).random(4), c.stream(1).random(4))

    def test_distinct_seeds_differ(self):
        assert not np.array_equal(stream(1, 0).random(4), stream(2, 0).random(4))

    def test_large_indices_allowed(self):
        RandomnessContract(0).stream(2**63 + 5).random()


class TestSplit:
    def test_roles_partition_examples(self):
        parts = split_dataset(list(range(10)), SplitPlan({"cal": 6, "test": 4}), np.random.default_rng(0))
        assert len(parts["cal"]) == 6 and len(parts["test"]) == 4
        assert sorted(parts["cal"] + parts["test"]) == list(range(10))

    def test_deterministic(self):
        plan = SplitPlan({"a": 3, "b": 2})
        p1 = split_dataset(list("abcde"), plan, stream(1, 0))
        p2 = split_dataset(list("abcde"), plan, stream(1, 0))
        assert p1 == p2

    def test_size_mismatch(self):
        with pytest.raises(SizeMismatch):
            split_dataset([1, 2, 3], SplitPlan({"a": 2}), np.random.default_rng(0))

    def test_negative_size(self):
        with pytest.raises(SizeMismatch):
            SplitPlan({"a": -1})


@pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1, 1.5])
def test_alpha_out_of_range(alpha):
    with pytest.raises(RiskguardError):
        check_alpha(alpha)
