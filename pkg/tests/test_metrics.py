import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tbcough.metrics import MetricError, auc, eer_threshold, evaluate, roc_curve

from oracles import auc_pairwise, eer_sweep

scored = st.integers(2, 40).flatmap(lambda n: st.tuples(
    st.lists(st.sampled_from([0.0, 0.1, 0.25, 0.3, 0.5, 0.7, 0.75, 0.9, 1.0]) | st.integers(0, 1000).map(lambda k: k / 1000),
             min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(lambda l: 0 < sum(l) < len(l)),
))


class TestAuc:
    def test_hand_built_ten(self):
        scores = [0.9, 0.8, 0.8, 0.7, 0.6, 0.55, 0.5, 0.4, 0.3, 0.1]
        labels = [1, 1, 0, 1, 0, 1, 0, 0, 1, 0]
        assert auc(scores, labels) == pytest.approx(auc_pairwise(scores, labels), abs=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(scored)
    def test_matches_pairwise_oracle(self, data):
        scores, labels = data
        assert auc(scores, labels) == pytest.approx(auc_pairwise(scores, labels), abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(scored)
    def test_monotone_invariance(self, data):
        scores, labels = data
        s = np.asarray(scores)
        assert auc(np.exp(3 * s) - 7, labels) == pytest.approx(auc(s, labels), abs=1e-12)

    def test_inverted(self):
        assert auc([0.9, 0.8, 0.1, 0.2], [0, 0, 1, 1]) == 0.0

    def test_single_class(self):
        with pytest.raises(MetricError):
            auc([0.1, 0.2], [1, 1])


class TestEer:
    def test_separated(self):
        gamma, eer = eer_threshold([0.1, 0.2, 0.3, 0.7, 0.8], [0, 0, 0, 1, 1])
        assert eer == 0.0
        assert 0.3 < gamma < 0.7

    def test_four_point_case(self):
        scores, labels = [0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]
        assert eer_threshold(scores, labels) == pytest.approx(eer_sweep(scores, labels), abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(scored)
    def test_matches_sweep_oracle(self, data):
        scores, labels = data
        assert eer_threshold(scores, labels) == pytest.approx(eer_sweep(scores, labels), abs=1e-12)

    def test_random_scores_half(self):
        rng = np.random.default_rng(0)
        eers = [eer_threshold(rng.uniform(size=400), rng.integers(0, 2, 400))[1] for _ in range(200)]
        assert abs(np.mean(eers) - 0.5) < 0.05

    def test_single_class(self):
        with pytest.raises(MetricError):
            eer_threshold([0.1, 0.2], [0, 0])

    @settings(max_examples=100, deadline=None)
    @given(scored)
    def test_gamma_in_unit_interval(self, data):
        gamma, eer = eer_threshold(*data)
        assert 0.0 <= gamma <= 1.0
        assert 0.0 <= eer <= 1.0


class TestEvaluate:
    def test_perfect(self):
        m = evaluate([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1], 0.5)
        assert (m.sensitivity, m.specificity, m.accuracy, m.auc) == (1.0, 1.0, 1.0, 1.0)

    def test_threshold_extremes(self):
        scores, labels = [0.0, 0.3, 0.6, 1.0, 0.2], [0, 1, 0, 1, 1]
        assert evaluate(scores, labels, 0.0).sensitivity == 1.0
        assert evaluate(scores, labels, 1.0 + 1e-9).specificity == 1.0

    @settings(max_examples=100, deadline=None)
    @given(scored, st.floats(0, 1))
    def test_counts_consistent(self, data, thr):
        m = evaluate(*data, thr)
        assert m.tp + m.fn + m.tn + m.fp == len(data[0])
        assert m.accuracy == pytest.approx((m.tp + m.tn) / len(data[0]))
        for v in (m.sensitivity, m.specificity, m.accuracy, m.auc):
            assert 0.0 <= v <= 1.0

    def test_at_threshold_counts_as_tb(self):
        m = evaluate([0.5, 0.2], [1, 0], 0.5)
        assert m.tp == 1


def test_roc_curve_endpoints():
    roc = roc_curve([0.2, 0.4, 0.6, 0.9], [0, 1, 0, 1])
    assert np.all(np.diff(roc[:, 0]) < 0)
    np.testing.assert_array_equal(roc[0, 1:], [0.0, 0.0])
    np.testing.assert_array_equal(roc[-1, 1:], [1.0, 1.0])
    assert np.trapezoid(roc[:, 2], roc[:, 1]) == pytest.approx(auc([0.2, 0.4, 0.6, 0.9], [0, 1, 0, 1]))
