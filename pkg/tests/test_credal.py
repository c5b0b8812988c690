import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskguard.core import DimensionMismatch, make_prob_vector
from riskguard.credal import (BoundsBox, CredalBall, DivergenceSpec, EmptyCalibration, ExtractionRule, InconsistentBox,
                              SimplexSampler, alpha_divergence, cdci_offline, cdci_threshold, coverage_and_inefficiency_batch,
                              credal_bounds, credal_coverage_and_inefficiency, credal_membership, divergence,
                              divergence_to_centers, extract_distribution, hard_decision, intersection_probability,
                              simplex_lattice)

from conftest import prob_vectors

ORDERS = [0.0, 0.5, 1.0, 2.0, 3.0]


def pv(*p):
    return make_prob_vector(p)


def ball(center, tau, order=1.0):
    return CredalBall(pv(*center), tau, DivergenceSpec(order))


class TestDivergence:
    @pytest.mark.parametrize("order", ORDERS)
    def test_identity(self, order):
        p = pv(0.2, 0.3, 0.5)
        assert alpha_divergence(p, p, DivergenceSpec(order)) == 0.0

    def test_kl_example(self):
        assert math.isclose(alpha_divergence(pv(1, 0), pv(0.5, 0.5), DivergenceSpec(1.0)), math.log(2))

    def test_alpha_two_example(self):
        assert math.isclose(alpha_divergence(pv(0.5, 0.5), pv(0.25, 0.75), DivergenceSpec(2.0)), 1 / 6)

    def test_reverse_kl(self):
        q, p = pv(0.3, 0.7), pv(0.6, 0.4)
        assert math.isclose(alpha_divergence(q, p, DivergenceSpec(0.0)), alpha_divergence(p, q, DivergenceSpec(1.0)))

    def test_support_mismatch(self):
        assert alpha_divergence(pv(0.5, 0.5), pv(1, 0), DivergenceSpec(1.0)) == math.inf

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            alpha_divergence(pv(0.5, 0.5), pv(0.2, 0.3, 0.5), DivergenceSpec(1.0))

    @pytest.mark.parametrize("order", [0.5, 2.0, 3.0])
    def test_general_order_matches_textbook_form(self, order):
        rng = np.random.default_rng(0)
        q, p = rng.dirichlet(np.ones(4), 50), rng.dirichlet(np.ones(4), 50)
        ref = ((q**order * p ** (1 - order)).sum(axis=1) - 1) / (order * (order - 1))
        np.testing.assert_allclose(divergence(q, p, order), ref, atol=1e-12)

    @pytest.mark.parametrize("order", ORDERS)
    @settings(max_examples=40)
    @given(q=prob_vectors(3), p=prob_vectors(3))
    def test_non_negative(self, order, q, p):
        d = alpha_divergence(q, p, DivergenceSpec(order))
        assert d >= 0
        if np.max(np.abs(q - p)) > 1e-3 and math.isfinite(d):
            assert d > 1e-10

    @pytest.mark.parametrize("order", ORDERS)
    def test_center_matrix_matches_pairwise(self, order):
        rng = np.random.default_rng(1)
        pts = simplex_lattice(3, 10)
        centers = rng.dirichlet(np.ones(3), 6)
        D = divergence_to_centers(pts, centers, order)
        ref = np.array([divergence(pts, c[None, :], order) for c in centers])
        np.testing.assert_allclose(D, ref, atol=1e-10)


class TestThreshold:
    def test_rank_nine(self):
        v = np.arange(9.0)
        assert cdci_threshold(v, 0.1) == 8.0

    def test_insufficient_data(self):
        assert cdci_offline([(pv(0.5, 0.5), pv(0.4, 0.6))], DivergenceSpec(), 0.4) == math.inf

    def test_all_equal_pairs(self):
        pairs = [(pv(0.3, 0.7), pv(0.3, 0.7))] * 10
        assert cdci_offline(pairs, DivergenceSpec(), 0.1) == 0.0

    def test_empty(self):
        with pytest.raises(EmptyCalibration):
            cdci_offline([], DivergenceSpec(), 0.1)

    def test_monotone_in_level(self):
        rng = np.random.default_rng(2)
        v = rng.exponential(size=40)
        taus = [cdci_threshold(v, a) for a in (0.5, 0.3, 0.1, 0.05)]
        assert taus == sorted(taus)

    def test_infinite_scores_sort_last(self):
        assert cdci_threshold([math.inf, 0.1, 0.2, 0.3], 0.5) == 0.3


class TestMembership:
    def test_center(self):
        assert credal_membership(pv(0.2, 0.8), ball((0.2, 0.8), 0.0))

    def test_infinite_radius(self):
        assert credal_membership(pv(1, 0), ball((0, 1), math.inf))

    def test_kl_example(self):
        assert not credal_membership(pv(1, 0), ball((0.5, 0.5), 0.5))


class TestBoundsAndExtraction:
    def test_zero_radius(self):
        box = credal_bounds(ball((0.2, 0.3, 0.5), 0.0), SimplexSampler.grid(20))
        assert box.lower == box.upper == (0.2, 0.3, 0.5)

    def test_infinite_radius(self):
        box = credal_bounds(ball((0.2, 0.3, 0.5), math.inf), SimplexSampler.grid(20))
        assert box.lower == (0.0,) * 3 and box.upper == (1.0,) * 3

    def test_binary_kl_dense_scan(self):
        tau = math.log(2) - 0.01
        box = credal_bounds(ball((0.5, 0.5), tau), SimplexSampler.grid(1000))
        xs = np.linspace(0, 1, 1001)
        inside = xs[divergence(np.c_[xs, 1 - xs], np.array([0.5, 0.5]), 1.0) <= tau]
        assert 0 < box.lower[0] < 0.5 < box.upper[0] < 1
        assert math.isclose(box.lower[0], inside.min()) and math.isclose(box.upper[0], inside.max())
        assert math.isclose(box.lower[0] + box.upper[0], 1.0)

    def test_intersection_examples(self):
        q = intersection_probability(BoundsBox((0.1, 0.2, 0.3), (0.5, 0.6, 0.7)))
        np.testing.assert_allclose(q.probs, [0.7 / 3, 1 / 3, 1.3 / 3])
        assert intersection_probability(BoundsBox((0.2, 0.8), (0.2, 0.8))).probs == (0.2, 0.8)
        np.testing.assert_allclose(intersection_probability(BoundsBox((0, 0), (1, 1))).probs, [0.5, 0.5])

    def test_inconsistent_box(self):
        with pytest.raises(InconsistentBox):
            intersection_probability(BoundsBox((0.6, 0.6), (0.7, 0.7)))
        with pytest.raises(InconsistentBox):
            BoundsBox((0.5,), (0.4,))

    def test_intersection_inside_box(self):
        rng = np.random.default_rng(3)
        sampler = SimplexSampler.grid(30)
        for _ in range(30):
            c = rng.dirichlet(np.ones(3))
            box = credal_bounds(CredalBall(make_prob_vector(c), rng.exponential(0.2)), sampler)
            q = intersection_probability(box).array
            assert abs(q.sum() - 1) < 1e-12
            assert np.all(q >= np.array(box.lower) - 1e-12) and np.all(q <= np.array(box.upper) + 1e-12)

    @pytest.mark.parametrize("rule", list(ExtractionRule))
    def test_zero_radius_returns_center(self, rule):
        q = extract_distribution(ball((0.13, 0.37, 0.5), 0.0), SimplexSampler.grid(10), rule)
        np.testing.assert_allclose(q.probs, [0.13, 0.37, 0.5])

    def test_max_entropy_whole_simplex(self):
        q = extract_distribution(ball((0.1, 0.2, 0.7), math.inf), SimplexSampler.grid(30), ExtractionRule.MAX_ENTROPY)
        np.testing.assert_allclose(q.probs, [1 / 3] * 3)

    def test_ensemble_symmetric_ball(self):
        g = 40
        q = extract_distribution(ball((1 / 3, 1 / 3, 1 / 3), 0.1), SimplexSampler.grid(g), ExtractionRule.ENSEMBLE)
        np.testing.assert_allclose(q.probs, [1 / 3] * 3, atol=1 / g)

    def test_hard_decision(self):
        assert hard_decision(pv(0.2, 0.5, 0.3)) == 1
        assert hard_decision(pv(0.5, 0.5)) == 0
        assert hard_decision(pv(1, 0, 0)) == 0


class TestSampler:
    def test_lattice_is_exact(self):
        pts = simplex_lattice(3, 4)
        assert len(pts) == math.comb(6, 2)
        np.testing.assert_allclose(pts.sum(axis=1), 1.0)
        assert len({tuple(p) for p in np.round(pts * 4).astype(int)}) == len(pts)

    def test_random_points_are_distributions(self):
        pts = SimplexSampler.random(500, seed=4).points(6)
        assert pts.shape == (500, 6) and np.all(pts >= 0)
        np.testing.assert_allclose(pts.sum(axis=1), 1.0)

    def test_random_is_deterministic(self):
        np.testing.assert_array_equal(SimplexSampler.random(50, 1).points(3), SimplexSampler.random(50, 1).points(3))


class TestCoverage:
    def test_infinite_radius(self):
        pairs = [(pv(0.2, 0.8), pv(0.5, 0.5))]
        cov, ineff = credal_coverage_and_inefficiency(pairs, lambda p: CredalBall(p, math.inf), SimplexSampler.grid(10))
        assert (cov, ineff) == (1.0, 1.0)

    def test_zero_radius(self):
        pairs = [(pv(0.2, 0.8), pv(0.5, 0.5)), (pv(0.9, 0.1), pv(0.4, 0.6))]
        cov, _ = credal_coverage_and_inefficiency(pairs, lambda p: CredalBall(p, 0.0), SimplexSampler.grid(10))
        assert cov == 0.0

    def test_batch_matches_loop(self):
        rng = np.random.default_rng(5)
        ps, pe = rng.dirichlet(np.ones(3), 20), rng.dirichlet(np.ones(3), 20)
        sampler = SimplexSampler.grid(20)
        for order in (0.5, 1.0):
            spec = DivergenceSpec(order)
            pairs = [(make_prob_vector(a), make_prob_vector(b)) for a, b in zip(ps, pe)]
            a = credal_coverage_and_inefficiency(pairs, lambda p: CredalBall(p, 0.3, spec), sampler)
            b = coverage_and_inefficiency_batch(ps, pe, 0.3, spec, sampler)
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_coverage_in_band(self):
        rng = np.random.default_rng(6)
        covs = []
        for _ in range(100):
            logits = rng.normal(size=(2500, 3))
            ps = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
            le = logits + 0.4 * rng.normal(size=logits.shape)
            pe = np.exp(le) / np.exp(le).sum(axis=1, keepdims=True)
            tau = cdci_threshold(divergence(ps[:500], pe[:500], 1.0), 0.1)
            covs.append(np.mean(divergence(ps[500:], pe[500:], 1.0) <= tau))
        assert 0.87 <= np.mean(covs) <= 0.93
