import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedstale import (FirstOrderParams, WeightingParams, asyn_tiers_combine,
                      first_order_compensate, staleness_weight, w_pred_compensate)

vec = st.lists(st.floats(-1, 1), min_size=3, max_size=3).map(np.array)


class TestStalenessWeight:
    def test_tau_equals_b_gives_half(self):
        assert staleness_weight(10.0, WeightingParams(a=0.25, b=10)) == pytest.approx(0.5)

    def test_large_tau_vanishes(self):
        assert staleness_weight(110.0, WeightingParams(a=0.25, b=10)) < 1e-10

    def test_tau_zero_closed_form(self):
        # independent arithmetic: 1 / (1 + e^{0.25 * (0 - 10)})
        expected = 1.0 / (1.0 + math.exp(-2.5))
        assert staleness_weight(0.0) == pytest.approx(expected, rel=1e-12)

    @given(st.floats(0, 500), st.floats(0, 500))
    def test_strictly_decreasing_and_bounded(self, t1, t2):
        w1, w2 = staleness_weight(t1), staleness_weight(t2)
        assert 0.0 < w1 < 1.0
        if t1 < t2:
            assert w1 >= w2
        if t1 + 1e-6 < t2:  # strict once the gap is float-representable
            assert w1 > w2


class TestFirstOrderCompensate:
    def test_identity_when_no_displacement(self):
        rng = np.random.default_rng(0)
        g = rng.normal(size=8)
        w = rng.normal(size=8)
        out = first_order_compensate(g, w, w.copy())
        assert np.array_equal(out, g)

    def test_identity_when_lambda_zero(self):
        rng = np.random.default_rng(1)
        g, wn, wb = rng.normal(size=(3, 8))
        out = first_order_compensate(g, wn, wb, FirstOrderParams(lam=0.0))
        assert np.array_equal(out, g)

    def test_scalar_quadratic_exact_compensation(self):
        # L(w) = w^2/2 has gradient w and Hessian 1; with lam * g^2 == 1 the
        # compensated stale gradient must equal the true gradient w_now
        w_base, w_now = np.array([2.0]), np.array([5.0])
        g = w_base.copy()  # gradient of the quadratic at the base point
        lam = 1.0 / g[0] ** 2
        out = first_order_compensate(g, w_now, w_base, FirstOrderParams(lam=lam))
        assert out[0] == pytest.approx(w_now[0], rel=1e-12)

    @given(vec, vec, vec)
    def test_elementwise_formula(self, g, wn, wb):
        lam = 0.3
        out = first_order_compensate(g, wn, wb, FirstOrderParams(lam=lam))
        assert np.allclose(out, g + lam * g * g * (wn - wb), atol=1e-15)


class TestWPredCompensate:
    def test_stationary_history_matches_first_order(self):
        rng = np.random.default_rng(2)
        w = rng.normal(size=6)
        history = [w.copy() for _ in range(8)]
        g = rng.normal(size=6)
        out = w_pred_compensate(g, history, tau_assumed=4)
        ref = first_order_compensate(g, history[-1], history[3])
        assert np.allclose(out, ref, atol=1e-15)

    def test_tau_zero_is_identity(self):
        rng = np.random.default_rng(3)
        history = [rng.normal(size=5) for _ in range(3)]
        g = rng.normal(size=5)
        assert np.array_equal(w_pred_compensate(g, history, 0), g)

    def test_constant_drift_linear_extrapolation(self):
        # hand-computed oracle: with per-epoch drift d the predicted weights
        # are w_base + tau * d, so the correction term uses exactly tau * d
        d = np.array([0.1, -0.2, 0.05])
        w0 = np.array([1.0, 1.0, 1.0])
        history = [w0 + k * d for k in range(9)]
        tau = 6
        g = np.array([0.4, -0.3, 0.2])
        lam = 0.3
        w_base = history[-1 - tau]
        expected = g + lam * g * g * (tau * d)
        out = w_pred_compensate(g, history, tau, FirstOrderParams(lam=lam))
        assert np.allclose(out, expected, atol=1e-12)

    def test_insufficient_history_falls_back(self):
        g = np.array([1.0, 2.0])
        history = [np.zeros(2)]
        out = w_pred_compensate(g, history, tau_assumed=3)
        assert np.array_equal(out, g)  # base==latest means identity


class TestAsynTiers:
    def test_single_tier_equals_its_aggregate(self):
        agg = np.array([0.5, -1.0])
        assert np.array_equal(asyn_tiers_combine([(agg, 7)]), agg)

    def test_nine_one_weighting(self):
        a, b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        out = asyn_tiers_combine([(a, 9), (b, 1)])
        assert np.allclose(out, (9 * a + b) / 10, atol=1e-15)

    def test_matches_brute_force_two_stage_mean(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            a, b = rng.normal(size=(2, 5))
            na, nb = int(rng.integers(1, 20)), int(rng.integers(1, 20))
            out = asyn_tiers_combine([(a, na), (b, nb)])
            brute = (na * a + nb * b) / (na + nb)
            assert np.allclose(out, brute, atol=1e-14)

    def test_empty_tier_list_rejected(self):
        with pytest.raises(ValueError):
            asyn_tiers_combine([])
