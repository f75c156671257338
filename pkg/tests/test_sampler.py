import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from misa.sampler import (
    SamplerConfig,
    kl_regularized_objective,
    layerwise_lifted_distribution,
    modulewise_dominance_gap,
    optimal_distribution,
    probability_lower_bound,
    scaled_sq_norm,
    update_gains,
)
from misa.verify import grid_argmax_2, grid_maximum

LN2 = math.log(2)
gains_st = st.lists(st.floats(0, 5, allow_nan=False), min_size=1, max_size=8)


class TestObjective:
    def test_uniform_zero_gains(self):
        assert kl_regularized_objective((1 / 3, 1 / 3, 1 / 3), (0, 0, 0), 1) == pytest.approx(0, abs=1e-15)

    def test_two_point_value(self):
        # (2/3)ln2 - [(1/3)ln(2/3) + (2/3)ln(4/3)] = ln(3/2), the optimum log-mean-exp
        val = kl_regularized_objective((1 / 3, 2 / 3), (0, LN2), 1)
        expected = (2 / 3) * LN2 - ((1 / 3) * math.log(2 / 3) + (2 / 3) * math.log(4 / 3))
        assert val == pytest.approx(expected, abs=1e-15)
        assert val == pytest.approx(0.4054651081081644, abs=1e-12)

    def test_two_point_value_is_grid_maximum(self):
        p = grid_argmax_2((0, LN2), 1, step=1e-4)
        assert np.allclose(p, (1 / 3, 2 / 3), atol=1e-4)

    def test_zero_probability_convention(self):
        assert kl_regularized_objective((1, 0), (5, 0), 1) == pytest.approx(5 - LN2, abs=1e-12)
        assert kl_regularized_objective((1, 0), (5, 0), 1) == pytest.approx(4.30685281944, abs=1e-10)

    @pytest.mark.parametrize("eta", [0, -1])
    def test_rejects_nonpositive_eta(self, eta):
        with pytest.raises(ValueError):
            kl_regularized_objective((0.5, 0.5), (1, 2), eta)

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError):
            kl_regularized_objective((0.5, 0.5), (1, 2, 3), 1)

    def test_rejects_non_distribution(self):
        with pytest.raises(ValueError):
            kl_regularized_objective((0.5, 0.6), (1, 2), 1)
        with pytest.raises(ValueError):
            kl_regularized_objective((1.5, -0.5), (1, 2), 1)


class TestOptimalDistribution:
    def test_eta_zero_exactly_uniform(self):
        p = optimal_distribution((1, 2, 3), 0)
        assert p.tolist() == [1 / 3, 1 / 3, 1 / 3]

    def test_softmax_values(self):
        p = optimal_distribution((1, 2, 3), 1)
        assert np.allclose(p, (0.09003057, 0.24472847, 0.66524096), atol=1e-8)

    def test_ratio_one_to_two(self):
        assert np.allclose(optimal_distribution((0, LN2), 1), (1 / 3, 2 / 3), atol=1e-15)

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_rejects_nonfinite(self, bad):
        with pytest.raises(ValueError):
            optimal_distribution((0.0, bad), 1)

    def test_extreme_temperature_stays_finite(self):
        p = optimal_distribution((0.0, 1e6, 1e6), 1e6)
        assert np.all(np.isfinite(p)) and p.sum() == pytest.approx(1)
        assert p[1] == pytest.approx(0.5)

    @given(gains_st, st.floats(0.01, 10), st.floats(-50, 50))
    def test_shift_invariance(self, gains, eta, shift):
        g = np.array(gains)
        assert np.allclose(optimal_distribution(g, eta), optimal_distribution(g + shift, eta), atol=1e-12, rtol=0)

    @given(gains_st, st.floats(0.01, 5))
    def test_valid_distribution_and_monotone(self, gains, eta):
        p = optimal_distribution(gains, eta)
        assert np.all(p > 0) and abs(p.sum() - 1) <= 1e-12
        g = np.array(gains)
        for i in range(len(g)):
            for j in range(len(g)):
                if g[i] > g[j] and eta * (g[i] - g[j]) > 1e-12:
                    assert p[i] > p[j]

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(0, 5), min_size=2, max_size=3), st.sampled_from([0.1, 0.5, 1.0]))
    def test_beats_simplex_grid(self, gains, eta):
        closed = kl_regularized_objective(optimal_distribution(gains, eta), gains, eta)
        assert closed >= grid_maximum(gains, eta, 1e-2) - 1e-9


class TestScaledNorm:
    def test_ones(self):
        assert scaled_sq_norm(np.ones((2, 2)), 4) == 1.0

    def test_vector(self):
        assert scaled_sq_norm(np.array([[3.0, 4.0, 0.0]]), 3) == pytest.approx(25 / 3)

    def test_zero(self):
        assert scaled_sq_norm(np.zeros((3, 5)), 15) == 0.0

    def test_bad_count(self):
        with pytest.raises(ValueError):
            scaled_sq_norm(np.ones((2, 2)), 0)
        with pytest.raises(ValueError):
            scaled_sq_norm(np.ones((2, 2)), 3)


class TestUpdateGains:
    cfg = SamplerConfig(ema_beta=0.9)

    def test_ema(self):
        assert update_gains([1.0], {0}, {0: 2.0}, self.cfg)[0] == pytest.approx(1.1)

    def test_unsampled_frozen(self):
        out = update_gains([1.0, 5.0], {0}, {0: 2.0}, self.cfg)
        assert out[0] == pytest.approx(1.1) and out[1] == 5.0

    @pytest.mark.parametrize("beta", [0.0, 0.5, 0.99])
    def test_fixed_point(self, beta):
        assert update_gains([3.0], {0}, {0: 3.0}, SamplerConfig(ema_beta=beta))[0] == pytest.approx(3.0)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            update_gains([1.0], {1}, {1: 2.0}, self.cfg)

    def test_clamp(self):
        out = update_gains([0.0], {0}, {0: 100.0}, SamplerConfig(gain_clamp=2.0))
        assert out[0] == 2.0

    def test_does_not_mutate_input(self):
        prev = np.array([1.0, 2.0])
        update_gains(prev, {0}, {0: 5.0}, self.cfg)
        assert prev.tolist() == [1.0, 2.0]

    @given(st.floats(0, 100), st.floats(0, 100), st.floats(0, 0.999))
    def test_convex_combination(self, prev, avg, beta):
        out = update_gains([prev], {0}, {0: avg}, SamplerConfig(ema_beta=beta))[0]
        assert min(prev, avg) - 1e-9 <= out <= max(prev, avg) + 1e-9


class TestSamplerConfig:
    @pytest.mark.parametrize("kw", [{"eta": -1}, {"eta": math.inf}, {"ema_beta": 1.0},
                                    {"ema_beta": -0.1}, {"gain_clamp": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SamplerConfig(**kw)


class TestDominance:
    def test_identical_gains_zero(self):
        assert abs(modulewise_dominance_gap([[2, 2, 2], [2, 2, 2]], 1.0)) <= 1e-12

    def test_unequal_layer_sizes_favour_modules(self):
        # even with equal gains, splitting layer mass evenly over layers of different size is not uniform
        assert modulewise_dominance_gap([[2, 2], [2, 2, 2]], 1.0) > 1e-3

    def test_one_layer_positive(self):
        gap = modulewise_dominance_gap([[1, 3]], 1.0)
        assert gap > 0
        j_mod = kl_regularized_objective(optimal_distribution([1, 3], 1), [1, 3], 1)
        j_layer = kl_regularized_objective([0.5, 0.5], [1, 3], 1)
        assert gap == pytest.approx(j_mod - j_layer, abs=1e-12)
        assert j_mod >= grid_maximum([1, 3], 1, 1e-3) - 1e-9

    def test_within_layer_equal_gains_zero(self):
        assert abs(modulewise_dominance_gap([[1, 1], [2, 2]], 0.5)) <= 1e-12

    def test_lifted_distribution_splits_layer_mass(self):
        p = layerwise_lifted_distribution([[1, 3], [0]], 1.0)
        layer = optimal_distribution([2, 0], 1.0)
        assert np.allclose(p, [layer[0] / 2, layer[0] / 2, layer[1]])

    @pytest.mark.parametrize("bad", [[], [[]], [[-1.0, 2.0]]])
    def test_errors(self, bad):
        with pytest.raises(ValueError):
            modulewise_dominance_gap(bad, 1.0)

    @given(st.lists(st.lists(st.floats(0, 5), min_size=1, max_size=5), min_size=1, max_size=5),
           st.floats(0.05, 2))
    def test_nonnegative_and_matches_direct(self, layers, eta):
        gap = modulewise_dominance_gap(layers, eta)
        flat = np.concatenate(layers)
        direct = (kl_regularized_objective(optimal_distribution(flat, eta), flat, eta)
                  - kl_regularized_objective(layerwise_lifted_distribution(layers, eta), flat, eta))
        assert gap >= -1e-12
        assert gap == pytest.approx(direct, abs=1e-9)


class TestLowerBound:
    def test_uniform(self):
        assert probability_lower_bound(4, 0, 3.0) == 0.25

    def test_two_modules(self):
        assert probability_lower_bound(2, 1, math.log(3)) == pytest.approx(1 / 6)
        assert optimal_distribution((0, math.log(3)), 1).min() == pytest.approx(0.25)

    def test_three_modules(self):
        bound = probability_lower_bound(3, 2, 1)
        assert bound == pytest.approx(0.045111761078870896)
        rng = np.random.default_rng(0)
        for _ in range(1000):
            assert optimal_distribution(rng.uniform(0, 1, 3), 2).min() >= bound

    def test_errors(self):
        with pytest.raises(ValueError):
            probability_lower_bound(0, 1, 1)
        with pytest.raises(ValueError):
            probability_lower_bound(2, 1, math.inf)

    def test_randomized(self):
        rng = np.random.default_rng(1)
        for _ in range(10_000):
            B = int(rng.integers(1, 9))
            eta = float(rng.uniform(0, 3))
            upper = float(rng.uniform(0, 4))
            gains = rng.uniform(0, upper, B)
            assert optimal_distribution(gains, eta).min() >= probability_lower_bound(B, eta, upper)
