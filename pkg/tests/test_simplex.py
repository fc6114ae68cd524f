import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import grad_check, random_simplex
from ncmi.autodiff import DimensionError, Tensor, matmul
from ncmi.simplex import (EPS_FLOOR, CenterState, apply_center, check_simplex, cross_entropy,
                          diagnostics, ema_center_update, kl_divergence, normalize_and_scale, nsf,
                          softmax)

# D([0.25, 0.75] || [0.5, 0.5]) evaluated with 40-digit mpmath.
KL_QUARTER_VS_HALF = 0.13081203594113695913

finite_rows = arrays(np.float64, st.integers(2, 12),
                     elements=st.floats(-30, 30, allow_nan=False, allow_infinity=False))


class TestKL:
    def test_identical(self):
        assert kl_divergence([0.5, 0.5], [0.5, 0.5]) == 0.0

    def test_one_hot_vs_uniform(self):
        assert kl_divergence([1 - EPS_FLOOR, EPS_FLOOR], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-6)

    def test_extended_precision_value(self):
        assert kl_divergence([0.25, 0.75], [0.5, 0.5]) == pytest.approx(KL_QUARTER_VS_HALF, abs=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            kl_divergence([0.5, 0.5], [0.2, 0.3, 0.5])

    def test_rowwise(self, rng):
        p, q = random_simplex(rng, 5, 4), random_simplex(rng, 5, 4)
        out = kl_divergence(p, q)
        assert out.shape == (5,)
        np.testing.assert_allclose(out[2], kl_divergence(p[2], q[2]), rtol=0, atol=0)

    def test_nonnegative_and_indiscernible_on_many_pairs(self, rng):
        p = rng.dirichlet(np.ones(6), size=10_000)
        q = rng.dirichlet(np.ones(6), size=10_000)
        d = kl_divergence(p, q)
        assert np.all(d >= 0)
        assert np.all(d[np.abs(p - q).max(axis=1) > 1e-3] > 0)
        np.testing.assert_array_equal(kl_divergence(p, p), 0.0)


class TestCrossEntropy:
    def test_point_mass(self):
        assert 0 <= cross_entropy([1, 0], [1, 0]) <= -math.log(1 - EPS_FLOOR) + 1e-15

    def test_uniform_target(self, rng):
        for p in random_simplex(rng, 5, 4):
            assert cross_entropy(p, np.full(4, 0.25)) == pytest.approx(math.log(4), abs=1e-14)

    def test_minus_entropy_is_kl(self):
        p, q = [0.25, 0.75], [0.5, 0.5]
        assert cross_entropy(p, q) - cross_entropy(p, p) == pytest.approx(KL_QUARTER_VS_HALF, abs=1e-15)

    def test_decomposition_on_random_pairs(self, rng):
        p = rng.dirichlet(np.ones(8), size=10_000)
        q = rng.dirichlet(np.ones(8), size=10_000)
        gap = cross_entropy(p, q) - cross_entropy(p, p) - kl_divergence(p, q)
        assert np.abs(gap).max() < 1e-9


class TestNSF:
    def test_zero_vector(self):
        np.testing.assert_array_equal(nsf(np.zeros(4)), np.full(4, 0.25))

    @pytest.mark.parametrize("t", [-40.0, -3.0, 0.7, 25.0])
    def test_constant_is_uniform(self, t):
        np.testing.assert_allclose(nsf(np.full(5, t)), np.full(5, 0.2), atol=1e-12, rtol=0)

    def test_log3_zero(self):
        np.testing.assert_allclose(nsf([math.log(3), 0.0]), [0.6, 0.4], atol=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(finite_rows)
    def test_simplex_and_strictly_interior(self, z):
        s = nsf(z)
        assert abs(s.sum() - 1.0) < 1e-12
        assert np.all(s > 0) and np.all(s < 1)

    @settings(max_examples=200, deadline=None)
    @given(finite_rows)
    def test_entry_ratio_bounded(self, z):
        s = nsf(z)
        sig = 1.0 / (1.0 + np.exp(-z))
        assert s.max() / s.min() <= sig.max() / sig.min() * (1 + 1e-12)
        assert s.max() / s.min() <= 1.0 / sig.min() * (1 + 1e-12)

    def test_tensor_path_matches_array_path(self, rng):
        z = rng.normal(size=(4, 6))
        np.testing.assert_allclose(nsf(Tensor(z)).data, nsf(z), rtol=1e-15)

    def test_grad(self, rng):
        z = rng.normal(size=(3, 5))
        w = rng.normal(size=(3, 5))
        assert grad_check(lambda t: (nsf(t) * Tensor(w)).sum(), [z]) < 1e-6

    def test_kl_to_uniform_is_stationary_at_zero(self):
        z = Tensor(np.zeros(2), requires_grad=True)
        p = Tensor(np.array([0.5, 0.5]))
        s = nsf(z)
        (p * (p.log() - s.log())).sum().backward()
        np.testing.assert_allclose(z.grad, [0.0, 0.0], atol=1e-15)


class TestSoftmax:
    def test_zeros(self):
        np.testing.assert_array_equal(softmax([0.0, 0.0]), [0.5, 0.5])

    def test_large_equal_logits(self):
        np.testing.assert_array_equal(softmax([100.0, 100.0, 100.0]), np.full(3, 1 / 3))

    def test_logs(self):
        np.testing.assert_allclose(softmax(np.log([1.0, 2.0, 3.0])), [1 / 6, 2 / 6, 3 / 6], rtol=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(-4000, 4000), min_size=2, max_size=12), st.integers(-10**6, 10**6))
    def test_shift_invariance_bit_exact(self, ticks, c):
        # Dyadic logits and integer shifts: z + c is exact, so max-subtraction sees identical inputs.
        z = np.array(ticks, dtype=np.float64) / 8.0
        np.testing.assert_array_equal(softmax(z + c), softmax(z))

    def test_shift_invariance_integer_logits(self, rng):
        z = rng.integers(-20, 20, size=(50, 7)).astype(float)
        np.testing.assert_array_equal(softmax(z + 37.0), softmax(z))

    @settings(max_examples=100, deadline=None)
    @given(finite_rows)
    def test_rows_sum_to_one(self, z):
        assert abs(softmax(z).sum() - 1.0) < 1e-12

    def test_grad(self, rng):
        z = rng.normal(size=(3, 4))
        w = rng.normal(size=(3, 4))
        assert grad_check(lambda t: (softmax(t) * Tensor(w)).sum(), [z]) < 1e-6


class TestNormalizeAndScale:
    def test_345(self):
        np.testing.assert_allclose(normalize_and_scale(np.array([3.0, 4.0]), 1.0), [0.6, 0.8], rtol=1e-15)

    def test_345_half(self):
        np.testing.assert_allclose(normalize_and_scale(np.array([3.0, 4.0]), 0.5), [1.2, 1.6], rtol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (4, 6), elements=st.floats(-1e3, 1e3)))
    def test_norm_is_inverse_tau(self, z):
        out = normalize_and_scale(z, 0.1)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 10.0, atol=1e-12, rtol=0)

    def test_zero_row_uniform_direction_and_counted(self):
        before = diagnostics["zero_feature_rows"]
        out = normalize_and_scale(np.array([[0.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]]), 0.5)
        np.testing.assert_allclose(out[0], np.full(4, 0.5 / 0.5))
        assert diagnostics["zero_feature_rows"] == before + 1

    def test_zero_row_has_no_gradient(self):
        z = Tensor(np.array([[0.0, 0.0], [1.0, 2.0]]), requires_grad=True)
        (normalize_and_scale(z, 1.0) * Tensor(np.ones((2, 2)))).sum().backward()
        np.testing.assert_array_equal(z.grad[0], [0.0, 0.0])

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            normalize_and_scale(np.ones(3), 0.0)

    def test_grad(self, rng):
        z = rng.normal(size=(4, 5))
        w = rng.normal(size=(4, 5))
        assert grad_check(lambda t: (normalize_and_scale(t, 0.3) * Tensor(w)).sum(), [z]) < 1e-6


class TestCentering:
    def test_single_update(self):
        st_ = CenterState.zeros(1, 0.9)
        ema_center_update(st_, np.array([[1.0]]))
        np.testing.assert_allclose(st_.center, [0.1], rtol=1e-15)

    def test_converges_to_constant_mean(self):
        st_ = CenterState.zeros(1, 0.9)
        for _ in range(400):
            ema_center_update(st_, np.array([[1.0]]))
        np.testing.assert_allclose(st_.center, [1.0], atol=1e-15)
        assert st_.updates == 400

    def test_two_batch_oracle(self):
        st_ = CenterState.zeros(1, 0.5)
        ema_center_update(st_, np.array([[1.0], [3.0]]))
        np.testing.assert_array_equal(st_.center, [1.0])
        ema_center_update(st_, np.array([[4.0]]))
        np.testing.assert_array_equal(st_.center, [2.5])

    def test_apply_center(self):
        st_ = CenterState(np.array([1.0, -1.0]))
        np.testing.assert_array_equal(apply_center(np.array([[2.0, 2.0]]), st_), [[1.0, 3.0]])

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            ema_center_update(CenterState.zeros(2), np.zeros((0, 2)))

    def test_bad_momentum(self):
        with pytest.raises(ValueError):
            CenterState.zeros(2, 1.0)

    def test_update_does_not_change_parameter_gradients(self, rng):
        x = rng.normal(size=(6, 3))
        w0 = rng.normal(size=(3, 4))

        def grads(update):
            w = Tensor(w0.copy(), requires_grad=True)
            state = CenterState(np.full(4, 0.3), 0.9)
            z = apply_center(matmul(Tensor(x), w), state)
            out = normalize_and_scale(z, 0.1)
            if update:
                ema_center_update(state, z)
            nsf(out).log().sum().backward()
            return w.grad

        np.testing.assert_array_equal(grads(True), grads(False))


class TestCheckSimplex:
    def test_accepts(self, rng):
        check_simplex(random_simplex(rng, 5, 3))

    @pytest.mark.parametrize("rows", [[[0.5, 0.6]], [[-0.1, 1.1]], [[np.nan, 1.0]]])
    def test_rejects(self, rows):
        with pytest.raises(ValueError):
            check_simplex(rows)
