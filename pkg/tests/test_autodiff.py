import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from causalpref import autodiff as ad
from causalpref.suite import OPS, finite_difference_gradient, gradient_check_once, relative_error


class TestGradients:
    @pytest.mark.parametrize("op", OPS)
    def test_op_matches_finite_differences(self, op):
        rng = np.random.default_rng(OPS.index(op))
        for _ in range(10):
            assert gradient_check_once(op, rng) < 1e-5

    @given(st.integers(0, 2**32 - 1))
    def test_random_graph_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        op = OPS[seed % len(OPS)]
        assert gradient_check_once(op, rng) < 1e-5

    def test_matmul_gradient_is_outer_product(self):
        # d sum(A @ B) / dA = 1 @ B^T
        a = ad.parameter(np.arange(6.0).reshape(2, 3))
        b = ad.parameter(np.arange(12.0).reshape(3, 4))
        g = ad.backward(ad.total(ad.matmul(a, b)))
        np.testing.assert_array_equal(g[a], np.ones((2, 4)) @ b.value.T)
        np.testing.assert_array_equal(g[b], a.value.T @ np.ones((2, 4)))

    def test_broadcast_bias_gradient_sums_rows(self):
        x = ad.constant(np.ones((5, 3)))
        bias = ad.parameter(np.zeros(3))
        g = ad.backward(ad.total(ad.add(x, bias)))
        np.testing.assert_array_equal(g[bias], np.full(3, 5.0))

    def test_shared_subexpression_accumulates(self):
        x = ad.parameter(np.array([1.5]))
        y = ad.mul(x, x)
        g = ad.backward(ad.total(ad.add(y, y)))
        assert g[x][0] == pytest.approx(4 * 1.5)

    @pytest.mark.parametrize("lam", [0.0, 0.3, 1.0, 7.0])
    def test_grad_reverse_is_negative_scaled_identity(self, lam):
        rng = np.random.default_rng(1)
        x = ad.parameter(rng.normal(size=(4, 3)))
        up = rng.normal(size=(4, 3))
        out = ad.grad_reverse(x, lam)
        np.testing.assert_array_equal(out.value, x.value)
        g = ad.backward(ad.total(ad.mul(out, up)))[x]
        np.testing.assert_array_equal(g, -lam * up)

    def test_grad_reverse_rejects_negative_lambda(self):
        with pytest.raises(ValueError):
            ad.grad_reverse(ad.parameter(np.zeros(2)), -0.1)

    def test_backward_requires_scalar(self):
        with pytest.raises(ValueError):
            ad.backward(ad.parameter(np.zeros(3)))

    def test_helpers(self):
        f = lambda xs: float(np.sum(xs[0] ** 2))  # noqa: E731
        g = finite_difference_gradient(f, [np.array([1.0, -2.0])])[0]
        np.testing.assert_allclose(g, [2.0, -4.0], rtol=1e-6)
        assert relative_error(np.ones(3), np.ones(3)) == 0.0


class TestBackward:
    def test_repeated_backward_is_identical(self):
        rng = np.random.default_rng(0)
        mlp = ad.MLP(ad.MlpSpec((4, 6, 1), seed=3))
        x = rng.normal(size=(10, 4))
        loss = ad.total(ad.log_sigmoid(ad.column(mlp(x), 0)))
        g1 = ad.backward(loss)
        g2 = ad.backward(loss)
        for p in mlp.parameters():
            np.testing.assert_array_equal(g1[p], g2[p])

    def test_constants_get_no_gradient(self):
        c = ad.constant(np.ones(3))
        p = ad.parameter(np.ones(3))
        g = ad.backward(ad.total(ad.mul(c, p)))
        assert p in g and c not in g


class TestActivations:
    @pytest.mark.parametrize("x", [-8.0, -3.0, -0.5, 0.0, 0.25, 1.0, 4.0, 9.0])
    def test_gelu_matches_mpmath(self, x):
        # exact GELU: x * Phi(x)
        exact = mpmath.mpf(x) * mpmath.ncdf(x)
        assert float(ad.gelu_array(np.array([x]))[0]) == pytest.approx(float(exact), rel=1e-14, abs=1e-300)

    @given(st.floats(-700, 700))
    def test_stable_sigmoid_bounds_and_symmetry(self, x):
        s = float(ad.stable_sigmoid(np.array([x]))[0])
        t = float(ad.stable_sigmoid(np.array([-x]))[0])
        assert 0.0 <= s <= 1.0
        assert s + t == pytest.approx(1.0, abs=1e-15)

    def test_log_sigmoid_extremes_are_finite(self):
        v = ad.stable_log_sigmoid(np.array([-1000.0, 0.0, 1000.0]))
        assert np.all(np.isfinite(v))
        assert v[0] == -1000.0 and v[1] == pytest.approx(-math.log(2)) and v[2] == 0.0

    def test_bce_with_logits_value(self):
        logits = ad.parameter(np.array([0.0, 2.0]))
        loss = ad.bce_with_logits(logits, np.array([1.0, 0.0]))
        expected = math.log(2) + math.log1p(math.exp(2.0))
        assert float(loss.value) == pytest.approx(expected)


class TestMLP:
    def test_identity_mlp_reproduces_input(self):
        spec = ad.MlpSpec((3, 3, 3), activation="identity")
        mlp = ad.MLP(spec)
        for layer in mlp.layers:
            layer.weight.value[...] = np.eye(3)
        x = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_array_equal(mlp(x).value, x)

    def test_glorot_bounds(self):
        mlp = ad.MLP(ad.MlpSpec((20, 30, 1), seed=0))
        w = mlp.layers[0].weight.value
        assert np.all(np.abs(w) <= math.sqrt(6 / 50))
        assert np.all(mlp.layers[0].bias.value == 0)

    def test_seed_determines_init(self):
        a = ad.MLP(ad.MlpSpec((4, 5, 1), seed=7))
        b = ad.MLP(ad.MlpSpec((4, 5, 1), seed=7))
        for p, q in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(p.value, q.value)

    def test_rejects_bad_input_width(self):
        with pytest.raises(ValueError):
            ad.MLP(ad.MlpSpec((4, 2)))(np.zeros((3, 5)))

    def test_rejects_bad_spec(self):
        with pytest.raises(ValueError):
            ad.MlpSpec((4,))
        with pytest.raises(ValueError):
            ad.MlpSpec((4, 0, 1))


class TestAdam:
    def test_first_step_moves_by_lr_times_sign(self):
        # bias correction makes the first update lr * g / (|g| + eps)
        p = ad.parameter(np.array([1.0, -2.0, 0.5]))
        g = np.array([0.3, -4.0, 1e-3])
        state = ad.AdamState(lr=1e-4)
        ad.adam_step(state, [p], [g])
        expected = np.array([1.0, -2.0, 0.5]) - 1e-4 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p.value, expected, rtol=0, atol=1e-15)
        assert state.step == 1

    def test_defaults(self):
        s = ad.AdamState()
        assert (s.lr, s.beta1, s.beta2, s.eps) == (1e-4, 0.9, 0.999, 1e-8)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ad.adam_step(ad.AdamState(), [ad.parameter(np.zeros(2))], [np.zeros(3)])

    def test_minimises_quadratic(self):
        p = ad.parameter(np.array([3.0]))
        state = ad.AdamState(lr=0.1)
        for _ in range(500):
            g = ad.backward(ad.total(ad.mul(p, p)))
            ad.adam_step(state, [p], [g[p]])
        assert abs(p.value[0]) < 0.05


class TestCheckpoint:
    def test_round_trip_is_bitwise(self, tmp_path):
        arrays = [np.random.default_rng(0).normal(size=(3, 4)), np.array([np.pi]), np.zeros((0,))]
        ad.save_arrays(tmp_path / "w.cplw", arrays)
        back = ad.load_arrays(tmp_path / "w.cplw")
        assert len(back) == 3
        for a, b in zip(arrays, back):
            np.testing.assert_array_equal(a, b)

    def test_bad_magic_rejected(self, tmp_path):
        (tmp_path / "x").write_bytes(b"nope")
        with pytest.raises(ValueError):
            ad.load_arrays(tmp_path / "x")
