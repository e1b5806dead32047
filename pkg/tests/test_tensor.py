"""Tensor engine tests: forward kernels, autodiff, and gradient checking."""

import math

import numpy as np
import pytest

from msgt import tensor as T
from msgt.errors import ConfigError, ContractError, ShapeError
from msgt.tensor import Tensor


def t64(data, requires_grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2, dtype=np.float32))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, b.data)

    def test_hand_computed_product(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])

    def test_batched_shape(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.standard_normal((4, 3, 5)))
        b = Tensor(rng.standard_normal((4, 5, 2)))
        assert T.matmul(a, b).shape == (4, 3, 2)

    def test_shape_mismatch_names_both_shapes(self):
        a = Tensor(np.zeros((2, 3)))
        b = Tensor(np.zeros((4, 2)))
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            T.matmul(a, b)


class TestSoftmax:
    def test_constant_input_is_uniform(self):
        for c in (0.0, 5.0, -3.25):
            y = T.softmax(Tensor([c, c, c]), axis=0)
            np.testing.assert_allclose(y.data, [1 / 3] * 3, atol=1e-7)

    def test_closed_form(self):
        y = T.softmax(t64([0.0, math.log(2.0)], requires_grad=False), axis=0)
        np.testing.assert_allclose(y.data, [1 / 3, 2 / 3], atol=1e-12)

    def test_rows_sum_to_one_even_for_huge_inputs(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((5, 7)) * 1e4)
        y = T.softmax(x, axis=1)
        assert np.all(y.data >= 0)
        np.testing.assert_allclose(y.data.sum(axis=1), np.ones(5), atol=1e-6)

    def test_axis_out_of_range(self):
        with pytest.raises(ShapeError, match="axis"):
            T.softmax(Tensor([1.0, 2.0]), axis=2)


class TestLayerNorm:
    def test_constant_token_maps_to_zero(self):
        x = Tensor(np.full((2, 4), 3.7))
        y = T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(y.data, 0.0, atol=1e-4)

    def test_two_value_token(self):
        # mean 2, population std 1
        x = t64([[1.0, 3.0]], requires_grad=False)
        y = T.layer_norm(x, t64(np.ones(2), False), t64(np.zeros(2), False), eps=1e-12)
        np.testing.assert_allclose(y.data, [[-1.0, 1.0]], atol=1e-5)

    def test_output_is_centered(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal((3, 5, 8)).astype(np.float64))
        y = T.layer_norm(x, t64(np.ones(8), False), t64(np.zeros(8), False))
        assert np.abs(y.data.mean(axis=-1)).max() < 1e-6

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((2, 5, 5, 3)))
        w = Tensor(np.eye(3).reshape(1, 1, 3, 3))
        y = T.conv2d(x, w, None, stride=1, padding=0)
        np.testing.assert_array_equal(y.data, x.data)

    def test_patch_embed_geometry(self):
        x = Tensor(np.zeros((1, 224, 224, 3), dtype=np.float32))
        w = Tensor(np.zeros((7, 7, 3, 8), dtype=np.float32))
        y = T.conv2d(x, w, None, stride=4, padding=3)
        assert y.shape == (1, 56, 56, 8)

    def test_merge_geometry(self):
        x = Tensor(np.zeros((1, 56, 56, 4), dtype=np.float32))
        w = Tensor(np.zeros((3, 3, 4, 8), dtype=np.float32))
        y = T.conv2d(x, w, None, stride=2, padding=1)
        assert y.shape == (1, 28, 28, 8)

    def test_nonpositive_output_extent(self):
        x = Tensor(np.zeros((1, 2, 2, 1), dtype=np.float32))
        w = Tensor(np.zeros((5, 5, 1, 1), dtype=np.float32))
        with pytest.raises(ConfigError):
            T.conv2d(x, w, None, stride=1, padding=0)


class TestGelu:
    def test_zero(self):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0

    def test_positive_asymptote(self):
        assert abs(T.gelu(t64([10.0], False)).item() - 10.0) < 1e-6

    def test_negative_asymptote(self):
        assert abs(T.gelu(t64([-10.0], False)).item()) < 1e-6


class TestGradCheck:
    def test_quadratic(self):
        p = t64([1.0, -2.0, 0.5])
        err = T.grad_check(lambda: T.tsum(T.power(p, 2.0)), [p])
        assert err < 1e-8

    def test_softmax_cross_entropy_matches_closed_form(self):
        # Independent oracle: d/dz of -log softmax(z)[k] is softmax(z) - onehot(k).
        logits = t64([0.3, -1.1, 2.0])
        target = 1

        def loss():
            return -T.log_softmax(logits, axis=0)[target]

        logits.zero_grad()
        loss().backward()
        z = logits.data
        probs = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
        expected = probs.copy()
        expected[target] -= 1.0
        np.testing.assert_allclose(logits.grad, expected, atol=1e-12)
        assert T.grad_check(loss, [logits]) < 1e-7

    def test_non_scalar_objective_rejected(self):
        p = t64([1.0, 2.0])
        with pytest.raises(ContractError):
            T.grad_check(lambda: T.mul(p, 2.0), [p])

    def test_requires_float64(self):
        p = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        with pytest.raises(ContractError):
            T.grad_check(lambda: T.tsum(p), [p])


def _fd_check(make_loss, params, tol=1e-6):
    err = T.grad_check(make_loss, params)
    assert err < tol, f"finite-difference mismatch: {err}"


class TestPerOpGradients:
    """Central finite differences at 64-bit on small random inputs."""

    rng = np.random.default_rng(42)

    def rand(self, *shape):
        return t64(self.rng.standard_normal(shape))

    def test_add_broadcast(self):
        a, b = self.rand(3, 4), self.rand(4)
        _fd_check(lambda: T.tsum(T.mul(T.add(a, b), T.add(a, b))), [a, b])

    def test_mul(self):
        a, b = self.rand(5), self.rand(5)
        _fd_check(lambda: T.tsum(T.mul(a, b)), [a, b])

    def test_power_exp_log(self):
        a = t64(np.abs(self.rng.standard_normal(4)) + 0.5)
        _fd_check(lambda: T.tsum(T.power(a, 3.0)), [a])
        _fd_check(lambda: T.tsum(T.texp(a)), [a])
        _fd_check(lambda: T.tsum(T.tlog(a)), [a])

    def test_mean_axis(self):
        a = self.rand(2, 3)
        _fd_check(lambda: T.tsum(T.power(T.tmean(a, axis=1), 2.0)), [a])

    def test_reshape_transpose_getitem(self):
        a = self.rand(2, 3)
        _fd_check(lambda: T.tsum(T.power(T.reshape(a, (3, 2)), 2.0)), [a])
        _fd_check(lambda: T.tsum(T.power(T.transpose(a, (1, 0)), 2.0)), [a])
        _fd_check(lambda: T.tsum(T.power(a[1:, :2], 2.0)), [a])

    def test_concat_pad(self):
        a, b = self.rand(2, 2), self.rand(1, 2)
        _fd_check(lambda: T.tsum(T.power(T.concat([a, b], axis=0), 2.0)), [a, b])
        _fd_check(lambda: T.tsum(T.power(T.pad(a, [(1, 0), (0, 2)]), 2.0)), [a])

    def test_gather_last_with_repeats(self):
        a = self.rand(6)
        idx = np.array([0, 2, 2, 5, 1])
        _fd_check(lambda: T.tsum(T.power(T.gather_last(a, idx), 2.0)), [a])

    def test_matmul(self):
        a, b = self.rand(2, 3), self.rand(3, 2)
        _fd_check(lambda: T.tsum(T.power(T.matmul(a, b), 2.0)), [a, b])

    def test_matmul_batched_against_2d_weight(self):
        a, b = self.rand(2, 2, 3), self.rand(3, 2)
        _fd_check(lambda: T.tsum(T.power(T.matmul(a, b), 2.0)), [a, b])

    def test_linear(self):
        x, w, b = self.rand(2, 2, 3), self.rand(3, 4), self.rand(4)
        _fd_check(lambda: T.tsum(T.power(T.linear(x, w, b), 2.0)), [x, w, b])

    def test_softmax(self):
        a = self.rand(2, 4)
        _fd_check(lambda: T.tsum(T.power(T.softmax(a, axis=1), 2.0)), [a])

    def test_log_softmax(self):
        a = self.rand(2, 4)
        _fd_check(lambda: T.tsum(T.power(T.log_softmax(a, axis=1), 2.0)), [a])

    def test_layer_norm(self):
        x, g, b = self.rand(2, 3, 4), self.rand(4), self.rand(4)
        _fd_check(lambda: T.tsum(T.power(T.layer_norm(x, g, b), 2.0)), [x, g, b])

    def test_gelu(self):
        a = self.rand(7)
        _fd_check(lambda: T.tsum(T.power(T.gelu(a), 2.0)), [a])

    def test_conv2d(self):
        x = self.rand(2, 4, 4, 2)
        w = self.rand(3, 3, 2, 3)
        b = self.rand(3)
        _fd_check(lambda: T.tsum(T.power(T.conv2d(x, w, b, stride=2, padding=1), 2.0)), [x, w, b])


class TestStructuralInvariants:
    def test_reshape_round_trip_is_exact(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((3, 4, 5)))
        y = T.reshape(T.reshape(x, (5, 12)), (3, 4, 5))
        np.testing.assert_array_equal(y.data, x.data)

    def test_transpose_round_trip_is_exact(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.standard_normal((2, 3, 4)))
        y = T.transpose(T.transpose(x, (2, 0, 1)), (1, 2, 0))
        np.testing.assert_array_equal(y.data, x.data)

    def test_value_multiset_preserved(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.standard_normal((4, 6)))
        y = T.transpose(T.reshape(x, (2, 12)), (1, 0))
        np.testing.assert_array_equal(np.sort(y.data.ravel()), np.sort(x.data.ravel()))

    def test_forward_determinism(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((2, 8, 8, 3)).astype(np.float32)
        w = rng.standard_normal((3, 3, 3, 4)).astype(np.float32)

        def run():
            y = T.conv2d(Tensor(x), Tensor(w), None, stride=2, padding=1)
            return T.softmax(T.reshape(y, (2, -1)), axis=1).data

        np.testing.assert_array_equal(run(), run())


class TestAutogradMechanics:
    def test_gradient_accumulates_across_uses(self):
        p = t64([2.0])
        y = T.add(T.mul(p, 3.0), T.mul(p, 4.0))
        y.backward(np.array([1.0]))
        np.testing.assert_allclose(p.grad, [7.0])

    def test_no_grad_suppresses_graph(self):
        p = t64([2.0])
        with T.no_grad():
            y = T.mul(p, 3.0)
        assert not y.requires_grad

    def test_backward_requires_scalar_without_seed(self):
        p = t64([1.0, 2.0])
        with pytest.raises(ContractError):
            T.mul(p, 2.0).backward()

    def test_mixed_dtype_rejected(self):
        a = Tensor(np.ones(2, dtype=np.float32))
        b = Tensor(np.ones(2, dtype=np.float64))
        with pytest.raises(TypeError):
            T.add(a, b)


class TestDropPath:
    def test_inactive_outside_training(self):
        x = Tensor(np.ones((4, 3), dtype=np.float32))
        assert T.drop_path(x, 0.5, None, training=False) is x
        assert T.drop_path(x, 0.0, None, training=True) is x

    def test_keeps_or_scales_whole_samples(self):
        rng = np.random.default_rng(0)
        x = Tensor(np.ones((64, 3), dtype=np.float32))
        y = T.drop_path(x, 0.25, rng, training=True).data
        per_sample = np.unique(y, axis=1)
        assert per_sample.shape[1] == 1  # each sample fully kept or fully dropped
        assert set(np.unique(y)).issubset({0.0, np.float32(1 / 0.75)})

    def test_requires_rng_in_training(self):
        with pytest.raises(ContractError):
            T.drop_path(Tensor(np.ones(2, dtype=np.float32)), 0.5, None, training=True)


class TestMacCounter:
    def test_matmul_macs(self):
        a = Tensor(np.zeros((4, 3, 5), dtype=np.float32))
        b = Tensor(np.zeros((4, 5, 2), dtype=np.float32))
        with T.count_macs() as c:
            T.matmul(a, b)
        assert c["matmul"] == 4 * 3 * 5 * 2

    def test_conv_macs(self):
        x = Tensor(np.zeros((1, 8, 8, 3), dtype=np.float32))
        w = Tensor(np.zeros((3, 3, 3, 6), dtype=np.float32))
        with T.count_macs() as c:
            T.conv2d(x, w, None, stride=2, padding=1)
        assert c["conv"] == 4 * 4 * 9 * 3 * 6
