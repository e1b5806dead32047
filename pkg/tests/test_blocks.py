"""Messenger-token block tests: attachment, bias indexing, local attention,
shuffle/average/shift manipulation, and the composed block."""

import numpy as np
import pytest

from msgt import blocks as B
from msgt import tensor as T
from msgt import windows as W
from msgt.analysis import information_reach
from msgt.errors import ConfigError, ShapeError
from msgt.model import make_block_params
from msgt.tensor import Tensor


def make_windows(b, gh, gw, window_size, c, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((b, gh, gw, window_size**2, c)).astype(dtype)
    return W.WindowedTokens(windows=Tensor(data), window_size=window_size)


def make_msg(b, gh, gw, c, seed=1, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return W.MsgTokens(grid=Tensor(rng.standard_normal((b, gh, gw, c)).astype(dtype)))


class TestAttachDetach:
    def test_attach_shapes(self):
        wt = make_windows(1, 8, 8, 7, 4)
        out = B.attach_msg(wt, make_msg(1, 8, 8, 4))
        assert out.windows.shape == (1, 8, 8, 50, 4)
        assert out.with_msg

    def test_round_trip_bit_exact(self):
        wt = make_windows(2, 3, 2, 2, 5, seed=2)
        msg = make_msg(2, 3, 2, 5, seed=3)
        back_wt, back_msg = B.detach_msg(B.attach_msg(wt, msg))
        np.testing.assert_array_equal(back_wt.windows.data, wt.windows.data)
        np.testing.assert_array_equal(back_msg.grid.data, msg.grid.data)

    def test_single_window_sequence_length(self):
        wt = make_windows(1, 1, 1, 3, 2)
        out = B.attach_msg(wt, make_msg(1, 1, 1, 2))
        assert out.windows.shape[3] == 3 * 3 + 1

    def test_grid_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            B.attach_msg(make_windows(1, 2, 2, 2, 4), make_msg(1, 2, 3, 4))


class TestBiasIndex:
    def test_msg_query_row(self):
        for j in range(0, 5):
            assert B.bias_index(0, j, 2) == B.BiasSource("msg-query")

    def test_msg_key_column(self):
        for i in range(1, 5):
            assert B.bias_index(i, 0, 2) == B.BiasSource("msg-key")

    def test_zero_offset_hits_table_center(self):
        for w in (2, 3, 7):
            for slot in (1, w * w):
                src = B.bias_index(slot, slot, w)
                assert src == B.BiasSource("table", w - 1, w - 1)

    def test_hand_worked_offset(self):
        # window 2x2: query patch position 0, key patch position 3
        src = B.bias_index(1, 4, 2)
        assert src == B.BiasSource("table", 0, 0)

    def test_swap_reflects_through_center(self):
        w = 3
        span = 2 * w - 1
        for i in range(1, w * w + 1):
            for j in range(1, w * w + 1):
                a = B.bias_index(i, j, w)
                b = B.bias_index(j, i, w)
                assert (a.row, a.col) == (span - 1 - b.row, span - 1 - b.col)

    def test_out_of_range_slot(self):
        with pytest.raises(IndexError):
            B.bias_index(0, 5, 2)

    def test_bias_matrix_matches_index_oracle(self):
        rng = np.random.default_rng(5)
        w, heads = 3, 2
        span = 2 * w - 1
        bias = B.RelPosBias(
            window_size=w,
            table=Tensor(rng.standard_normal((heads, span, span)).astype(np.float32)),
            msg_query_bias=Tensor(rng.standard_normal(heads).astype(np.float32)),
            msg_key_bias=Tensor(rng.standard_normal(heads).astype(np.float32)),
        )
        mat = B.bias_matrix(bias, with_msg=True).data
        n = w * w + 1
        assert mat.shape == (heads, n, n)
        for h in range(heads):
            for i in range(n):
                for j in range(n):
                    src = B.bias_index(i, j, w)
                    if src.kind == "msg-query":
                        expected = bias.msg_query_bias.data[h]
                    elif src.kind == "msg-key":
                        expected = bias.msg_key_bias.data[h]
                    else:
                        expected = bias.table.data[h, src.row, src.col]
                    assert mat[h, i, j] == expected


class TestLocalMsa:
    def _params(self, c, heads, w, seed=7):
        rng = np.random.default_rng(seed)
        return make_block_params(rng, c, heads, w)

    def test_identical_tokens_attend_uniformly(self):
        c, w = 4, 2
        params = self._params(c, 1, w)
        token = np.random.default_rng(8).standard_normal(c).astype(np.float32)
        data = np.broadcast_to(token, (1, 1, 1, w * w + 1, c)).copy()
        wt = W.WindowedTokens(windows=Tensor(data), window_size=w, with_msg=True)
        out, attn = B.local_msa(wt, params.attn, params.bias, return_attn=True)
        np.testing.assert_allclose(attn.data, 1.0 / (w * w + 1), atol=1e-7)
        # expected output: out_proj(v) with v identical across tokens
        qkv = token @ params.attn.qkv_weight.data + params.attn.qkv_bias.data
        v = qkv[2 * c :]
        expected = v @ params.attn.out_weight.data + params.attn.out_bias.data
        np.testing.assert_allclose(out.windows.data[0, 0, 0], np.tile(expected, (w * w + 1, 1)), rtol=1e-5)

    def test_windows_are_isolated(self):
        c, w = 8, 2
        params = self._params(c, 2, w, seed=9)
        wt = make_windows(1, 1, 2, w, c, seed=10)
        zeroed = wt.windows.data.copy()
        zeroed[0, 0, 1] = 0.0
        out_full = B.local_msa(wt, params.attn, params.bias)
        out_zero = B.local_msa(
            W.WindowedTokens(windows=Tensor(zeroed), window_size=w), params.attn, params.bias
        )
        np.testing.assert_array_equal(
            out_full.windows.data[0, 0, 0], out_zero.windows.data[0, 0, 0]
        )

    def test_attention_rows_sum_to_one(self):
        c, w = 12, 3
        params = self._params(c, 3, w, seed=11)
        wt = make_windows(2, 2, 2, w, c, seed=12)
        wt = B.attach_msg(wt, make_msg(2, 2, 2, c, seed=13))
        _, attn = B.local_msa(wt, params.attn, params.bias, return_attn=True)
        sums = attn.data.sum(axis=-1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-6)

    def test_heads_must_divide_channels(self):
        params = self._params(8, 2, 2)
        params.attn.num_heads = 3
        with pytest.raises(ConfigError):
            B.local_msa(make_windows(1, 1, 1, 2, 8), params.attn, params.bias)


class TestShuffle:
    def test_region_of_one_is_identity(self):
        msg = make_msg(1, 3, 3, 4, seed=20)
        view = W.build_region_view((3, 3), 1, W.TOP_LEFT)
        out = B.shuffle_msg(msg, view)
        np.testing.assert_array_equal(out.grid.data, msg.grid.data)

    def test_hand_derived_group_transpose(self):
        tokens = np.array(
            [[0.0, 1, 2, 3], [4, 5, 6, 7], [8, 9, 10, 11], [12, 13, 14, 15]], dtype=np.float32
        ).reshape(1, 2, 2, 4)
        msg = W.MsgTokens(grid=Tensor(tokens))
        view = W.build_region_view((2, 2), 2, W.TOP_LEFT)
        out = B.shuffle_msg(msg, view).grid.data.reshape(4, 4)
        expected = np.array(
            [[0.0, 4, 8, 12], [1, 5, 9, 13], [2, 6, 10, 14], [3, 7, 11, 15]], dtype=np.float32
        )
        np.testing.assert_array_equal(out, expected)

    @pytest.mark.parametrize("region", [1, 2, 4])
    def test_permutation_and_involution(self, region):
        rng = np.random.default_rng(region)
        for _ in range(100):
            c = region * region * int(rng.integers(1, 4))
            msg = W.MsgTokens(
                grid=Tensor(rng.standard_normal((1, region, region, c)).astype(np.float32))
            )
            view = W.build_region_view((region, region), region, W.TOP_LEFT)
            once = B.shuffle_msg(msg, view)
            np.testing.assert_array_equal(
                np.sort(once.grid.data.ravel()), np.sort(msg.grid.data.ravel())
            )
            twice = B.shuffle_msg(once, view)
            np.testing.assert_array_equal(twice.grid.data, msg.grid.data)

    def test_indivisible_channels_named_in_error(self):
        msg = make_msg(1, 2, 2, 6)
        view = W.build_region_view((2, 2), 2, W.TOP_LEFT)
        with pytest.raises(ConfigError, match="6.*4"):
            B.shuffle_msg(msg, view)

    def test_partial_region_shuffles_over_actual_count(self):
        # 3x1 grid with region 2 via bottom-right anchor: regions of 1 and 2 windows
        msg = make_msg(1, 3, 1, 4, seed=21)
        view = W.build_region_view((3, 1), 2, W.BOTTOM_RIGHT, strict=False)
        out = B.shuffle_msg(msg, view)
        np.testing.assert_array_equal(out.grid.data[0, 0, 0], msg.grid.data[0, 0, 0])
        a, b = msg.grid.data[0, 1, 0], msg.grid.data[0, 2, 0]
        np.testing.assert_array_equal(out.grid.data[0, 1, 0], [a[0], a[1], b[0], b[1]])
        np.testing.assert_array_equal(out.grid.data[0, 2, 0], [a[2], a[3], b[2], b[3]])


class TestManipulate:
    def test_average_replaces_with_region_mean(self):
        grid = np.array([[1.0, 1.0], [3.0, 3.0]], dtype=np.float32).reshape(1, 1, 2, 2)
        msg = W.MsgTokens(grid=Tensor(grid))
        view = W.build_region_view((1, 2), 2, W.TOP_LEFT, strict=False)
        out = B.manipulate_msg(msg, view, "average")
        np.testing.assert_allclose(out.grid.data.reshape(2, 2), [[2.0, 2.0], [2.0, 2.0]])

    def test_shift_is_cyclic_row_major(self):
        tokens = np.arange(4, dtype=np.float32).reshape(1, 2, 2, 1)  # a,b,c,d
        msg = W.MsgTokens(grid=Tensor(tokens))
        view = W.build_region_view((2, 2), 2, W.TOP_LEFT)
        out = B.manipulate_msg(msg, view, "shift").grid.data.reshape(4)
        np.testing.assert_array_equal(out, [3.0, 0.0, 1.0, 2.0])  # d,a,b,c

    def test_none_is_identity(self):
        msg = make_msg(1, 2, 2, 4, seed=22)
        view = W.build_region_view((2, 2), 2, W.TOP_LEFT)
        out = B.manipulate_msg(msg, view, "none")
        assert out is msg

    def test_unknown_mode_rejected(self):
        msg = make_msg(1, 2, 2, 4)
        view = W.build_region_view((2, 2), 2, W.TOP_LEFT)
        with pytest.raises(ConfigError):
            B.manipulate_msg(msg, view, "swap")

    @pytest.mark.parametrize("mode", ["shuffle", "average", "shift", "none"])
    def test_region_one_reduces_to_identity(self, mode):
        msg = make_msg(1, 2, 3, 4, seed=23)
        view = W.build_region_view((2, 3), 1, W.TOP_LEFT)
        out = B.manipulate_msg(msg, view, mode)
        np.testing.assert_array_equal(out.grid.data, msg.grid.data)


class TestBlockForward:
    def test_zeroed_projections_make_identity_block(self):
        rng = np.random.default_rng(30)
        c, w = 8, 2
        params = make_block_params(rng, c, 2, w, mode="shuffle")
        params.attn.out_weight.data[:] = 0
        params.attn.out_bias.data[:] = 0
        params.mlp_w2.data[:] = 0
        params.mlp_b2.data[:] = 0
        wt = make_windows(1, 2, 2, w, c, seed=31)
        msg = make_msg(1, 2, 2, c, seed=32)
        view = W.build_region_view((2, 2), 2, W.TOP_LEFT)
        out_wt, out_msg = B.block_forward(wt, msg, params, view)
        np.testing.assert_array_equal(out_wt.windows.data, wt.windows.data)
        expected_msg = B.shuffle_msg(msg, view).grid.data
        np.testing.assert_array_equal(out_msg.grid.data, expected_msg)

    def test_mode_none_keeps_windows_isolated(self):
        reached = information_reach(mode="none", use_msg=True, seed=3)
        assert reached[0, 0]
        assert not reached[0, 1] and not reached[1, 0] and not reached[1, 1]

    def test_shuffle_reaches_whole_region_in_two_blocks(self):
        reached = information_reach(mode="shuffle", use_msg=True, num_blocks=2, seed=4)
        assert reached.all()

    def test_no_msg_blocks_stay_local(self):
        reached = information_reach(mode="none", use_msg=False, num_blocks=3, seed=5)
        assert reached[0, 0] and reached.sum() == 1

    def test_micro_block_gradients(self):
        rng = np.random.default_rng(33)
        c, w = 4, 2
        params = make_block_params(rng, c, 1, w, mode="shuffle", dtype=np.float64)
        for t in params.parameters():
            t.data = rng.standard_normal(t.shape) * 0.3
        wt_data = Tensor(rng.standard_normal((1, 2, 2, w * w, c)), requires_grad=True)
        msg_data = Tensor(rng.standard_normal((1, 2, 2, c)), requires_grad=True)
        view = W.build_region_view((2, 2), 2, W.TOP_LEFT)

        def loss():
            wt = W.WindowedTokens(windows=wt_data, window_size=w)
            msg = W.MsgTokens(grid=msg_data)
            out_wt, out_msg = B.block_forward(wt, msg, params, view)
            return (out_wt.windows * out_wt.windows).sum() + (out_msg.grid * out_msg.grid).sum()

        err = T.grad_check(loss, params.parameters() + [wt_data, msg_data])
        assert err < 1e-4, f"block gradient mismatch: {err}"

    def test_mlp_must_be_four_x(self):
        rng = np.random.default_rng(34)
        params = make_block_params(rng, 4, 1, 2)
        with pytest.raises(ConfigError):
            B.BlockParams(
                norm1_gamma=params.norm1_gamma,
                norm1_beta=params.norm1_beta,
                attn=params.attn,
                bias=params.bias,
                norm2_gamma=params.norm2_gamma,
                norm2_beta=params.norm2_beta,
                mlp_w1=Tensor(np.zeros((4, 8), dtype=np.float32)),
                mlp_b1=Tensor(np.zeros(8, dtype=np.float32)),
                mlp_w2=Tensor(np.zeros((8, 4), dtype=np.float32)),
                mlp_b2=Tensor(np.zeros(4, dtype=np.float32)),
            )
