"""Closed-form cost model tests, including exact cross-checks against the
instrumented engine."""

from fractions import Fraction

import numpy as np
import pytest

from msgt import blocks as B
from msgt import complexity as C
from msgt import model as M
from msgt import tensor as T
from msgt import windows as W
from msgt.errors import ConfigError
from msgt.tensor import Tensor


class TestFlopsBlock:
    def test_hand_evaluated_single_window(self):
        spec = C.ComplexitySpec(grid_h=7, grid_w=7, window_size=7, channels=384, with_msg=False)
        # 1*(4*49*384^2 + 2*2401*384) + 2*1*49*4*384^2
        assert C.flops_block(spec) == 88_548_096

    def test_msg_increase_matches_exact_ratio(self):
        for grid in (7, 14, 56):
            base = C.ComplexitySpec(grid, grid, 7, 384, with_msg=False)
            with_msg = C.ComplexitySpec(grid, grid, 7, 384, with_msg=True)
            without = C.flops_block(base)
            delta = C.flops_block(with_msg) - without
            assert Fraction(delta, without) == C.flops_ratio_exact(7, 384)

    def test_channel_doubling_quadruples_projection_term(self):
        def projection_term(ch):
            spec = C.ComplexitySpec(7, 7, 7, ch, with_msg=False)
            # remove the quadratic-in-tokens attention part: 2*w^4*C
            return C.flops_block(spec) - 2 * 7**4 * ch

        assert projection_term(768) == 4 * projection_term(384)

    def test_indivisible_grid_rejected(self):
        with pytest.raises(ConfigError):
            C.flops_block(C.ComplexitySpec(8, 8, 7, 64)).validate()


class TestFlopsRatio:
    def test_reference_channel_width(self):
        r = C.flops_ratio(7, 384)
        assert r == Fraction(2354, 115297)
        assert abs(float(r) - 0.020417) < 1e-6
        # at this scale the dropped w^2 term barely moves the figure
        assert abs(float(C.flops_ratio_exact(7, 384)) - float(r)) < 5e-4

    def test_narrow_channel_width(self):
        assert C.flops_ratio(7, 96) == Fraction(626, 30625)

    def test_grid_independence_sweep(self):
        for w in (2, 4, 7, 14):
            for ch in (16, 96, 384, 768):
                exact = C.flops_ratio_exact(w, ch)
                headline = C.flops_ratio(w, ch)
                # headline simplification understates the token-quadratic term
                assert exact - headline == Fraction(w * w, 6 * w * w * ch + w**4)
                for grid in (w, 4 * w):
                    base = C.flops_block(C.ComplexitySpec(grid, grid, w, ch, with_msg=False))
                    extra = C.flops_block(C.ComplexitySpec(grid, grid, w, ch, with_msg=True)) - base
                    assert exact * base == extra


class TestReceptiveField:
    def test_shifted_window_value(self):
        assert C.receptive_field(C.SWIN_SHIFT, 7) == Fraction(441, 4)
        assert float(C.receptive_field(C.SWIN_SHIFT, 7)) == 110.25

    def test_shuffle_value(self):
        assert C.receptive_field(C.MSG_SHUFFLE, 7, 4) == 784

    def test_degenerate_single_window(self):
        assert C.receptive_field(C.MSG_SHUFFLE, 7, 1) == 49

    def test_shuffle_dominates_shift_for_s_at_least_two(self):
        for w in (2, 4, 7, 14):
            swin = C.receptive_field(C.SWIN_SHIFT, w)
            for s in range(2, 9):
                assert C.receptive_field(C.MSG_SHUFFLE, w, s) >= swin

    def test_unknown_scheme(self):
        with pytest.raises(ConfigError):
            C.receptive_field("halo", 7, 2)


class TestModelFlops:
    def test_tiny_near_reference_budget(self):
        report = C.model_flops(M.tiny_config())
        assert abs(report["total_flops_conv2x"] - 3.8e9) / 3.8e9 < 0.10
        assert abs(report["total_macs"] - 3.8e9) / 3.8e9 < 0.10

    def test_resolution_doubling_quadruples_attention(self):
        cfg = M.tiny_config()
        small = C.model_flops(cfg, input_size=224)
        big = C.model_flops(cfg, input_size=448)
        assert big["attention_mlp"] == 4 * small["attention_mlp"]

    def test_block_counter_matches_formula_exactly(self):
        rng = np.random.default_rng(0)
        gh = gw = 2
        ws, ch, heads = 4, 16, 2
        params = M.make_block_params(rng, ch, heads, ws)
        wt = W.WindowedTokens(
            windows=Tensor(rng.standard_normal((1, gh, gw, ws * ws, ch)).astype(np.float32)),
            window_size=ws,
        )
        msg = W.MsgTokens(grid=Tensor(rng.standard_normal((1, gh, gw, ch)).astype(np.float32)))
        view = W.build_region_view((gh, gw), 2, W.TOP_LEFT)
        with T.count_macs() as counter:
            B.block_forward(wt, msg, params, view)
        spec = C.ComplexitySpec(gh * ws, gw * ws, ws, ch, with_msg=True)
        assert counter["matmul"] == C.flops_block(spec)
        assert counter["conv"] == 0

    def test_micro_model_counter_matches_closed_form(self):
        cfg = M.micro_config()
        model = M.build_model(cfg, seed=0)
        x = Tensor(np.random.default_rng(1).standard_normal((1, 128, 128, 3)).astype(np.float32))
        with T.no_grad(), T.count_macs() as counter:
            M.forward(model, x)
        report = C.model_flops(cfg)
        assert counter["matmul"] == report["attention_mlp"] + report["head"]
        assert counter["conv"] == report["conv_macs"]
        assert counter["other"] > 0  # unmodeled ops are bucketed, not dropped
