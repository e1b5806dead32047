"""Verification probes that run the real machinery.

Two families: information-flow reach (perturb one patch token, report
which windows notice after a stack of blocks) and the 64-bit
finite-difference gradient suite over single ops, one block, and the full
micro model.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import blocks as B
from . import model as M
from . import tensor as T
from . import windows as W
from .model import make_block_params
from .tensor import Tensor


def _generic_block(rng: np.random.Generator, channels: int, num_heads: int, window_size: int, mode: str) -> B.BlockParams:
    """Random nonzero parameters everywhere, so no path is accidentally dead."""
    params = make_block_params(rng, channels, num_heads, window_size, mode=mode, dtype=np.float64)
    for t in params.parameters():
        t.data = rng.standard_normal(t.shape) * 0.2
    params.norm1_gamma.data = 1.0 + 0.1 * rng.standard_normal(channels)
    params.norm2_gamma.data = 1.0 + 0.1 * rng.standard_normal(channels)
    return params


def information_reach(
    window_size: int = 2,
    region_size: int = 2,
    grid: tuple[int, int] = (2, 2),
    channels: int = 8,
    num_heads: int = 2,
    num_blocks: int = 2,
    mode: str = "shuffle",
    use_msg: bool = True,
    seed: int = 0,
) -> np.ndarray:
    """Boolean (grid_h, grid_w) map of windows whose outputs change when one
    patch token in window (0, 0) is perturbed."""
    rng = np.random.default_rng(seed)
    gh, gw = grid
    h, w = gh * window_size, gw * window_size

    params = [_generic_block(rng, channels, num_heads, window_size, mode) for _ in range(num_blocks)]
    view = W.build_region_view((gh, gw), region_size, W.TOP_LEFT, strict=False)
    base_tokens = rng.standard_normal((1, h, w, channels))
    base_msg = rng.standard_normal((1, gh, gw, channels))

    def run(tokens: np.ndarray) -> np.ndarray:
        with T.no_grad():
            wt = W.partition_windows(W.FeatureMap(tokens=Tensor(tokens)), window_size)
            msg = W.MsgTokens(grid=Tensor(base_msg.copy())) if use_msg else None
            for p in params:
                wt, msg = B.block_forward(wt, msg, p, view)
            return wt.windows.data

    # Bump a single channel: a uniform all-channel shift would be erased by
    # the layer norms and never enter the attention path.
    perturbed = base_tokens.copy()
    perturbed[0, 0, 0, 0] += 1e-3
    delta = np.abs(run(perturbed) - run(base_tokens.copy()))
    return delta.reshape(1, gh, gw, -1).max(axis=(0, 3)) > 0.0


# -- gradient-check suite -------------------------------------------------------


def single_op_grad_checks(seed: int = 0) -> dict[str, float]:
    """Exhaustive central-difference checks of every differentiable kernel."""
    rng = np.random.default_rng(seed)

    def t(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    x34, y4 = t(3, 4), t(4)
    pos = Tensor(np.abs(rng.standard_normal(5)) + 0.5, requires_grad=True)
    a23, b32 = t(2, 3), t(3, 2)
    ln_x, ln_g, ln_b = t(2, 3, 4), t(4), t(4)
    conv_x, conv_w, conv_b = t(2, 4, 4, 2), t(3, 3, 2, 3), t(3)
    gather_x = t(6)
    seg_x = t(2, 4, 3)
    cases = {
        "add": (lambda: T.tsum(T.power(T.add(x34, y4), 2.0)), [x34, y4]),
        "mul": (lambda: T.tsum(T.mul(x34, T.mul(x34, x34))), [x34]),
        "exp": (lambda: T.tsum(T.texp(pos)), [pos]),
        "log": (lambda: T.tsum(T.tlog(pos)), [pos]),
        "matmul": (lambda: T.tsum(T.power(T.matmul(a23, b32), 2.0)), [a23, b32]),
        "softmax": (lambda: T.tsum(T.power(T.softmax(x34, axis=1), 2.0)), [x34]),
        "log_softmax": (lambda: T.tsum(T.power(T.log_softmax(x34, axis=1), 2.0)), [x34]),
        "layer_norm": (lambda: T.tsum(T.power(T.layer_norm(ln_x, ln_g, ln_b), 2.0)), [ln_x, ln_g, ln_b]),
        "gelu": (lambda: T.tsum(T.power(T.gelu(x34), 2.0)), [x34]),
        "conv2d": (
            lambda: T.tsum(T.power(T.conv2d(conv_x, conv_w, conv_b, stride=2, padding=1), 2.0)),
            [conv_x, conv_w, conv_b],
        ),
        "gather_last": (
            lambda: T.tsum(T.power(T.gather_last(gather_x, np.array([0, 2, 2, 5])), 2.0)),
            [gather_x],
        ),
        "segment_mean": (
            lambda: T.tsum(T.power(T.segment_mean(seg_x, [np.array([0, 2]), np.array([1, 3])]), 2.0)),
            [seg_x],
        ),
    }
    return {name: T.grad_check(fn, params) for name, (fn, params) in cases.items()}


def block_grad_check(seed: int = 0) -> float:
    """Exhaustive check through one block: w=2, 4 channels, one head."""
    rng = np.random.default_rng(seed)
    params = make_block_params(rng, 4, 1, 2, mode="shuffle", dtype=np.float64)
    for t in params.parameters():
        t.data = rng.standard_normal(t.shape) * 0.3
    wt_data = Tensor(rng.standard_normal((1, 2, 2, 4, 4)), requires_grad=True)
    msg_data = Tensor(rng.standard_normal((1, 2, 2, 4)), requires_grad=True)
    view = W.build_region_view((2, 2), 2, W.TOP_LEFT)

    def loss():
        wt = W.WindowedTokens(windows=wt_data, window_size=2)
        out_wt, out_msg = B.block_forward(wt, W.MsgTokens(grid=msg_data), params, view)
        return (out_wt.windows * out_wt.windows).sum() + (out_msg.grid * out_msg.grid).sum()

    return T.grad_check(loss, params.parameters() + [wt_data, msg_data])


def model_grad_check(
    max_entries_per_param: Optional[int] = 3,
    step: float = 1e-5,
    seed: int = 0,
) -> float:
    """Finite-difference check over every parameter tensor of the micro model.

    Entries are subsampled deterministically per tensor; pass ``None`` to
    check every entry (slow).
    """
    rng = np.random.default_rng(seed)
    model = M.build_model(M.micro_config(), seed=seed, dtype=np.float64)
    # generic parameter values so every path carries signal
    for _, p in model.named_parameters():
        p.data = rng.standard_normal(p.shape) * 0.1
    images = Tensor(rng.standard_normal((1, 128, 128, 3)))
    label = np.zeros((1, model.config.num_classes))
    label[0, 1] = 1.0
    target = Tensor(label)

    def loss():
        logits = M.forward(model, images, mode="eval")
        logp = T.log_softmax(logits, axis=1)
        return T.mul(T.tsum(T.mul(logp, target)), -1.0)

    return T.grad_check(
        loss,
        [p for _, p in model.named_parameters()],
        step=step,
        max_entries_per_param=max_entries_per_param,
        seed=seed,
    )
