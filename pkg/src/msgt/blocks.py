"""The messenger-token transformer block.

Each non-overlapped window carries one extra "messenger" token that
summarizes the window through attention. Between the attention and MLP
halves of a block, messenger tokens belonging to the same shuffle region
exchange channel groups (or are averaged / cyclically shifted, for the
ablation modes), which is the only cross-window communication channel.

Block procedure, in order: concat messenger with patch tokens, layer norm,
local multi-head self-attention with relative position bias, residual add,
messenger manipulation, layer norm, two-layer MLP, residual add.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor
from .windows import MsgTokens, ShuffleRegionView, WindowedTokens

MODES = ("shuffle", "average", "shift", "none")


# -- relative position bias ---------------------------------------------------


@dataclass
class RelPosBias:
    """Per-head learned attention bias for one window.

    ``table`` holds one (2w-1)x(2w-1) entry grid per head, indexed by the
    spatial offset between two patch positions. Rows where the messenger
    token is the query use the scalar ``msg_query_bias``; columns where it
    is the key use ``msg_key_bias``. The scalars are absent (``None``) in
    messenger-free models.
    """

    window_size: int
    table: Tensor                        # (heads, 2w-1, 2w-1)
    msg_query_bias: Optional[Tensor]     # (heads,)
    msg_key_bias: Optional[Tensor]       # (heads,)

    def __post_init__(self):
        span = 2 * self.window_size - 1
        if self.table.shape[1:] != (span, span):
            raise ShapeError(
                f"bias table {self.table.shape} does not match window size {self.window_size}"
            )

    @property
    def num_heads(self) -> int:
        return self.table.shape[0]

    def parameters(self) -> list[Tensor]:
        out = [self.table]
        if self.msg_query_bias is not None:
            out += [self.msg_query_bias, self.msg_key_bias]
        return out


class BiasSource(NamedTuple):
    """Where one attention-bias entry comes from: a table cell or a scalar."""

    kind: str  # "table" | "msg-query" | "msg-key"
    row: Optional[int] = None
    col: Optional[int] = None


def bias_index(i: int, j: int, window_size: int) -> BiasSource:
    """Resolve the bias source for query slot ``i`` and key slot ``j``.

    Slots are sequence positions in 0..w**2 where slot 0 is the messenger
    token and slots 1.. are patch positions in row-major order. The offset
    arithmetic applies to 0-based patch positions (slot - 1).
    """
    w = window_size
    n = w * w
    if not (0 <= i <= n and 0 <= j <= n):
        raise IndexError(f"slots ({i}, {j}) out of range 0..{n}")
    if i == 0:
        return BiasSource("msg-query")
    if j == 0:
        return BiasSource("msg-key")
    pi, pj = i - 1, j - 1
    row = pi % w - pj % w + w - 1
    col = pi // w - pj // w + w - 1
    return BiasSource("table", row, col)


@lru_cache(maxsize=None)
def _bias_gather_index(window_size: int, with_msg: bool) -> np.ndarray:
    """Flat per-head gather index assembling the (T, T) bias matrix.

    Positions 0..(2w-1)**2-1 address the flattened table, the next two the
    messenger scalars.
    """
    w = window_size
    span = 2 * w - 1
    table_len = span * span
    n = w * w + 1 if with_msg else w * w
    first = 0 if with_msg else 1
    idx = np.empty((n, n), dtype=np.int64)
    for a in range(n):
        for b in range(n):
            src = bias_index(a + first, b + first, w)
            if src.kind == "msg-query":
                idx[a, b] = table_len
            elif src.kind == "msg-key":
                idx[a, b] = table_len + 1
            else:
                idx[a, b] = src.row * span + src.col
    return idx


def bias_matrix(bias: RelPosBias, with_msg: bool = True) -> Tensor:
    """Assemble the additive attention bias, shape (heads, T, T)."""
    heads = bias.num_heads
    span = 2 * bias.window_size - 1
    parts = [T.reshape(bias.table, (heads, span * span))]
    per_head = span * span
    if with_msg:
        if bias.msg_query_bias is None or bias.msg_key_bias is None:
            raise ConfigError("messenger bias scalars are absent in this block")
        parts += [
            T.reshape(bias.msg_query_bias, (heads, 1)),
            T.reshape(bias.msg_key_bias, (heads, 1)),
        ]
        per_head += 2
    flat = T.concat(parts, axis=1) if len(parts) > 1 else parts[0]
    base = _bias_gather_index(bias.window_size, with_msg)
    offsets = np.arange(heads, dtype=np.int64) * per_head
    full = (offsets[:, None, None] + base[None, :, :]).reshape(-1)
    out = T.gather_last(T.reshape(flat, (-1,)), full)
    return T.reshape(out, (heads, base.shape[0], base.shape[1]))


# -- attention ------------------------------------------------------------------


@dataclass
class AttentionParams:
    qkv_weight: Tensor   # (C, 3C)
    qkv_bias: Tensor     # (3C,)
    out_weight: Tensor   # (C, C)
    out_bias: Tensor     # (C,)
    num_heads: int

    def parameters(self) -> list[Tensor]:
        return [self.qkv_weight, self.qkv_bias, self.out_weight, self.out_bias]


def local_msa(
    wt: WindowedTokens,
    params: AttentionParams,
    bias: RelPosBias,
    return_attn: bool = False,
):
    """Multi-head self-attention computed independently inside each window."""
    b, gh, gw, n, c = wt.windows.shape
    h = params.num_heads
    if c % h:
        raise ConfigError(f"channels {c} not divisible by {h} heads")
    d = c // h
    scale = 1.0 / math.sqrt(d)

    qkv = T.linear(wt.windows, params.qkv_weight, params.qkv_bias)  # (B, gh, gw, n, 3C)

    def heads_first(x):
        x = T.reshape(x, (b, gh, gw, n, h, d))
        return T.transpose(x, (0, 1, 2, 4, 3, 5))  # (B, gh, gw, h, n, d)

    q = heads_first(qkv[..., :c])
    k = heads_first(qkv[..., c : 2 * c])
    v = heads_first(qkv[..., 2 * c :])

    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 2, 3, 5, 4))), scale)
    scores = T.add(scores, bias_matrix(bias, with_msg=wt.with_msg))
    attn = T.softmax(scores, axis=-1)  # rows sum to 1 per head

    ctx = T.matmul(attn, v)  # (B, gh, gw, h, n, d)
    ctx = T.reshape(T.transpose(ctx, (0, 1, 2, 4, 3, 5)), (b, gh, gw, n, c))
    out = T.linear(ctx, params.out_weight, params.out_bias)
    result = WindowedTokens(
        windows=out, window_size=wt.window_size, with_msg=wt.with_msg, region_size=wt.region_size
    )
    return (result, attn) if return_attn else result


# -- messenger attachment ---------------------------------------------------------


def attach_msg(wt: WindowedTokens, msg: MsgTokens) -> WindowedTokens:
    """Prepend each window's messenger token at slot 0."""
    if wt.with_msg:
        raise ConfigError("messenger tokens already attached")
    b, gh, gw, n, c = wt.windows.shape
    if msg.grid.shape != (b, gh, gw, c):
        raise ShapeError(
            f"messenger grid {msg.grid.shape} does not match window grid ({b}, {gh}, {gw}, {c})"
        )
    lead = T.reshape(msg.grid, (b, gh, gw, 1, c))
    return WindowedTokens(
        windows=T.concat([lead, wt.windows], axis=3),
        window_size=wt.window_size,
        with_msg=True,
        region_size=wt.region_size,
    )


def detach_msg(wt: WindowedTokens) -> tuple[WindowedTokens, MsgTokens]:
    """Split slot 0 back out; exact inverse of :func:`attach_msg`."""
    if not wt.with_msg:
        raise ConfigError("no messenger tokens attached")
    b, gh, gw, _, c = wt.windows.shape
    msg = MsgTokens(grid=T.reshape(wt.windows[:, :, :, 0, :], (b, gh, gw, c)))
    patches = WindowedTokens(
        windows=wt.windows[:, :, :, 1:, :],
        window_size=wt.window_size,
        with_msg=False,
        region_size=wt.region_size,
    )
    return patches, msg


# -- messenger manipulation ---------------------------------------------------------


def _shuffle_permutation(view: ShuffleRegionView, channels: int) -> np.ndarray:
    """Scalar permutation over (window, channel) implementing the group transpose.

    Within a region of n tokens, channels split into n groups of C/n;
    output token a's group b is input token b's group a.
    """
    n_windows = view.num_windows
    perm = np.arange(n_windows * channels, dtype=np.int64)
    for idx in view.regions:
        n = len(idx)
        if n == 1:
            continue
        if channels % n:
            raise ConfigError(
                f"channels {channels} not divisible by region token count {n}"
            )
        g = channels // n
        for a in range(n):
            for bi in range(n):
                dst = idx[a] * channels + bi * g
                src = idx[bi] * channels + a * g
                perm[dst : dst + g] = np.arange(src, src + g)
    return perm


def _shift_permutation(view: ShuffleRegionView, channels: int) -> np.ndarray:
    """Cyclic +1 shift of whole tokens, row-major within each region."""
    n_windows = view.num_windows
    perm = np.arange(n_windows * channels, dtype=np.int64)
    for idx in view.regions:
        n = len(idx)
        for k in range(n):
            src = idx[(k - 1) % n]
            dst = idx[k]
            perm[dst * channels : (dst + 1) * channels] = np.arange(
                src * channels, (src + 1) * channels
            )
    return perm


def _apply_flat_permutation(msg: MsgTokens, perm: np.ndarray) -> MsgTokens:
    b, gh, gw, c = msg.grid.shape
    flat = T.reshape(msg.grid, (b, gh * gw * c))
    out = T.gather_last(flat, perm)
    return MsgTokens(grid=T.reshape(out, (b, gh, gw, c)))


def shuffle_msg(msg: MsgTokens, view: ShuffleRegionView) -> MsgTokens:
    """Exchange channel groups between all messenger tokens of each region."""
    if view.grid_shape != msg.grid_shape:
        raise ShapeError(f"region view grid {view.grid_shape} != messenger grid {msg.grid_shape}")
    return _apply_flat_permutation(msg, _shuffle_permutation(view, msg.channels))


def manipulate_msg(msg: MsgTokens, view: ShuffleRegionView, mode: str) -> MsgTokens:
    """Apply the configured cross-window exchange to messenger tokens."""
    if mode == "none":
        return msg
    if mode == "shuffle":
        return shuffle_msg(msg, view)
    if view.grid_shape != msg.grid_shape:
        raise ShapeError(f"region view grid {view.grid_shape} != messenger grid {msg.grid_shape}")
    if mode == "shift":
        return _apply_flat_permutation(msg, _shift_permutation(view, msg.channels))
    if mode == "average":
        b, gh, gw, c = msg.grid.shape
        flat = T.reshape(msg.grid, (b, gh * gw, c))
        out = T.segment_mean(flat, view.regions)
        return MsgTokens(grid=T.reshape(out, (b, gh, gw, c)))
    raise ConfigError(f"unknown manipulation mode {mode!r}; expected one of {MODES}")


# -- the block ------------------------------------------------------------------------


@dataclass
class BlockParams:
    norm1_gamma: Tensor
    norm1_beta: Tensor
    attn: AttentionParams
    bias: RelPosBias
    norm2_gamma: Tensor
    norm2_beta: Tensor
    mlp_w1: Tensor  # (C, 4C)
    mlp_b1: Tensor
    mlp_w2: Tensor  # (4C, C)
    mlp_b2: Tensor
    mode: str = "shuffle"
    drop_path_rate: float = 0.0

    def __post_init__(self):
        c = self.mlp_w1.shape[0]
        if self.mlp_w1.shape != (c, 4 * c) or self.mlp_w2.shape != (4 * c, c):
            raise ConfigError(
                f"MLP must expand to exactly 4x channels; got {self.mlp_w1.shape} / {self.mlp_w2.shape}"
            )
        if self.mode not in MODES:
            raise ConfigError(f"unknown manipulation mode {self.mode!r}; expected one of {MODES}")

    def parameters(self) -> list[Tensor]:
        return (
            [self.norm1_gamma, self.norm1_beta]
            + self.attn.parameters()
            + self.bias.parameters()
            + [self.norm2_gamma, self.norm2_beta, self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2]
        )


def _mlp(x: Tensor, params: BlockParams) -> Tensor:
    hidden = T.gelu(T.linear(x, params.mlp_w1, params.mlp_b1))
    return T.linear(hidden, params.mlp_w2, params.mlp_b2)


def block_forward(
    wt: WindowedTokens,
    msg: Optional[MsgTokens],
    params: BlockParams,
    view: Optional[ShuffleRegionView],
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> tuple[WindowedTokens, Optional[MsgTokens]]:
    """Run one transformer block over windowed tokens.

    ``msg is None`` runs the messenger-free ablation: plain local attention
    over ``w**2`` tokens with no cross-window exchange.
    """
    use_msg = msg is not None
    x = attach_msg(wt, msg) if use_msg else wt

    normed = WindowedTokens(
        windows=T.layer_norm(x.windows, params.norm1_gamma, params.norm1_beta),
        window_size=x.window_size,
        with_msg=x.with_msg,
        region_size=x.region_size,
    )
    attn_out = local_msa(normed, params.attn, params.bias)
    tokens = T.add(x.windows, T.drop_path(attn_out.windows, params.drop_path_rate, rng, training))

    if use_msg:
        combined = WindowedTokens(
            windows=tokens, window_size=x.window_size, with_msg=True, region_size=x.region_size
        )
        patches, mid_msg = detach_msg(combined)
        mid_msg = manipulate_msg(mid_msg, view, params.mode)
        tokens = attach_msg(patches, mid_msg).windows

    normed2 = T.layer_norm(tokens, params.norm2_gamma, params.norm2_beta)
    tokens = T.add(tokens, T.drop_path(_mlp(normed2, params), params.drop_path_rate, rng, training))

    result = WindowedTokens(
        windows=tokens, window_size=x.window_size, with_msg=use_msg, region_size=x.region_size
    )
    if use_msg:
        return detach_msg(result)
    return result, None
