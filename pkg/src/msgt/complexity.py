"""Closed-form cost and receptive-field accounting, in exact arithmetic.

Attention/MLP block costs follow the multiply-accumulate convention of the
instrumented engine (one unit per multiply-add): the block total for a
window of n tokens is ``windows * (4nC^2 + 2n^2C + 8nC^2)``. Convolution
costs are additionally reported at 2 FLOPs per multiply-add, since the two
conventions are commonly mixed; both totals are exposed side by side.

Everything here is integer or `fractions.Fraction` arithmetic so results
can be compared exactly against the instrumented counters.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

from .errors import ConfigError
from .model import MERGE_KERNEL, PATCH_KERNEL, PATCH_PAD, PATCH_STRIDE, ArchConfig

SWIN_SHIFT = "swin_shift"
MSG_SHUFFLE = "msg_shuffle"


@dataclass(frozen=True)
class ComplexitySpec:
    """Inputs to the per-block cost formulas."""

    grid_h: int
    grid_w: int
    window_size: int
    channels: int
    with_msg: bool = True

    def validate(self) -> None:
        if min(self.grid_h, self.grid_w, self.window_size, self.channels) < 1:
            raise ConfigError("all complexity extents must be positive")
        if (self.grid_h * self.grid_w) % (self.window_size**2):
            raise ConfigError(
                f"token count {self.grid_h}x{self.grid_w} is not divisible by "
                f"window area {self.window_size**2}"
            )


def flops_block(spec: ComplexitySpec) -> int:
    """Exact attention+MLP cost of one block over the whole token grid.

    Without messenger tokens: ``(HW/w^2)(4w^2C^2 + 2w^4C) + 2(HW/w^2)w^2·4C^2``;
    with them, every per-window token count ``w^2`` becomes ``w^2 + 1``.
    """
    spec.validate()
    windows = (spec.grid_h * spec.grid_w) // (spec.window_size**2)
    n = spec.window_size**2 + (1 if spec.with_msg else 0)
    c = spec.channels
    msa = windows * (4 * n * c * c + 2 * n * n * c)
    mlp = 2 * windows * n * 4 * c * c
    return msa + mlp


def flops_ratio(window_size: int, channels: int) -> Fraction:
    """Relative cost increase from attaching one messenger token per window.

    Returns the headline simplification ``(6C + w^2 + 1) / (6 w^2 C + w^4)``,
    independent of the grid extents. Note this simplification drops a ``w^2``
    from the attention-quadratic term; :func:`flops_ratio_exact` carries it.
    """
    if window_size < 1 or channels < 1:
        raise ConfigError("window size and channels must be positive")
    w2 = window_size**2
    return Fraction(6 * channels + w2 + 1, 6 * w2 * channels + w2 * w2)


def flops_ratio_exact(window_size: int, channels: int) -> Fraction:
    """Exact relative increase, ``(6C + 2w^2 + 1) / (6 w^2 C + w^4)``.

    Consistent with :func:`flops_block` for every grid: multiplying by the
    messenger-free block cost gives exactly the with-messenger delta.
    """
    if window_size < 1 or channels < 1:
        raise ConfigError("window size and channels must be positive")
    w2 = window_size**2
    return Fraction(6 * channels + 2 * w2 + 1, 6 * w2 * channels + w2 * w2)


def receptive_field(scheme: str, window_size: int, shuffle_size: Optional[int] = None) -> Fraction:
    """Token area reachable after two attention computations.

    Window shifting reaches ``(3w/2)^2``; messenger shuffling over an SxS
    region reaches ``(S*w)^2``.
    """
    if window_size < 1:
        raise ConfigError("window size must be positive")
    if scheme == SWIN_SHIFT:
        return Fraction(3 * window_size, 2) ** 2
    if scheme == MSG_SHUFFLE:
        if shuffle_size is None or shuffle_size < 1:
            raise ConfigError("msg_shuffle requires a positive shuffle size")
        return Fraction(shuffle_size * window_size) ** 2
    raise ConfigError(f"unknown scheme {scheme!r}; expected {SWIN_SHIFT} or {MSG_SHUFFLE}")


def _conv_output(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def model_flops(cfg: ArchConfig, input_size: Optional[int] = None) -> dict:
    """Cost breakdown for a full forward pass at ``input_size``.

    Returns multiply-accumulate counts: per-stage attention+MLP totals, the
    patch-embed / merge / head projection terms, and grand totals under
    both the MAC convention (``total_macs``) and with convolutions counted
    at 2 FLOPs per MAC (``total_flops_conv2x``).
    """
    cfg.validate()
    size = cfg.input_size if input_size is None else input_size
    h = w = _conv_output(size, PATCH_KERNEL, PATCH_STRIDE, PATCH_PAD)
    embed_macs = h * w * PATCH_KERNEL**2 * 3 * cfg.stages[0].dim

    stage_macs: list[int] = []
    merge_macs: list[int] = []
    msg_grid = None
    for i, s in enumerate(cfg.stages):
        ws = s.window_size
        gh, gw = -(-h // ws), -(-w // ws)  # padded window grid
        spec = ComplexitySpec(
            grid_h=gh * ws, grid_w=gw * ws, window_size=ws, channels=s.dim, with_msg=cfg.use_msg
        )
        stage_macs.append(s.num_blocks * flops_block(spec))
        msg_grid = (gh, gw)
        if i < len(cfg.stages) - 1:
            nh, nw = _conv_output(h, MERGE_KERNEL, 2, 1), _conv_output(w, MERGE_KERNEL, 2, 1)
            macs = nh * nw * MERGE_KERNEL**2 * s.dim * cfg.stages[i + 1].dim
            if cfg.use_msg:
                mh, mw = -(-gh // 2), -(-gw // 2)
                macs += mh * mw * MERGE_KERNEL**2 * s.dim * cfg.stages[i + 1].dim
            merge_macs.append(macs)
            h, w = nh, nw
    head_macs = cfg.stages[-1].dim * cfg.num_classes
    conv_macs = embed_macs + sum(merge_macs)
    attention_mlp = sum(stage_macs)
    return {
        "stages": stage_macs,
        "embed": embed_macs,
        "merges": merge_macs,
        "head": head_macs,
        "attention_mlp": attention_mlp,
        "conv_macs": conv_macs,
        "total_macs": attention_mlp + conv_macs + head_macs,
        "total_flops_conv2x": attention_mlp + 2 * conv_macs + head_macs,
        "final_msg_grid": msg_grid,
    }
