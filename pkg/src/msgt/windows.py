"""Window partitioning, shuffle-region grouping, padding, and token merging.

Feature maps are channel-last (B, H, W, C). Partitioning reshapes the map
into a grid of non-overlapped square windows; regions group windows into
tiles whose messenger tokens later exchange channels. All transformations
here are differentiable and value-preserving.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, PartitionError, ShapeError
from .tensor import Tensor

TOP_LEFT = "top-left"
BOTTOM_RIGHT = "bottom-right"

# Instrumentation for the one-partition-per-stage efficiency property.
_partition_calls = 0


def partition_call_count() -> int:
    return _partition_calls


def reset_partition_call_count() -> None:
    global _partition_calls
    _partition_calls = 0


@dataclass
class FeatureMap:
    """Patch tokens on their 2-d grid: ``tokens`` is (B, H, W, C)."""

    tokens: Tensor
    stage_index: int = 1

    @property
    def extents(self) -> tuple[int, int]:
        return self.tokens.shape[1], self.tokens.shape[2]

    @property
    def channels(self) -> int:
        return self.tokens.shape[3]


@dataclass
class MsgTokens:
    """One messenger token per window, on the window grid: (B, Gh, Gw, C)."""

    grid: Tensor

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.grid.shape[1], self.grid.shape[2]

    @property
    def channels(self) -> int:
        return self.grid.shape[3]


@dataclass
class WindowedTokens:
    """Windows of tokens: ``windows`` is (B, Gh, Gw, tokens_per_window, C).

    When ``with_msg`` is true the per-window token axis is ``w**2 + 1`` and
    slot 0 holds the messenger token; slots 1.. hold patch tokens in
    row-major order.
    """

    windows: Tensor
    window_size: int
    with_msg: bool = False
    region_size: Optional[int] = None

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.windows.shape[1], self.windows.shape[2]

    @property
    def channels(self) -> int:
        return self.windows.shape[4]


@dataclass
class ShuffleRegionView:
    """Grouping of the window grid into region tiles for token exchange.

    ``regions`` lists, per region, the flat (row-major) window indices it
    covers. Complete tiles are aligned to ``anchor``; leftover windows form
    partial regions at the opposite corner.
    """

    grid_shape: tuple[int, int]
    region_size: int
    anchor: str
    regions: list[np.ndarray] = field(repr=False)

    @property
    def num_windows(self) -> int:
        return self.grid_shape[0] * self.grid_shape[1]


def _bands(extent: int, region: int, anchor: str) -> list[tuple[int, int]]:
    if anchor == TOP_LEFT:
        return [(s, min(s + region, extent)) for s in range(0, extent, region)]
    offset = extent % region
    bands = [(0, offset)] if offset else []
    bands.extend((s, s + region) for s in range(offset, extent, region))
    return bands


def build_region_view(
    grid_shape: tuple[int, int],
    region_size: int,
    anchor: str = TOP_LEFT,
    strict: bool = True,
) -> ShuffleRegionView:
    """Tile a window grid into shuffle regions without touching any tensor."""
    gh, gw = grid_shape
    if region_size < 1:
        raise ConfigError(f"region size must be >= 1, got {region_size}")
    if anchor not in (TOP_LEFT, BOTTOM_RIGHT):
        raise ConfigError(f"unknown anchor {anchor!r}")
    if strict and region_size > gh and region_size > gw:
        raise ConfigError(
            f"region size {region_size} exceeds both window-grid extents {gh}x{gw}"
        )
    regions = []
    for r0, r1 in _bands(gh, region_size, anchor):
        for c0, c1 in _bands(gw, region_size, anchor):
            rows = np.arange(r0, r1)
            cols = np.arange(c0, c1)
            idx = (rows[:, None] * gw + cols[None, :]).reshape(-1)
            regions.append(idx)
    return ShuffleRegionView(grid_shape=(gh, gw), region_size=region_size, anchor=anchor, regions=regions)


def group_regions(
    wt: WindowedTokens,
    region_size: int,
    anchor: str = TOP_LEFT,
    strict: bool = True,
) -> ShuffleRegionView:
    return build_region_view(wt.grid_shape, region_size, anchor, strict)


def partition_windows(fm: FeatureMap, window_size: int) -> WindowedTokens:
    """Split (B, H, W, C) into non-overlapped ``window_size`` square windows."""
    global _partition_calls
    b, h, w, c = fm.tokens.shape
    if h % window_size or w % window_size:
        raise PartitionError(
            f"extents {h}x{w} are not divisible by window size {window_size}; "
            "call pad_to_window_multiple first"
        )
    _partition_calls += 1
    gh, gw = h // window_size, w // window_size
    x = T.reshape(fm.tokens, (b, gh, window_size, gw, window_size, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (b, gh, gw, window_size * window_size, c))
    return WindowedTokens(windows=x, window_size=window_size, with_msg=False)


def reverse_windows(wt: WindowedTokens) -> FeatureMap:
    """Exact inverse of :func:`partition_windows`."""
    if wt.with_msg:
        raise ContractError("detach messenger tokens before reversing windows")
    b, gh, gw, n, c = wt.windows.shape
    ws = wt.window_size
    x = T.reshape(wt.windows, (b, gh, gw, ws, ws, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (b, gh * ws, gw * ws, c))
    return FeatureMap(tokens=x)


def pad_to_window_multiple(fm: FeatureMap, window_size: int) -> tuple[FeatureMap, tuple[int, int]]:
    """Zero-pad bottom/right to the next window multiple; returns original extents."""
    b, h, w, c = fm.tokens.shape
    ph = (-h) % window_size
    pw = (-w) % window_size
    if ph == 0 and pw == 0:
        return fm, (h, w)
    padded = T.pad(fm.tokens, [(0, 0), (0, ph), (0, pw), (0, 0)])
    return FeatureMap(tokens=padded, stage_index=fm.stage_index), (h, w)


def crop_to(fm: FeatureMap, extents: tuple[int, int]) -> FeatureMap:
    """Drop bottom/right padding, restoring the recorded extents."""
    h, w = extents
    if fm.tokens.shape[1] == h and fm.tokens.shape[2] == w:
        return fm
    return FeatureMap(tokens=fm.tokens[:, :h, :w, :], stage_index=fm.stage_index)


def merge_tokens(
    fm: FeatureMap,
    msg: Optional[MsgTokens],
    weight: Tensor,
    bias: Tensor,
) -> tuple[FeatureMap, Optional[MsgTokens]]:
    """Downsample between stages with one shared strided 3x3 convolution.

    The patch grid and the messenger grid are convolved with the *same*
    weights (stride 2, padding 1), halving spatial extents (ceil for odd
    messenger grids) and doubling channels.
    """
    c = fm.channels
    if weight.shape[:3] != (3, 3, c):
        raise ShapeError(f"merge weight {weight.shape} does not match 3x3 kernel over {c} channels")
    if msg is not None and msg.channels != c:
        raise ShapeError(f"messenger channels {msg.channels} != patch channels {c}")
    merged = FeatureMap(
        tokens=T.conv2d(fm.tokens, weight, bias, stride=2, padding=1),
        stage_index=fm.stage_index + 1,
    )
    merged_msg = None
    if msg is not None:
        merged_msg = MsgTokens(grid=T.conv2d(msg.grid, weight, bias, stride=2, padding=1))
    return merged, merged_msg
