"""Hierarchical model assembly: patch embedding, four windowed-attention
stages with per-stage shuffle sizes, shared-weight token merging between
stages, and the classification head over messenger tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np

from . import blocks as B
from . import tensor as T
from . import windows as W
from .errors import ConfigError, ShapeError
from .tensor import Tensor

NUM_STAGES = 4
PATCH_KERNEL, PATCH_STRIDE, PATCH_PAD = 7, 4, 3
MERGE_KERNEL, MERGE_STRIDE, MERGE_PAD = 3, 2, 1


@dataclass(frozen=True)
class StageConfig:
    dim: int
    num_heads: int
    num_blocks: int
    shuffle_size: int
    window_size: int


@dataclass(frozen=True)
class ArchConfig:
    stages: tuple[StageConfig, ...]
    input_size: int
    num_classes: int
    task: str = "cls"  # "cls" | "det-backbone"
    use_msg: bool = True
    manipulation: str = "shuffle"
    drop_path_rate: float = 0.0

    def validate(self) -> None:
        if len(self.stages) != NUM_STAGES:
            raise ConfigError(f"expected {NUM_STAGES} stages, got {len(self.stages)}")
        if self.task not in ("cls", "det-backbone"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.manipulation not in B.MODES:
            raise ConfigError(f"unknown manipulation mode {self.manipulation!r}")
        for i, s in enumerate(self.stages, start=1):
            if s.dim % s.num_heads:
                raise ConfigError(f"stage {i}: dim {s.dim} not divisible by {s.num_heads} heads")
            if s.shuffle_size < 1:
                raise ConfigError(f"stage {i}: shuffle size must be >= 1, got {s.shuffle_size}")
            if s.dim % (s.shuffle_size**2):
                raise ConfigError(
                    f"stage {i}: dim {s.dim} not divisible by shuffle size squared "
                    f"{s.shuffle_size**2}"
                )
            if s.window_size < 1:
                raise ConfigError(f"stage {i}: window size must be >= 1")
        for i in range(1, NUM_STAGES):
            if self.stages[i].dim != 2 * self.stages[i - 1].dim:
                raise ConfigError(
                    f"stage {i + 1} dim {self.stages[i].dim} must double stage {i} "
                    f"dim {self.stages[i - 1].dim}"
                )
        if self.input_size < PATCH_KERNEL:
            raise ConfigError(f"input size {self.input_size} smaller than patch kernel {PATCH_KERNEL}")


def _stages(dims, heads, depths, shuffles, window) -> tuple[StageConfig, ...]:
    return tuple(
        StageConfig(dim=d, num_heads=h, num_blocks=n, shuffle_size=r, window_size=window)
        for d, h, n, r in zip(dims, heads, depths, shuffles)
    )


def tiny_config(num_classes: int = 1000, task: str = "cls") -> ArchConfig:
    shuffles = (4, 4, 2, 1) if task == "cls" else (4, 4, 8, 4)
    return ArchConfig(
        stages=_stages((64, 128, 256, 512), (2, 4, 8, 16), (2, 4, 12, 4), shuffles, 7),
        input_size=224,
        num_classes=num_classes,
        task=task,
    )


def small_config(num_classes: int = 1000, task: str = "cls") -> ArchConfig:
    shuffles = (4, 4, 2, 1) if task == "cls" else (4, 4, 8, 4)
    return ArchConfig(
        stages=_stages((96, 192, 384, 768), (3, 6, 12, 24), (2, 4, 12, 4), shuffles, 7),
        input_size=224,
        num_classes=num_classes,
        task=task,
    )


def base_config(num_classes: int = 1000, task: str = "cls") -> ArchConfig:
    shuffles = (4, 4, 2, 1) if task == "cls" else (4, 4, 8, 4)
    return ArchConfig(
        stages=_stages((96, 192, 384, 768), (3, 6, 12, 24), (2, 4, 28, 4), shuffles, 7),
        input_size=224,
        num_classes=num_classes,
        task=task,
    )


def micro_config(num_classes: int = 4, task: str = "cls", **overrides) -> ArchConfig:
    """Desk-scale config: stage-4 resolution (4x4) equals the window size."""
    cfg = ArchConfig(
        stages=_stages((16, 32, 64, 128), (1, 2, 4, 8), (1, 1, 2, 1), (2, 2, 2, 1), 4),
        input_size=128,
        num_classes=num_classes,
        task=task,
    )
    return replace(cfg, **overrides) if overrides else cfg


PRESETS = {"tiny": tiny_config, "small": small_config, "base": base_config, "micro": micro_config}


# -- initialization -------------------------------------------------------------


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled until all draws fall within two deviations."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def make_block_params(
    rng: np.random.Generator,
    channels: int,
    num_heads: int,
    window_size: int,
    mode: str = "shuffle",
    drop_path_rate: float = 0.0,
    dtype=np.float32,
    std: float = 0.02,
    use_msg: bool = True,
) -> B.BlockParams:
    """Fresh block parameters: trunc-normal projections, zero biases and bias tables."""

    def proj(*shape):
        return Tensor(trunc_normal(rng, shape, std, dtype), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    span = 2 * window_size - 1
    return B.BlockParams(
        norm1_gamma=ones(channels),
        norm1_beta=zeros(channels),
        attn=B.AttentionParams(
            qkv_weight=proj(channels, 3 * channels),
            qkv_bias=zeros(3 * channels),
            out_weight=proj(channels, channels),
            out_bias=zeros(channels),
            num_heads=num_heads,
        ),
        bias=B.RelPosBias(
            window_size=window_size,
            table=zeros(num_heads, span, span),
            msg_query_bias=zeros(num_heads) if use_msg else None,
            msg_key_bias=zeros(num_heads) if use_msg else None,
        ),
        norm2_gamma=ones(channels),
        norm2_beta=zeros(channels),
        mlp_w1=proj(channels, 4 * channels),
        mlp_b1=zeros(4 * channels),
        mlp_w2=proj(4 * channels, channels),
        mlp_b2=zeros(channels),
        mode=mode,
        drop_path_rate=drop_path_rate,
    )


@dataclass
class Model:
    """All learnable state plus the architecture it instantiates."""

    config: ArchConfig
    dtype: type
    embed_weight: Tensor
    embed_bias: Tensor
    msg_input: Optional[Tensor]  # (R1, R1, C1), tiled across shuffle regions
    stages: list[list[B.BlockParams]]
    merge_weights: list[Tensor]
    merge_biases: list[Tensor]
    head_norm_gamma: Tensor
    head_norm_beta: Tensor
    head_weight: Tensor
    head_bias: Tensor
    _names: list[tuple[str, Tensor]] = field(default_factory=list, repr=False)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        if not self._names:
            items: list[tuple[str, Tensor]] = [
                ("embed.weight", self.embed_weight),
                ("embed.bias", self.embed_bias),
            ]
            if self.msg_input is not None:
                items.append(("msg_input", self.msg_input))
            for si, stage in enumerate(self.stages, start=1):
                for bi, blk in enumerate(stage):
                    prefix = f"stage{si}.block{bi}"
                    items += [
                        (f"{prefix}.norm1.gamma", blk.norm1_gamma),
                        (f"{prefix}.norm1.beta", blk.norm1_beta),
                        (f"{prefix}.attn.qkv_weight", blk.attn.qkv_weight),
                        (f"{prefix}.attn.qkv_bias", blk.attn.qkv_bias),
                        (f"{prefix}.attn.out_weight", blk.attn.out_weight),
                        (f"{prefix}.attn.out_bias", blk.attn.out_bias),
                        (f"{prefix}.bias.table", blk.bias.table),
                    ]
                    if blk.bias.msg_query_bias is not None:
                        items += [
                            (f"{prefix}.bias.msg_query", blk.bias.msg_query_bias),
                            (f"{prefix}.bias.msg_key", blk.bias.msg_key_bias),
                        ]
                    items += [
                        (f"{prefix}.norm2.gamma", blk.norm2_gamma),
                        (f"{prefix}.norm2.beta", blk.norm2_beta),
                        (f"{prefix}.mlp.w1", blk.mlp_w1),
                        (f"{prefix}.mlp.b1", blk.mlp_b1),
                        (f"{prefix}.mlp.w2", blk.mlp_w2),
                        (f"{prefix}.mlp.b2", blk.mlp_b2),
                    ]
            for mi, (w, b) in enumerate(zip(self.merge_weights, self.merge_biases), start=1):
                items += [(f"merge{mi}.weight", w), (f"merge{mi}.bias", b)]
            items += [
                ("head.norm.gamma", self.head_norm_gamma),
                ("head.norm.beta", self.head_norm_beta),
                ("head.weight", self.head_weight),
                ("head.bias", self.head_bias),
            ]
            self._names = items
        return self._names

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def build_model(
    cfg: ArchConfig,
    seed: int,
    dtype=np.float32,
    msg_policy: str = "learnable",
) -> Model:
    """Deterministically initialize a model from ``seed``.

    ``msg_policy`` is "learnable" (default) or "frozen-random": the latter
    keeps the same random draw for the input messenger tokens but excludes
    them from training.
    """
    cfg.validate()
    if msg_policy not in ("learnable", "frozen-random"):
        raise ConfigError(f"unknown msg_policy {msg_policy!r}")
    rng = np.random.default_rng(seed)

    def proj(*shape):
        return Tensor(trunc_normal(rng, shape, 0.02, dtype), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    c1 = cfg.stages[0].dim
    embed_weight = proj(PATCH_KERNEL, PATCH_KERNEL, 3, c1)
    embed_bias = zeros(c1)

    msg_input = None
    if cfg.use_msg:
        r1 = cfg.stages[0].shuffle_size
        msg_input = Tensor(
            trunc_normal(rng, (r1, r1, c1), 0.02, dtype),
            requires_grad=(msg_policy == "learnable"),
        )

    stages = []
    for s in cfg.stages:
        stages.append(
            [
                make_block_params(
                    rng,
                    s.dim,
                    s.num_heads,
                    s.window_size,
                    mode=cfg.manipulation,
                    drop_path_rate=cfg.drop_path_rate,
                    dtype=dtype,
                    use_msg=cfg.use_msg,
                )
                for _ in range(s.num_blocks)
            ]
        )

    merge_weights, merge_biases = [], []
    for i in range(NUM_STAGES - 1):
        cin, cout = cfg.stages[i].dim, cfg.stages[i + 1].dim
        merge_weights.append(proj(MERGE_KERNEL, MERGE_KERNEL, cin, cout))
        merge_biases.append(zeros(cout))

    c4 = cfg.stages[-1].dim
    return Model(
        config=cfg,
        dtype=dtype,
        embed_weight=embed_weight,
        embed_bias=embed_bias,
        msg_input=msg_input,
        stages=stages,
        merge_weights=merge_weights,
        merge_biases=merge_biases,
        head_norm_gamma=ones(c4),
        head_norm_beta=zeros(c4),
        head_weight=proj(c4, cfg.num_classes),
        head_bias=zeros(cfg.num_classes),
    )


def rerandomize_msg_input(model: Model, seed: int) -> None:
    """Re-sample the input messenger tokens from the init distribution."""
    if model.msg_input is None:
        raise ConfigError("model was built without messenger tokens")
    rng = np.random.default_rng(seed)
    model.msg_input.data = trunc_normal(rng, model.msg_input.shape, 0.02, model.dtype)


# -- forward --------------------------------------------------------------------


def patch_embed(model: Model, images: Tensor) -> W.FeatureMap:
    """Project (B, H, W, 3) pixels to stage-1 tokens with a 7x7 stride-4 conv."""
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ShapeError(f"expected (B, H, W, 3) images, got {images.shape}")
    if images.shape[1] < PATCH_KERNEL or images.shape[2] < PATCH_KERNEL:
        raise ConfigError(f"input {images.shape[1]}x{images.shape[2]} smaller than patch kernel")
    tokens = T.conv2d(images, model.embed_weight, model.embed_bias, PATCH_STRIDE, PATCH_PAD)
    return W.FeatureMap(tokens=tokens, stage_index=1)


@lru_cache(maxsize=None)
def _msg_tile_index(grid_h: int, grid_w: int, tile: int, channels: int) -> np.ndarray:
    rows = np.arange(grid_h) % tile
    cols = np.arange(grid_w) % tile
    idx = (
        (rows[:, None, None] * tile + cols[None, :, None]) * channels
        + np.arange(channels)[None, None, :]
    )
    return idx.reshape(-1)


def _initial_msg(model: Model, grid: tuple[int, int], batch: int) -> W.MsgTokens:
    gh, gw = grid
    r1 = model.config.stages[0].shuffle_size
    c1 = model.config.stages[0].dim
    flat = T.reshape(model.msg_input, (r1 * r1 * c1,))
    tiled = T.reshape(T.gather_last(flat, _msg_tile_index(gh, gw, r1, c1)), (1, gh, gw, c1))
    if batch > 1:
        tiled = T.add(tiled, Tensor(np.zeros((batch, 1, 1, 1), dtype=model.dtype)))
    return W.MsgTokens(grid=tiled)


def forward(
    model: Model,
    images: Tensor,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
    stage_trace: Optional[list] = None,
):
    """Run the full hierarchy.

    Classification returns (B, num_classes) logits from the pooled final
    messenger tokens; det-backbone mode returns the four per-stage patch
    feature maps at strides 4/8/16/32 instead. ``stage_trace``, when given,
    collects one (window_grid, msg_grid) pair per stage.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"unknown mode {mode!r}")
    training = mode == "train"
    cfg = model.config
    fm = patch_embed(model, images)
    batch = images.shape[0]

    msg: Optional[W.MsgTokens] = None
    stage_outputs: list[W.FeatureMap] = []
    for si, scfg in enumerate(cfg.stages):
        fm.stage_index = si + 1
        padded, extents = W.pad_to_window_multiple(fm, scfg.window_size)
        wt = W.partition_windows(padded, scfg.window_size)
        grid = wt.grid_shape
        if cfg.use_msg:
            if si == 0:
                msg = _initial_msg(model, grid, batch)
            elif msg.grid_shape != grid:
                raise ShapeError(
                    f"stage {si + 1}: messenger grid {msg.grid_shape} != window grid {grid}"
                )
        for bi, blk in enumerate(model.stages[si]):
            anchor = W.TOP_LEFT
            if cfg.task == "det-backbone" and bi % 2 == 1:
                anchor = W.BOTTOM_RIGHT
            view = W.build_region_view(grid, scfg.shuffle_size, anchor, strict=False)
            wt, msg = B.block_forward(wt, msg, blk, view, training=training, rng=rng)
        fm = W.crop_to(W.reverse_windows(wt), extents)
        fm.stage_index = si + 1
        stage_outputs.append(fm)
        if si < NUM_STAGES - 1:
            fm, msg = W.merge_tokens(fm, msg, model.merge_weights[si], model.merge_biases[si])

    if cfg.task == "det-backbone":
        return stage_outputs

    if cfg.use_msg:
        pooled = T.tmean(msg.grid, axis=(1, 2))  # (B, C4): mean over remaining messengers
    else:
        pooled = T.tmean(fm.tokens, axis=(1, 2))  # messenger-free ablation pools patches
    pooled = T.layer_norm(pooled, model.head_norm_gamma, model.head_norm_beta)
    return T.linear(pooled, model.head_weight, model.head_bias)


# -- accounting -------------------------------------------------------------------


def count_params(model: Model) -> dict[str, int]:
    """Exact scalar counts, reported with and without the input messenger tokens.

    ``msg_related`` additionally counts the per-block messenger bias scalars.
    """
    msg_count = 0 if model.msg_input is None else model.msg_input.size
    total = 0
    msg_related = msg_count
    for name, t in model.named_parameters():
        total += t.size
        if ".bias.msg_" in name:
            msg_related += t.size
    return {
        "total": total,
        "msg_input": msg_count,
        "without_msg_input": total - msg_count,
        "msg_related": msg_related,
    }
