"""Detection-oriented transformer backbone.

Stage layout (strides relative to the input image)::

    f1  = block1(embed(x))                        stride 8,  C1
    f2  = block2(merge(f1))                       stride 16, C2
    a2  = gca(up(f2) + f1)                        stride 8,  C1
    for i in 3, 4:
        g_i = down(a_{i-1})                       stride 8*2^(i-2), C_{i-1}
        f_i = block_i(merge(g_i))                 stride 8*2^(i-1), C_i
        a_i = gca(up(f_i) + g_i)                  stride of g_i,    C_{i-1}
    outputs = (a2, a3, a4, f4)                    strides 8, 16, 32, 64
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError, DimensionError, ShapeError
from .primitives import (
    AttentionConfig,
    FeatureMap,
    downsample2x,
    gca,
    patch_embed,
    patch_merge,
    upsample2x,
    w_msa,
)
from .params import Scope

OUTPUT_STRIDES = (8, 16, 32, 64)


@dataclass(frozen=True)
class DotStageConfig:
    channels: int
    num_sa_blocks: int = 1
    num_heads: int = 1
    window_size: int = 4
    ffn_ratio: float = 4.0

    def __post_init__(self):
        if self.num_sa_blocks < 1:
            raise ConfigError(f"num_sa_blocks must be >= 1, got {self.num_sa_blocks}")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.channels % self.num_heads:
            raise ConfigError(f"stage channels {self.channels} not divisible by heads {self.num_heads}")

    def attention(self, window: int | None = None) -> AttentionConfig:
        return AttentionConfig(self.num_heads, window or self.window_size, self.ffn_ratio, self.window_size)


@dataclass(frozen=True)
class BackboneConfig:
    stages: tuple[DotStageConfig, ...] = field(
        default_factory=lambda: (
            DotStageConfig(32, 1, 2, 4),
            DotStageConfig(64, 1, 2, 4),
            DotStageConfig(128, 2, 4, 4),
            DotStageConfig(256, 1, 8, 4),
        )
    )
    patch_size: int = 8

    def __post_init__(self):
        if len(self.stages) != 4:
            raise ConfigError(f"backbone needs exactly 4 stages, got {len(self.stages)}")
        widths = [s.channels for s in self.stages]
        if any(a > b for a, b in zip(widths, widths[1:])):
            raise ConfigError(f"non-decreasing channel widths required, got {widths}")
        if self.patch_size != 8:
            raise ConfigError("patch_size must be 8")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(s.channels for s in self.stages)

    @classmethod
    def from_lists(cls, channels, sa_blocks, heads, window_size=4, ffn_ratio=4.0) -> "BackboneConfig":
        stages = tuple(
            DotStageConfig(c, b, h, window_size, ffn_ratio) for c, b, h in zip(channels, sa_blocks, heads)
        )
        return cls(stages)


def stage_window(stage: DotStageConfig, h: int, w: int) -> int:
    """Window actually used on an ``h`` x ``w`` map: clamped to the map size."""
    return min(stage.window_size, h, w)


def check_image_size(cfg: BackboneConfig, height: int, width: int) -> None:
    """Raise DimensionError unless every stage tiles exactly into windows."""
    for axis, size in (("height", height), ("width", width)):
        if size % 64:
            raise DimensionError(f"image {axis} {size} not divisible by 64")
    for i, stage in enumerate(cfg.stages):
        h, w = height // (8 << i), width // (8 << i)
        m = stage_window(stage, h, w)
        for axis, size in (("height", h), ("width", w)):
            if size % m:
                raise DimensionError(
                    f"stage {i + 1} {axis} {size} not divisible by window size {m}"
                )


def dot_block(x: FeatureMap, stage: DotStageConfig, params: Scope) -> FeatureMap:
    """SW-MSA blocks with alternating shift, closed by one global channel-wise block."""
    if x.channels != stage.channels:
        raise ShapeError(f"dot_block expects {stage.channels} channels, got {x.channels}")
    m = stage_window(stage, x.height, x.width)
    cfg = stage.attention(m)
    can_shift = m < min(x.height, x.width)
    for j in range(stage.num_sa_blocks):
        x = w_msa(x, cfg, can_shift and j % 2 == 1, params.scope(f"sa{j}"))
    return gca(x, cfg, params.scope("gca"))


def saa(f_cur: FeatureMap, f_prev: FeatureMap, params: Scope, cfg: AttentionConfig) -> FeatureMap:
    """Upsample the current stage, add the finer map, attend over channels."""
    if f_cur.stride != 2 * f_prev.stride:
        raise ShapeError(
            f"saa needs f_cur stride = 2 x f_prev stride, got {f_cur.stride} and {f_prev.stride}"
        )
    up = upsample2x(f_cur, f_prev.channels, params.scope("up"))
    return gca(f_prev.with_data(up.data + f_prev.data), cfg, params.scope("gca"))


@dataclass
class BackboneOutput:
    f_dot: tuple[FeatureMap, FeatureMap, FeatureMap, FeatureMap]
    trace: dict[str, FeatureMap] = field(default_factory=dict)

    def __iter__(self):
        return iter(self.f_dot)

    def __getitem__(self, i: int) -> FeatureMap:
        return self.f_dot[i]


def forward_backbone(image: FeatureMap, cfg: BackboneConfig, params: Scope) -> BackboneOutput:
    check_image_size(cfg, image.height, image.width)
    st = cfg.stages
    trace: dict[str, FeatureMap] = {}

    f = dot_block(patch_embed(image, st[0].channels, params.scope("stage1.embed")), st[0], params.scope("stage1.block"))
    trace["f1"] = f
    g = f
    for i in range(1, 4):
        sp = params.scope(f"stage{i + 1}")
        if i > 1:
            g = downsample2x(trace[f"a{i}"], st[i - 1].channels, sp.scope("down"))
            trace[f"g{i + 1}"] = g
        f = dot_block(patch_merge(g, st[i].channels, sp.scope("merge")), st[i], sp.scope("block"))
        trace[f"f{i + 1}"] = f
        prev = st[i - 1]
        win = stage_window(prev, g.height, g.width)
        trace[f"a{i + 1}"] = saa(f, g, sp.scope("saa"), prev.attention(win))
    out = (trace["a2"], trace["a3"], trace["a4"], trace["f4"])
    return BackboneOutput(out, trace)
