"""Scale-aggregated and task-aligned encoders on the stride-32 map."""
from __future__ import annotations

from dataclasses import dataclass

from .backbone import OUTPUT_STRIDES, BackboneOutput
from .errors import ConfigError, ShapeError
from .params import Scope
from .primitives import (
    AttentionConfig,
    FeatureMap,
    downsample2x,
    gca,
    group_ca,
    group_ca_block,
    project,
    upsample2x,
)


@dataclass(frozen=True)
class EncoderConfig:
    sae_width: int = 256
    tae_width: int = 512
    num_group_blocks: int = 2
    num_global_blocks: int = 1
    sae_heads: int = 8
    tae_heads: int = 8
    ffn_ratio: float = 4.0

    def __post_init__(self):
        if self.tae_width % 2:
            raise ConfigError(f"tae_width must be even, got {self.tae_width}")
        if self.num_group_blocks < 1:
            raise ConfigError("num_group_blocks must be >= 1")
        if self.num_global_blocks < 1:
            raise ConfigError("num_global_blocks must be >= 1")
        if self.sae_width % self.sae_heads:
            raise ConfigError(f"sae_width {self.sae_width} not divisible by sae_heads {self.sae_heads}")
        if self.tae_width % self.tae_heads or (self.tae_width // 2) % self.tae_heads:
            raise ConfigError(f"tae_width {self.tae_width} (and its half) must be divisible by tae_heads {self.tae_heads}")

    @property
    def cls_width(self) -> int:
        return self.tae_width // 2

    @property
    def reg_width(self) -> int:
        return self.tae_width

    def sae_attention(self) -> AttentionConfig:
        return AttentionConfig(self.sae_heads, 1, self.ffn_ratio)

    def tae_attention(self) -> AttentionConfig:
        return AttentionConfig(self.tae_heads, 1, self.ffn_ratio)


def sae(f_dot: BackboneOutput | tuple, cfg: EncoderConfig, params: Scope) -> FeatureMap:
    """Collapse the four backbone scales into one stride-32 map."""
    f1, f2, f3, f4 = tuple(f_dot)
    strides = (f1.stride, f2.stride, f3.stride, f4.stride)
    if strides != OUTPUT_STRIDES:
        raise ShapeError(f"sae expects strides {OUTPUT_STRIDES}, got {strides}")
    d = cfg.sae_width
    att = cfg.sae_attention()
    s0 = project(f1, d, params.scope("proj1"))
    lat2 = project(f2, d, params.scope("proj2"))
    s1 = gca(lat2.with_data(downsample2x(s0, d, params.scope("down1")).data + lat2.data), att, params.scope("block1"))
    lat3 = project(f3, d, params.scope("proj3"))
    s2 = gca(lat3.with_data(downsample2x(s1, d, params.scope("down2")).data + lat3.data), att, params.scope("block2"))
    up4 = upsample2x(f4, d, params.scope("up4"))
    return gca(s2.with_data(s2.data + up4.data), att, params.scope("block3"))


def tae(s_sae: FeatureMap, cfg: EncoderConfig, params: Scope) -> tuple[FeatureMap, FeatureMap]:
    """Align and split the aggregated map into classification / regression features."""
    if s_sae.stride != 32:
        raise ShapeError(f"tae expects a stride-32 input, got stride {s_sae.stride}")
    att = cfg.tae_attention()
    x = project(s_sae, cfg.tae_width, params.scope("expand"))
    for j in range(cfg.num_group_blocks - 1):
        x = group_ca_block(x, att, params.scope(f"group{j}"))
    t_cls, t2 = group_ca(x, att, params.scope(f"group{cfg.num_group_blocks - 1}"))
    for j in range(cfg.num_global_blocks):
        last = j == cfg.num_global_blocks - 1
        t2 = gca(t2, att, params.scope(f"global{j}"), c_out=cfg.reg_width if last else None)
    return t_cls, t2
