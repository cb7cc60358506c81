"""Analytic multiply-accumulate (MAC) model.

Conventions: 1 MAC is reported as 1 FLOP; normalization, softmax, activations,
bias adds, pooling and the relative-position bias add are not counted.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .backbone import check_image_size, stage_window
from .config import ModelConfig
from .errors import ConfigError, DimensionError

GROUPS = ("backbone", "sae", "tae", "head")


def _ffn_hidden(c: int, ratio: float) -> int:
    return int(round(c * ratio))


def macs_linear(n_cells: int, c_in: int, c_out: int) -> int:
    return n_cells * c_in * c_out


def macs_patch_embed(h: int, w: int, c1: int, patch: int = 8) -> int:
    """``h``, ``w``: image size."""
    return macs_linear((h // patch) * (w // patch), patch * patch * 3, c1)


def macs_patch_merge(h: int, w: int, c_in: int, c_out: int) -> int:
    """``h``, ``w``: input map size."""
    return macs_linear((h // 2) * (w // 2), 4 * c_in, c_out)


def macs_upsample(h: int, w: int, c_in: int, c_out: int) -> int:
    """Projection runs before replication, on the ``h`` x ``w`` input cells."""
    return macs_linear(h * w, c_in, c_out)


def macs_downsample(h: int, w: int, c_in: int, c_out: int) -> int:
    return macs_linear((h // 2) * (w // 2), c_in, c_out)


def macs_ffn(n_cells: int, c: int, ratio: float) -> int:
    return 2 * n_cells * c * _ffn_hidden(c, ratio)


def macs_wmsa(h: int, w: int, C: int, M: int, ratio: float) -> int:
    """Window attention block incl. its FFN: 4hwC^2 + 2M^2hwC + 2*ratio*hwC^2."""
    if h % M or w % M:
        raise DimensionError(f"{h}x{w} map not divisible by window {M}")
    n = h * w
    return 4 * n * C * C + 2 * M * M * n * C + macs_ffn(n, C, ratio)


def macs_gca(n_cells: int, C: int, heads: int, ratio: float, c_out: int | None = None) -> int:
    """Channel-attention block incl. its FFN: 4nC^2 + 2nC^2/heads + 2*ratio*nC^2.

    With a widening ``c_out`` the output projection and the 1x1 shortcut each
    cost n*C*c_out and the FFN runs at width ``c_out``.
    """
    if C % heads:
        raise ConfigError(f"channels {C} not divisible by heads {heads}")
    n = n_cells
    attn = 2 * n * C * C // heads
    if c_out is None or c_out == C:
        return 4 * n * C * C + attn + macs_ffn(n, C, ratio)
    return 3 * n * C * C + 2 * n * C * c_out + attn + macs_ffn(n, c_out, ratio)


def macs_group_ca(n_cells: int, C: int, heads: int, ratio: float) -> int:
    """Shared QKV (3nC^2), two-group output projection and FFN, channel attention."""
    if C % heads:
        raise ConfigError(f"channels {C} not divisible by heads {heads}")
    n = n_cells
    half = C // 2
    return 3 * n * C * C + 2 * n * half * half + 2 * n * C * C // heads + 2 * macs_ffn(n, half, ratio)


@dataclass
class FlopsEntry:
    name: str
    group: str
    macs: int


@dataclass
class FlopsReport:
    entries: list[FlopsEntry] = field(default_factory=list)
    header: str = "1 MAC = 1 FLOP; norms, softmax, activations and bias adds excluded"

    def add(self, name: str, group: str, macs: int) -> None:
        if macs < 0:
            raise ValueError(f"negative MAC count for {name}")
        self.entries.append(FlopsEntry(name, group, int(macs)))

    @property
    def total(self) -> int:
        return sum(e.macs for e in self.entries)

    def by_group(self) -> dict[str, int]:
        out = {g: 0 for g in GROUPS}
        for e in self.entries:
            out[e.group] = out.get(e.group, 0) + e.macs
        return out

    def rows(self) -> list[tuple[str, int]]:
        return [(e.name, e.macs) for e in self.entries]

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["name", "macs"])
        wr.writerows(self.rows())
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"# {self.header}"]
        width = max((len(e.name) for e in self.entries), default=4)
        for e in self.entries:
            lines.append(f"{e.name:<{width}}  {e.macs:>14,d}")
        lines.append("")
        for g, m in self.by_group().items():
            lines.append(f"{g:<{width}}  {m:>14,d}  ({m / 1e9:.3f} GFLOPs)")
        lines.append(f"{'total':<{width}}  {self.total:>14,d}  ({self.total / 1e9:.3f} GFLOPs)")
        return "\n".join(lines)


def _dot_block(rep: FlopsReport, name: str, stage, h: int, w: int) -> None:
    m = stage_window(stage, h, w)
    for j in range(stage.num_sa_blocks):
        rep.add(f"{name}.sa{j}", "backbone", macs_wmsa(h, w, stage.channels, m, stage.ffn_ratio))
    rep.add(f"{name}.gca", "backbone", macs_gca(h * w, stage.channels, stage.num_heads, stage.ffn_ratio))


def _backbone(rep: FlopsReport, cfg: ModelConfig, H: int, W: int) -> list[tuple[int, int, int]]:
    """Adds backbone nodes; returns (h, w, channels) of the four outputs."""
    st = cfg.backbone.stages
    rep.add("backbone.stage1.embed", "backbone", macs_patch_embed(H, W, st[0].channels))
    h, w = H // 8, W // 8
    _dot_block(rep, "backbone.stage1.block", st[0], h, w)
    outs = []
    gh, gw, gc = h, w, st[0].channels
    for i in range(1, 4):
        name = f"backbone.stage{i + 1}"
        if i > 1:
            rep.add(f"{name}.down", "backbone", macs_downsample(gh * 2, gw * 2, st[i - 2].channels, st[i - 1].channels))
        rep.add(f"{name}.merge", "backbone", macs_patch_merge(gh, gw, gc, st[i].channels))
        fh, fw = gh // 2, gw // 2
        _dot_block(rep, f"{name}.block", st[i], fh, fw)
        rep.add(f"{name}.saa.up", "backbone", macs_upsample(fh, fw, st[i].channels, gc))
        prev = st[i - 1]
        rep.add(f"{name}.saa.gca", "backbone", macs_gca(gh * gw, gc, prev.num_heads, prev.ffn_ratio))
        outs.append((gh, gw, gc))
        # next stage consumes down(saa output)
        gh, gw, gc = gh // 2, gw // 2, st[i].channels
    outs.append((H // 64, W // 64, st[3].channels))
    return outs


def macs_neck_head(cfg: ModelConfig, outs: list[tuple[int, int, int]], rep: FlopsReport | None = None) -> FlopsReport:
    rep = rep if rep is not None else FlopsReport()
    e = cfg.encoder
    d = e.sae_width
    (h1, w1, c1), (h2, w2, c2), (h3, w3, c3), (h4, w4, c4) = outs
    rep.add("sae.proj1", "sae", macs_linear(h1 * w1, c1, d))
    rep.add("sae.proj2", "sae", macs_linear(h2 * w2, c2, d))
    rep.add("sae.down1", "sae", macs_downsample(h1, w1, d, d))
    rep.add("sae.block1", "sae", macs_gca(h2 * w2, d, e.sae_heads, e.ffn_ratio))
    rep.add("sae.proj3", "sae", macs_linear(h3 * w3, c3, d))
    rep.add("sae.down2", "sae", macs_downsample(h2, w2, d, d))
    rep.add("sae.block2", "sae", macs_gca(h3 * w3, d, e.sae_heads, e.ffn_ratio))
    rep.add("sae.up4", "sae", macs_upsample(h4, w4, c4, d))
    rep.add("sae.block3", "sae", macs_gca(h3 * w3, d, e.sae_heads, e.ffn_ratio))

    n = h3 * w3
    rep.add("tae.expand", "tae", macs_linear(n, d, e.tae_width))
    for j in range(e.num_group_blocks):
        rep.add(f"tae.group{j}", "tae", macs_group_ca(n, e.tae_width, e.tae_heads, e.ffn_ratio))
    half = e.tae_width // 2
    for j in range(e.num_global_blocks):
        c_out = e.reg_width if j == e.num_global_blocks - 1 else None
        rep.add(f"tae.global{j}", "tae", macs_gca(n, half, e.tae_heads, e.ffn_ratio, c_out))

    K = cfg.head.K
    rep.add("head.cls", "head", macs_linear(n, e.cls_width, K * cfg.num_classes))
    rep.add("head.reg", "head", macs_linear(n, e.reg_width, K * 4))
    return rep


def macs_model(cfg: ModelConfig, image_h: int, image_w: int) -> FlopsReport:
    """Per-node MACs for one image through backbone, SAE, TAE and the head."""
    check_image_size(cfg.backbone, image_h, image_w)
    rep = FlopsReport()
    outs = _backbone(rep, cfg, image_h, image_w)
    return macs_neck_head(cfg, outs, rep)


def macs_multilevel_head(levels: list[tuple[int, int, int]], num_classes: int, K: int,
                         width: int = 256, depth: int = 4, kernel: int = 3) -> int:
    """Conventional pyramid neck + decoupled head over several levels.

    Per level: a 1x1 lateral to ``width``, a ``kernel`` x ``kernel`` output
    conv, two towers of ``depth`` convs (classification and regression), then
    the two prediction convs.
    """
    kk = kernel * kernel
    total = 0
    for h, w, c in levels:
        n = h * w
        total += n * c * width
        total += n * kk * width * width
        total += 2 * depth * n * kk * width * width
        total += n * kk * width * K * num_classes
        total += n * kk * width * K * 4
    return total


def compare_single_vs_multilevel(cfg: ModelConfig, image_h: int, image_w: int, *,
                                 tower_width: int = 256, tower_depth: int = 4,
                                 kernel: int = 3) -> tuple[int, int, float]:
    """(single-level neck+head MACs, four-level head MACs, ratio) for one image."""
    rep = macs_model(cfg, image_h, image_w)
    groups = rep.by_group()
    single = groups["sae"] + groups["tae"] + groups["head"]
    outs = []
    H, W = image_h, image_w
    for i, c in enumerate(cfg.backbone.channels):
        s = 8 << i
        outs.append((H // s, W // s, c))
    multi = macs_multilevel_head(outs, cfg.num_classes, cfg.head.K, tower_width, tower_depth, kernel)
    return single, multi, single / multi if multi else float("inf")
