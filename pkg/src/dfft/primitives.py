"""Differentiable building blocks over channels-last feature maps.

Every op is a pure function of its input and the parameters it fetches from a
:class:`~dfft.params.Scope`. All matrix products go through :func:`linear` or
:func:`matmul` so that an active :func:`mac_counter` sees every multiply-add.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn.functional as F

from .errors import ConfigError, DimensionError
from .params import Scope

__all__ = [
    "FeatureMap",
    "AttentionConfig",
    "mac_counter",
    "linear",
    "matmul",
    "patch_embed",
    "patch_merge",
    "upsample2x",
    "downsample2x",
    "project",
    "ffn",
    "w_msa",
    "gca",
    "group_ca",
    "group_ca_block",
]


@dataclass
class FeatureMap:
    data: torch.Tensor  # (batch, height, width, channels)
    stride: int

    def __post_init__(self):
        if self.data.dim() != 4:
            raise DimensionError(f"feature map must be 4-D (N,H,W,C), got shape {tuple(self.data.shape)}")
        if min(self.data.shape) < 1:
            raise DimensionError(f"feature map has an empty axis: {tuple(self.data.shape)}")
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.data.shape)

    def with_data(self, data: torch.Tensor, stride: int | None = None) -> "FeatureMap":
        return FeatureMap(data, self.stride if stride is None else stride)

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.data).all())


@dataclass(frozen=True)
class AttentionConfig:
    num_heads: int = 1
    window_size: int = 7
    ffn_ratio: float = 4.0
    # window the relative bias table is sized for; a clamped window indexes its centre
    bias_window: int | None = None

    def __post_init__(self):
        if self.num_heads < 1:
            raise ConfigError(f"num_heads must be >= 1, got {self.num_heads}")
        if self.window_size < 1:
            raise ConfigError(f"window_size must be >= 1, got {self.window_size}")
        if self.ffn_ratio <= 0:
            raise ConfigError(f"ffn_ratio must be positive, got {self.ffn_ratio}")
        if self.bias_window is not None and self.bias_window < self.window_size:
            raise ConfigError(
                f"bias_window {self.bias_window} smaller than window_size {self.window_size}"
            )

    def head_dim(self, channels: int) -> int:
        if channels % self.num_heads:
            raise ConfigError(f"channels {channels} not divisible by num_heads {self.num_heads}")
        return channels // self.num_heads


# --------------------------------------------------------------------------
# multiply-accumulate instrumentation

_counters: list[list[int]] = []


@contextlib.contextmanager
def mac_counter():
    """Count multiply-adds executed by :func:`linear` and :func:`matmul`.

    Yields a one-element list holding the running count.
    """
    box = [0]
    _counters.append(box)
    try:
        yield box
    finally:
        _counters.remove(box)


def _tally(n: int) -> None:
    for box in _counters:
        box[0] += int(n)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    c_in, c_out = weight.shape
    _tally(x.numel() // c_in * c_in * c_out)
    y = x @ weight
    return y if bias is None else y + bias


def grouped_linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Block-diagonal linear map. ``weight`` is (groups, in/groups, out/groups)."""
    g, c_in, c_out = weight.shape
    xg = x.reshape(*x.shape[:-1], g, c_in)
    _tally(x.numel() // (g * c_in) * g * c_in * c_out)
    y = torch.einsum("...gi,gio->...go", xg, weight).reshape(*x.shape[:-1], g * c_out)
    return y if bias is None else y + bias


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    m, k = a.shape[-2:]
    n = b.shape[-1]
    batch = torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    _tally(math.prod(batch) * m * k * n)
    return a @ b


def _softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return F.softmax(x, dim=dim, dtype=torch.float64).to(x.dtype)


def _layer_norm(x: torch.Tensor, p: Scope, name: str) -> torch.Tensor:
    c = x.shape[-1]
    w = p.get(f"{name}.weight", (c,), "ones")
    b = p.get(f"{name}.bias", (c,), "zeros")
    return F.layer_norm(x, (c,), w, b, eps=1e-5)


def _group_layer_norm(x: torch.Tensor, p: Scope, name: str, groups: int = 2) -> torch.Tensor:
    c = x.shape[-1]
    cg = c // groups
    w = p.get(f"{name}.weight", (groups, cg), "ones")
    b = p.get(f"{name}.bias", (groups, cg), "zeros")
    xg = x.reshape(*x.shape[:-1], groups, cg)
    y = F.layer_norm(xg, (cg,), eps=1e-5) * w + b
    return y.reshape(x.shape)


def _dense(x: torch.Tensor, p: Scope, name: str, c_out: int, bias: bool = True) -> torch.Tensor:
    w = p.get(f"{name}.weight", (x.shape[-1], c_out))
    b = p.get(f"{name}.bias", (c_out,), "zeros") if bias else None
    return linear(x, w, b)


# --------------------------------------------------------------------------
# resolution changes


def patch_embed(image: FeatureMap, c1: int, params: Scope, patch: int = 8) -> FeatureMap:
    """Linear embedding of non-overlapping ``patch``x``patch`` RGB patches.

    Each patch is flattened in (row, column, channel) order before projection.
    """
    n, h, w, c = image.shape
    if h % patch:
        raise DimensionError(f"image height {h} not divisible by patch size {patch}")
    if w % patch:
        raise DimensionError(f"image width {w} not divisible by patch size {patch}")
    x = image.data.reshape(n, h // patch, patch, w // patch, patch, c)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(n, h // patch, w // patch, patch * patch * c)
    return FeatureMap(_dense(x, params, "proj", c1), image.stride * patch)


def patch_merge(x: FeatureMap, c_out: int, params: Scope) -> FeatureMap:
    """Concatenate each 2x2 neighbourhood (row-major, channels last) and project."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"patch_merge needs even spatial dims, got {h}x{w}")
    y = x.data.reshape(n, h // 2, 2, w // 2, 2, c).permute(0, 1, 3, 2, 4, 5)
    y = y.reshape(n, h // 2, w // 2, 4 * c)
    return FeatureMap(_dense(y, params, "proj", c_out), x.stride * 2)


def upsample2x(x: FeatureMap, c_out: int, params: Scope) -> FeatureMap:
    # nearest replication commutes with a per-cell affine map, so project first
    y = _dense(x.data, params, "proj", c_out)
    y = y.repeat_interleave(2, dim=1).repeat_interleave(2, dim=2)
    return FeatureMap(y, max(1, x.stride // 2))


def downsample2x(x: FeatureMap, c_out: int, params: Scope) -> FeatureMap:
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"downsample2x needs even spatial dims, got {h}x{w}")
    y = x.data.reshape(n, h // 2, 2, w // 2, 2, c).mean(dim=(2, 4))
    return FeatureMap(_dense(y, params, "proj", c_out), x.stride * 2)


def project(x: FeatureMap, c_out: int, params: Scope) -> FeatureMap:
    """1x1 channel projection."""
    return x.with_data(_dense(x.data, params, "proj", c_out))


# --------------------------------------------------------------------------
# residual blocks


def _mlp(x: torch.Tensor, ratio: float, p: Scope, c_out: int | None = None) -> torch.Tensor:
    c = x.shape[-1]
    hidden = int(round(c * ratio))
    h = F.gelu(_dense(x, p, "fc1", hidden))
    return _dense(h, p, "fc2", c_out or c)


def _ffn_tensor(x: torch.Tensor, ratio: float, p: Scope) -> torch.Tensor:
    return x + _mlp(_layer_norm(x, p, "norm"), ratio, p)


def ffn(x: FeatureMap, ratio: float, params: Scope) -> FeatureMap:
    """Pre-norm residual two-layer GELU perceptron applied per cell."""
    return x.with_data(_ffn_tensor(x.data, ratio, params))


@lru_cache(maxsize=64)
def _relative_index(m: int, table_m: int | None = None) -> torch.Tensor:
    table_m = m if table_m is None else table_m
    coords = torch.stack(torch.meshgrid(torch.arange(m), torch.arange(m), indexing="ij")).flatten(1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.permute(1, 2, 0) + (table_m - 1)
    return rel[..., 0] * (2 * table_m - 1) + rel[..., 1]


@lru_cache(maxsize=64)
def _shift_mask(h: int, w: int, m: int, s: int) -> torch.Tensor:
    """Boolean (windows, m*m, m*m) mask, True where a pair crosses a shift seam."""
    region = torch.zeros(h, w, dtype=torch.long)
    label = 0
    for hs in (slice(0, -m), slice(-m, -s), slice(-s, None)):
        for ws in (slice(0, -m), slice(-m, -s), slice(-s, None)):
            region[hs, ws] = label
            label += 1
    win = region.reshape(h // m, m, w // m, m).permute(0, 2, 1, 3).reshape(-1, m * m)
    return win[:, :, None] != win[:, None, :]


def _partition(x: torch.Tensor, m: int) -> torch.Tensor:
    n, h, w, c = x.shape
    x = x.reshape(n, h // m, m, w // m, m, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(n * (h // m) * (w // m), m * m, c)


def _unpartition(x: torch.Tensor, m: int, n: int, h: int, w: int) -> torch.Tensor:
    c = x.shape[-1]
    x = x.reshape(n, h // m, w // m, m, m, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(n, h, w, c)


def w_msa(x: FeatureMap, cfg: AttentionConfig, shifted: bool, params: Scope) -> FeatureMap:
    """(Shifted-)window multi-head self-attention block followed by its FFN."""
    n, h, w, c = x.shape
    m = cfg.window_size
    if m > min(h, w):
        raise ConfigError(f"window size {m} exceeds feature map {h}x{w}")
    if h % m:
        raise DimensionError(f"height {h} not divisible by window size {m}")
    if w % m:
        raise DimensionError(f"width {w} not divisible by window size {m}")
    heads = cfg.num_heads
    d = cfg.head_dim(c)
    p = params.scope("attn")
    s = m // 2 if shifted else 0

    y = _layer_norm(x.data, params, "norm1")
    if s:
        y = torch.roll(y, shifts=(-s, -s), dims=(1, 2))
    win = _partition(y, m)  # (n*nw, m*m, c)
    bw, t, _ = win.shape
    qkv = _dense(win, p, "qkv", 3 * c).reshape(bw, t, 3, heads, d).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0] * d**-0.5, qkv[1], qkv[2]
    logits = matmul(q, k.transpose(-2, -1))  # (bw, heads, t, t)

    tm = cfg.bias_window or m
    table = p.get("rel_bias", ((2 * tm - 1) ** 2, heads))
    bias = table[_relative_index(m, tm).reshape(-1)].reshape(t, t, heads).permute(2, 0, 1)
    logits = logits + bias
    if s:
        mask = _shift_mask(h, w, m, s)  # (nw, t, t)
        nw = mask.shape[0]
        logits = logits.reshape(n, nw, heads, t, t)
        logits = logits.masked_fill(mask[None, :, None], float("-inf")).reshape(bw, heads, t, t)
    attn = _softmax(logits)
    out = matmul(attn, v).transpose(1, 2).reshape(bw, t, c)
    out = _dense(out, p, "proj", c)
    out = _unpartition(out, m, n, h, w)
    if s:
        out = torch.roll(out, shifts=(s, s), dims=(1, 2))
    z = x.data + out
    z = _ffn_tensor(z, cfg.ffn_ratio, params.scope("ffn"))
    return x.with_data(z)


def _xca(h: torch.Tensor, cfg: AttentionConfig, p: Scope) -> torch.Tensor:
    """Cross-covariance attention core on (n, tokens, c); returns pre-projection output."""
    n, t, c = h.shape
    heads = cfg.num_heads
    d = cfg.head_dim(c)
    qkv = _dense(h, p, "qkv", 3 * c).reshape(n, t, 3, heads, d).permute(2, 0, 3, 4, 1)
    q, k, v = qkv[0], qkv[1], qkv[2]  # (n, heads, d, t)
    q = F.normalize(q, dim=-1)
    k = F.normalize(k, dim=-1)
    log_tau = p.get("log_temperature", (heads, 1, 1), "zeros")
    attn = _softmax(matmul(q, k.transpose(-2, -1)) * torch.exp(log_tau))  # (n, heads, d, d)
    out = matmul(attn, v)  # (n, heads, d, t)
    return out.permute(0, 3, 1, 2).reshape(n, t, c)


def gca(x: FeatureMap, cfg: AttentionConfig, params: Scope, c_out: int | None = None) -> FeatureMap:
    """Global channel-wise (cross-covariance) attention block followed by its FFN.

    With ``c_out`` different from the input width, the output projection widens
    the stream and a learned 1x1 shortcut carries the residual.
    """
    n, h, w, c = x.shape
    cfg.head_dim(c)
    c_out = c_out or c
    p = params.scope("attn")
    tokens = x.data.reshape(n, h * w, c)
    core = _xca(_layer_norm(tokens, params, "norm1"), cfg, p)
    out = _dense(core, p, "proj", c_out)
    if c_out == c:
        z = tokens + out
    else:
        z = _dense(tokens, params, "shortcut", c_out) + out
    z = _ffn_tensor(z, cfg.ffn_ratio, params.scope("ffn"))
    return x.with_data(z.reshape(n, h, w, c_out))


def group_ca_block(x: FeatureMap, cfg: AttentionConfig, params: Scope) -> FeatureMap:
    """Channel-wise attention with shared Q/K/V and two-group output/FFN weights.

    Returns the full-width map (both groups concatenated along channels).
    """
    n, h, w, c = x.shape
    if c % 2:
        raise ConfigError(f"group channel-wise attention needs an even channel count, got {c}")
    cfg.head_dim(c)
    half = c // 2
    p = params.scope("attn")
    tokens = x.data.reshape(n, h * w, c)
    core = _xca(_layer_norm(tokens, params, "norm1"), cfg, p)
    wo = p.get("proj.weight", (2, half, half))
    bo = p.get("proj.bias", (c,), "zeros")
    z = tokens + grouped_linear(core, wo, bo)

    f = params.scope("ffn")
    hidden = int(round(half * cfg.ffn_ratio))
    u = _group_layer_norm(z, f, "norm")
    u = F.gelu(grouped_linear(u, f.get("fc1.weight", (2, half, hidden)), f.get("fc1.bias", (2 * hidden,), "zeros")))
    u = grouped_linear(u, f.get("fc2.weight", (2, hidden, half)), f.get("fc2.bias", (c,), "zeros"))
    z = z + u
    return x.with_data(z.reshape(n, h, w, c))


def group_ca(x: FeatureMap, cfg: AttentionConfig, params: Scope) -> tuple[FeatureMap, FeatureMap]:
    y = group_ca_block(x, cfg, params)
    half = y.channels // 2
    return y.with_data(y.data[..., :half]), y.with_data(y.data[..., half:])
