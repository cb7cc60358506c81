import numpy as np
import pytest
import torch

from conftest import randomize
from dfft.encoders import EncoderConfig, sae, tae
from dfft.errors import ConfigError, ShapeError
from dfft.params import ParamStore
from dfft.primitives import FeatureMap

SMALL = EncoderConfig(sae_width=8, tae_width=16, num_group_blocks=2, num_global_blocks=2,
                      sae_heads=2, tae_heads=2, ffn_ratio=2.0)


def backbone_like(h=4, w=4, chans=(4, 8, 16, 32), seed=0, n=1):
    rng = np.random.default_rng(seed)
    sizes = [(h * 4 // 2**i, w * 4 // 2**i) for i in range(4)]
    return tuple(
        FeatureMap(torch.from_numpy(rng.normal(size=(n, a, b, c))), s)
        for (a, b), c, s in zip(sizes, chans, (8, 16, 32, 64))
    )


def test_sae_collapses_to_stride_32():
    s = ParamStore(0, torch.float64)
    out = sae(backbone_like(4, 2), SMALL, s.scope("sae"))
    assert out.shape == (1, 4, 2, 8) and out.stride == 32


def test_sae_rejects_wrong_strides():
    feats = list(backbone_like())
    feats[1] = FeatureMap(feats[1].data, 32)
    with pytest.raises(ShapeError):
        sae(tuple(feats), SMALL, ParamStore(0, torch.float64).scope("sae"))


def test_tae_widths_and_scopes():
    s = ParamStore(0, torch.float64)
    x = FeatureMap(torch.randn(2, 3, 3, 8, dtype=torch.float64), 32)
    t_cls, t_reg = tae(x, SMALL, s.scope("tae"))
    assert t_cls.shape == (2, 3, 3, 8) and t_reg.shape == (2, 3, 3, 16)
    assert t_cls.stride == t_reg.stride == 32
    assert "tae.expand.proj.weight" in s and "tae.group0.attn.qkv.weight" in s
    assert "tae.global1.shortcut.weight" in s and "tae.global0.shortcut.weight" not in s


def test_tae_needs_stride_32():
    with pytest.raises(ShapeError):
        tae(FeatureMap(torch.zeros(1, 2, 2, 8), 16), SMALL, ParamStore().scope("t"))


def test_default_widths():
    cfg = EncoderConfig()
    assert (cfg.sae_width, cfg.cls_width, cfg.reg_width) == (256, 256, 512)


def test_config_errors():
    with pytest.raises(ConfigError):
        EncoderConfig(tae_width=15)
    with pytest.raises(ConfigError):
        EncoderConfig(num_group_blocks=0)
    with pytest.raises(ConfigError):
        EncoderConfig(sae_width=10, sae_heads=4)


def _randomized_tae(seed=0):
    s = ParamStore(seed, torch.float64)
    x = FeatureMap(torch.from_numpy(np.random.default_rng(seed).normal(size=(1, 2, 2, 8))), 32)
    tae(x, SMALL, s.scope("tae"))
    s.freeze()
    randomize(s, 0.3, seed)
    return s, x


def test_cls_branch_ignores_last_split_block_second_group():
    s, x = _randomized_tae()
    t_cls, t_reg = tae(x, SMALL, s.scope("tae"))
    last = f"tae.group{SMALL.num_group_blocks - 1}"
    with torch.no_grad():
        for name in ("attn.proj.weight", "ffn.fc1.weight", "ffn.fc2.weight", "ffn.norm.weight"):
            s[f"{last}.{name}"][1] += 1.0
    t_cls2, t_reg2 = tae(x, SMALL, s.scope("tae"))
    assert torch.equal(t_cls2.data, t_cls.data)
    assert not torch.equal(t_reg2.data, t_reg.data)


def test_earlier_group_blocks_couple_the_branches():
    # the shared attention of the next block mixes both halves, so only the
    # split block is block-diagonal with respect to the cls output
    s, x = _randomized_tae()
    t_cls, _ = tae(x, SMALL, s.scope("tae"))
    with torch.no_grad():
        s["tae.group0.attn.proj.weight"][1] += 1.0
    assert not torch.equal(tae(x, SMALL, s.scope("tae"))[0].data, t_cls.data)


def test_cls_loss_sends_no_gradient_to_regression_only_weights():
    s, x = _randomized_tae(1)
    t_cls, _ = tae(x, SMALL, s.scope("tae"))
    (t_cls.data**2).sum().backward()
    for n, t in s.items():
        if n.startswith("tae.global"):
            assert t.grad is None or torch.count_nonzero(t.grad) == 0, n
    assert torch.count_nonzero(s["tae.group1.attn.proj.weight"].grad[1]) == 0
    assert torch.count_nonzero(s["tae.group1.attn.proj.weight"].grad[0]) > 0
