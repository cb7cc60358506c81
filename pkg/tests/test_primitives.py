import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from conftest import as_numpy, randomize
from dfft.errors import ConfigError, DimensionError
from dfft.params import ParamStore
from dfft.primitives import (
    AttentionConfig,
    FeatureMap,
    downsample2x,
    ffn,
    gca,
    group_ca,
    linear,
    patch_embed,
    patch_merge,
    project,
    upsample2x,
    w_msa,
)
from oracles import dense_linear, ffn_oracle, gca_oracle, group_ca_oracle, window_attention_oracle


def fmap(rng, n, h, w, c, stride=8):
    return FeatureMap(torch.from_numpy(rng.normal(size=(n, h, w, c))), stride)


def built(fn, x, seed=0, scale=0.3):
    """Create parameters with a dry run, then randomize them and return (store, output)."""
    s = ParamStore(seed, torch.float64)
    fn(x, s.scope("blk"))
    s.freeze()
    randomize(s, scale, seed)
    return s, fn(x, s.scope("blk"))


# ---------------------------------------------------------------- containers


def test_feature_map_rejects_bad_rank_and_empty_axes():
    with pytest.raises(DimensionError):
        FeatureMap(torch.zeros(2, 3, 4), 1)
    with pytest.raises(DimensionError):
        FeatureMap(torch.zeros(1, 0, 4, 2), 1)


def test_attention_config_validation():
    with pytest.raises(ConfigError):
        AttentionConfig(num_heads=0)
    with pytest.raises(ConfigError):
        AttentionConfig(num_heads=3).head_dim(8)


def test_linear_matches_explicit_loop(rng):
    x = rng.normal(size=(5, 3))
    w = rng.normal(size=(3, 4))
    b = rng.normal(size=4)
    y = linear(torch.from_numpy(x), torch.from_numpy(w), torch.from_numpy(b)).numpy()
    np.testing.assert_allclose(y, dense_linear(x, w, b), rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------- resolution ops


def test_patch_embed_shape_and_flatten_order(rng):
    img = fmap(rng, 2, 16, 24, 3, stride=1)
    s, out = built(lambda x, p: patch_embed(x, 5, p), img)
    assert out.shape == (2, 2, 3, 5) and out.stride == 8
    w = s["blk.proj.weight"].detach().numpy()
    b = s["blk.proj.bias"].detach().numpy()
    x = img.data.numpy()
    for n in range(2):
        for i in range(2):
            for j in range(3):
                vec = [x[n, 8 * i + r, 8 * j + q, ch] for r in range(8) for q in range(8) for ch in range(3)]
                np.testing.assert_allclose(out.data[n, i, j].detach().numpy(), np.array(vec) @ w + b, rtol=1e-10)


def test_patch_embed_rejects_indivisible_image(store, rng):
    with pytest.raises(DimensionError):
        patch_embed(fmap(rng, 1, 12, 16, 3, 1), 4, store.scope("e"))


def test_patch_merge_neighbourhood_order(rng):
    x = fmap(rng, 1, 4, 6, 2)
    s, out = built(lambda f, p: patch_merge(f, 3, p), x)
    assert out.shape == (1, 2, 3, 3) and out.stride == 16
    w = s["blk.proj.weight"].detach().numpy()
    b = s["blk.proj.bias"].detach().numpy()
    a = x.data.numpy()[0]
    for i in range(2):
        for j in range(3):
            vec = np.concatenate([a[2 * i + dy, 2 * j + dx] for dy in range(2) for dx in range(2)])
            np.testing.assert_allclose(out.data[0, i, j].detach().numpy(), vec @ w + b, rtol=1e-10)


def test_patch_merge_rejects_odd_maps(store, rng):
    with pytest.raises(DimensionError):
        patch_merge(fmap(rng, 1, 3, 4, 2), 4, store.scope("m"))


def test_upsample_replicates_projected_cells(rng):
    x = fmap(rng, 2, 3, 2, 4, stride=32)
    s, out = built(lambda f, p: upsample2x(f, 6, p), x)
    assert out.shape == (2, 6, 4, 6) and out.stride == 16
    w, b = s["blk.proj.weight"].detach(), s["blk.proj.bias"].detach()
    cell = x.data @ w + b
    for dy in range(2):
        for dx in range(2):
            torch.testing.assert_close(out.data[:, dy::2, dx::2].detach(), cell, rtol=1e-12, atol=1e-12)


def test_downsample_averages_then_projects(rng):
    x = fmap(rng, 1, 4, 4, 3, stride=8)
    s, out = built(lambda f, p: downsample2x(f, 5, p), x)
    assert out.shape == (1, 2, 2, 5) and out.stride == 16
    w, b = s["blk.proj.weight"].detach(), s["blk.proj.bias"].detach()
    pooled = (x.data[:, 0::2, 0::2] + x.data[:, 1::2, 0::2] + x.data[:, 0::2, 1::2] + x.data[:, 1::2, 1::2]) / 4
    torch.testing.assert_close(out.data.detach(), pooled @ w + b, rtol=1e-12, atol=1e-12)


def test_project_keeps_grid(rng):
    x = fmap(rng, 1, 3, 5, 4, stride=16)
    _, out = built(lambda f, p: project(f, 7, p), x)
    assert out.shape == (1, 3, 5, 7) and out.stride == 16


# ---------------------------------------------------------------- blocks vs oracles


def test_ffn_matches_oracle(rng):
    x = fmap(rng, 1, 2, 3, 4)
    s, out = built(lambda f, p: ffn(f, 2.0, p), x)
    ref = ffn_oracle(x.data.numpy().reshape(-1, 4), as_numpy(s), "blk")
    np.testing.assert_allclose(out.data.detach().numpy().reshape(-1, 4), ref, rtol=1e-9, atol=1e-10)


@pytest.mark.parametrize("heads", [1, 2])
def test_w_msa_unshifted_matches_per_window_oracle(rng, heads):
    m = 2
    cfg = AttentionConfig(num_heads=heads, window_size=m, ffn_ratio=2.0)
    x = fmap(rng, 1, 4, 4, 4)
    s, out = built(lambda f, p: w_msa(f, cfg, False, p), x)
    p = as_numpy(s)
    xa = x.data.numpy()[0]
    ya = out.data.detach().numpy()[0]
    for wi in range(2):
        for wj in range(2):
            win = xa[wi * m:(wi + 1) * m, wj * m:(wj + 1) * m].reshape(-1, 4)
            ref = window_attention_oracle(win, p, "blk", heads, m)
            got = ya[wi * m:(wi + 1) * m, wj * m:(wj + 1) * m].reshape(-1, 4)
            np.testing.assert_allclose(got, ref, rtol=1e-9, atol=1e-10)


def test_w_msa_shifted_interior_window_matches_oracle(rng):
    m, s_ = 4, 2
    cfg = AttentionConfig(num_heads=2, window_size=m, ffn_ratio=2.0)
    x = fmap(rng, 1, 8, 8, 4)
    s, out = built(lambda f, p: w_msa(f, cfg, True, p), x)
    win = x.data.numpy()[0, s_:s_ + m, s_:s_ + m].reshape(-1, 4)
    ref = window_attention_oracle(win, as_numpy(s), "blk", 2, m)
    got = out.data.detach().numpy()[0, s_:s_ + m, s_:s_ + m].reshape(-1, 4)
    np.testing.assert_allclose(got, ref, rtol=1e-9, atol=1e-10)


def test_clamped_window_reads_centre_of_full_bias_table(rng):
    big, m = 4, 2
    cfg = AttentionConfig(num_heads=2, window_size=m, ffn_ratio=2.0, bias_window=big)
    x = fmap(rng, 1, 2, 2, 4)
    s, out = built(lambda f, p: w_msa(f, cfg, False, p), x)
    p = as_numpy(s)
    table = p["blk.attn.rel_bias"]
    assert table.shape == ((2 * big - 1) ** 2, 2)
    rows = [(dy + big - 1) * (2 * big - 1) + dx + big - 1 for dy in range(-m + 1, m) for dx in range(-m + 1, m)]
    p["blk.attn.rel_bias"] = table[rows]
    ref = window_attention_oracle(x.data.numpy()[0].reshape(-1, 4), p, "blk", 2, m)
    np.testing.assert_allclose(out.data.detach().numpy()[0].reshape(-1, 4), ref, rtol=1e-9, atol=1e-10)


def test_w_msa_shift_mask_blocks_wrapped_tokens(rng):
    cfg = AttentionConfig(num_heads=1, window_size=4, ffn_ratio=2.0)
    x = fmap(rng, 1, 8, 8, 4)
    s, base = built(lambda f, p: w_msa(f, cfg, True, p), x)
    bumped = x.data.clone()
    bumped[0, 0, 0, 0] += 5.0  # one channel: a uniform shift would vanish in the norm
    out = w_msa(x.with_data(bumped), cfg, True, s.scope("blk")).data.detach()
    # (7, 7) shares the wrapped window with (0, 0) but sits on the other side of the seam
    torch.testing.assert_close(out[0, 7, 7], base.data.detach()[0, 7, 7], rtol=0, atol=0)
    # (1, 1) is on the same side: the perturbation must reach it
    assert (out[0, 1, 1] - base.data.detach()[0, 1, 1]).abs().max() > 1e-6


def test_w_msa_rejects_oversized_or_misaligned_windows(store, rng):
    with pytest.raises(ConfigError):
        w_msa(fmap(rng, 1, 2, 2, 4), AttentionConfig(1, 4), False, store.scope("a"))
    with pytest.raises(DimensionError):
        w_msa(fmap(rng, 1, 6, 8, 4), AttentionConfig(1, 4), False, store.scope("b"))


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_gca_matches_oracle(rng, heads):
    cfg = AttentionConfig(num_heads=heads, ffn_ratio=2.0)
    x = fmap(rng, 2, 3, 2, 8)
    s, out = built(lambda f, p: gca(f, cfg, p), x)
    p = as_numpy(s)
    for n in range(2):
        ref = gca_oracle(x.data.numpy()[n].reshape(-1, 8), p, "blk", heads)
        np.testing.assert_allclose(out.data.detach().numpy()[n].reshape(-1, 8), ref, rtol=1e-9, atol=1e-10)


def test_gca_widening_uses_learned_shortcut(rng):
    cfg = AttentionConfig(num_heads=2, ffn_ratio=2.0)
    x = fmap(rng, 1, 2, 2, 4)
    s, out = built(lambda f, p: gca(f, cfg, p, c_out=8), x)
    assert out.shape == (1, 2, 2, 8)
    assert s["blk.shortcut.weight"].shape == (4, 8)
    assert s["blk.attn.proj.weight"].shape == (4, 8)


def test_gca_temperature_starts_at_one(store, rng):
    gca(fmap(rng, 1, 2, 2, 4), AttentionConfig(num_heads=2), store.scope("g"))
    assert torch.equal(store["g.attn.log_temperature"], torch.zeros(2, 1, 1, dtype=torch.float64))


def test_group_ca_matches_oracle(rng):
    cfg = AttentionConfig(num_heads=2, ffn_ratio=2.0)
    x = fmap(rng, 1, 2, 3, 8)
    s, (t1, t2) = built(lambda f, p: group_ca(f, cfg, p), x)
    r1, r2 = group_ca_oracle(x.data.numpy()[0].reshape(-1, 8), as_numpy(s), "blk", 2)
    np.testing.assert_allclose(t1.data.detach().numpy()[0].reshape(-1, 4), r1, rtol=1e-9, atol=1e-10)
    np.testing.assert_allclose(t2.data.detach().numpy()[0].reshape(-1, 4), r2, rtol=1e-9, atol=1e-10)


def test_group_ca_rejects_odd_width(store, rng):
    with pytest.raises(ConfigError):
        group_ca(fmap(rng, 1, 2, 2, 3), AttentionConfig(num_heads=1), store.scope("g"))


# ---------------------------------------------------------------- properties


@given(seed=st.integers(0, 2**31 - 1), h=st.integers(1, 4), w=st.integers(1, 4))
def test_gca_is_spatial_permutation_equivariant(seed, h, w):
    rng = np.random.default_rng(seed)
    cfg = AttentionConfig(num_heads=2, ffn_ratio=2.0)
    x = fmap(rng, 1, h, w, 4)
    s, out = built(lambda f, p: gca(f, cfg, p), x, seed=seed % 1000)
    perm = torch.from_numpy(rng.permutation(h * w))
    xp = x.data.reshape(1, h * w, 4)[:, perm].reshape(1, h, w, 4)
    yp = gca(x.with_data(xp), cfg, s.scope("blk")).data.reshape(1, h * w, 4)
    ref = out.data.reshape(1, h * w, 4)[:, perm]
    rel = ((yp - ref).abs().max() / ref.abs().max()).detach()
    assert float(rel) <= 1e-5


@given(seed=st.integers(0, 2**31 - 1))
def test_w_msa_is_equivariant_to_whole_window_permutations(seed):
    rng = np.random.default_rng(seed)
    m, nw = 2, 3
    cfg = AttentionConfig(num_heads=2, window_size=m, ffn_ratio=2.0)
    x = fmap(rng, 1, nw * m, nw * m, 4)
    s, out = built(lambda f, p: w_msa(f, cfg, False, p), x, seed=seed % 1000)

    def windows(t):
        return t.reshape(1, nw, m, nw, m, 4).permute(0, 1, 3, 2, 4, 5).reshape(nw * nw, m, m, 4)

    def unwindows(t):
        return t.reshape(1, nw, nw, m, m, 4).permute(0, 1, 3, 2, 4, 5).reshape(1, nw * m, nw * m, 4)

    perm = torch.from_numpy(rng.permutation(nw * nw))
    xp = unwindows(windows(x.data)[perm])
    yp = w_msa(x.with_data(xp), cfg, False, s.scope("blk")).data
    torch.testing.assert_close(yp, unwindows(windows(out.data)[perm]), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("name", ["attn.proj.weight", "ffn.norm.weight", "ffn.norm.bias",
                                  "ffn.fc1.weight", "ffn.fc2.weight"])
def test_group_ca_first_output_ignores_second_group_weights(rng, name):
    cfg = AttentionConfig(num_heads=2, ffn_ratio=2.0)
    x = fmap(rng, 1, 2, 2, 8)
    s, (t1, _) = built(lambda f, p: group_ca(f, cfg, p), x)
    with torch.no_grad():
        s[f"blk.{name}"][1] += torch.from_numpy(rng.normal(size=s[f"blk.{name}"][1].shape))
    t1b, t2b = group_ca(x, cfg, s.scope("blk"))
    assert torch.equal(t1b.data, t1.data)


def test_group_ca_first_output_sends_no_gradient_to_second_group():
    rng = np.random.default_rng(3)
    cfg = AttentionConfig(num_heads=2, ffn_ratio=2.0)
    x = fmap(rng, 1, 2, 2, 8)
    s, (t1, _) = built(lambda f, p: group_ca(f, cfg, p), x)
    (t1.data**2).sum().backward()
    for name in ("attn.proj.weight", "ffn.fc1.weight", "ffn.fc2.weight", "ffn.norm.weight"):
        g = s[f"blk.{name}"].grad
        assert torch.count_nonzero(g[1]) == 0, name
        assert torch.count_nonzero(g[0]) > 0, name
    for name, sl in (("attn.proj.bias", slice(4, 8)), ("ffn.fc2.bias", slice(4, 8)), ("ffn.fc1.bias", slice(8, 16))):
        assert torch.count_nonzero(s[f"blk.{name}"].grad[sl]) == 0, name


@given(seed=st.integers(0, 2**31 - 1))
def test_blocks_are_batch_independent(seed):
    rng = np.random.default_rng(seed)
    cfg = AttentionConfig(num_heads=2, window_size=2, ffn_ratio=2.0)
    x = fmap(rng, 3, 4, 4, 4)
    for fn in (lambda f, p: gca(f, cfg, p), lambda f, p: w_msa(f, cfg, True, p)):
        s, out = built(fn, x)
        solo = fn(x.with_data(x.data[1:2]), s.scope("blk"))
        torch.testing.assert_close(solo.data, out.data[1:2], rtol=1e-12, atol=1e-12)
