import dataclasses

import numpy as np
import numpy.testing as npt
import pytest

import hgformer.model as model_mod
from hgformer import instrument
from hgformer.construct import TokenSet
from hgformer.model import (
    HGFormer,
    block_forward,
    compute_class_token,
    init_network_params,
    network_forward,
    patch_embed,
    single_stage_variant,
    vanilla_attention_variant,
    variant,
)
from hgformer.messaging import DropPath, LinearParams
from hgformer.tensor import ConfigError, Tape, Tensor, cross_entropy_logits, mul, sum_all

from conftest import numeric_grad, rel_err_max


def micro(n_classes=4, **kw):
    return variant("Micro", n_classes=n_classes, **kw)


# --------------------------------------------------------------------------
# configs and variants


def test_variant_table():
    t = variant("T")
    assert t.base_channels == 32 and t.depths == (1, 2, 4, 2) and t.drop_path_rate == 0.05
    assert variant("S").base_channels == 64
    assert variant("B").drop_path_rate == 0.15
    assert variant("micro").name == "Micro"
    with pytest.raises(ConfigError):
        variant("XL")


def test_stage_channels_and_heads():
    stages = variant("T").stages()
    assert [s.channels for s in stages] == [32, 64, 160, 256]
    assert [s.n_heads for s in stages] == [1, 2, 5, 8]
    assert all(s.channels // s.n_heads == 32 for s in stages)
    assert [s.downsample for s in stages] == [4, 2, 2, 2]


def test_parameter_count_window_and_ordering():
    counts = {name: HGFormer(variant(name)).parameter_count() for name in ("T", "S", "B")}
    assert 4_500_000 <= counts["T"] <= 5_500_000
    assert counts["T"] < counts["S"] < counts["B"]


def test_ablation_variants_share_parameter_budget():
    base = micro()
    n_full = HGFormer(base).parameter_count()
    n_vanilla = HGFormer(vanilla_attention_variant(base)).parameter_count()
    n_single = HGFormer(single_stage_variant(base)).parameter_count()
    assert abs(n_vanilla - n_full) / n_full < 0.05
    assert abs(n_single - n_full) / n_full < 0.05


# --------------------------------------------------------------------------
# patch embed


def test_patch_embed_stage1_arithmetic(rng):
    params = init_network_params(micro(), seed=0)
    img = Tensor(rng.uniform(0, 1, (3, 32, 32)).astype(np.float32))
    tokens = patch_embed(img, params.stages[0].embed)
    assert tokens.n_tokens == 64
    assert tokens.grid == (8, 8)
    assert tokens.channels == 16


def test_patch_embed_constant_image_gives_constant_tokens():
    params = init_network_params(micro(), seed=0)
    img = Tensor(np.full((3, 32, 32), 0.7, dtype=np.float32))
    tokens = patch_embed(img, params.stages[0].embed)
    assert np.abs(tokens.nodes.data - tokens.nodes.data[0]).max() < 1e-6


def test_patch_embed_rejects_indivisible():
    params = init_network_params(micro(), seed=0)
    with pytest.raises(ConfigError):
        patch_embed(Tensor(np.zeros((3, 33, 33), dtype=np.float32)), params.stages[0].embed)


def test_patch_embed_gradients(rng):
    params = init_network_params(micro(), seed=0, dtype=np.float64)
    embed = params.stages[0].embed
    img = Tensor(rng.uniform(-1, 1, (3, 8, 8)), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.uniform(-1, 1, (4, 16)), dtype=np.float64)

    def build():
        return sum_all(mul(patch_embed(img, embed).nodes, w))

    def loss():
        return float((patch_embed(img, embed).nodes.data * w.data).sum())

    with Tape() as tape:
        out = build()
    tape.backward(out)
    for t in (img, embed.weight, embed.bias):
        assert rel_err_max(t.grad, numeric_grad(loss, t)) < 1e-4


# --------------------------------------------------------------------------
# class token


def test_class_token_of_identical_tokens_is_projection(rng):
    c = 6
    proj = LinearParams(
        weight=Tensor(rng.uniform(-1, 1, (c, c)), requires_grad=True, dtype=np.float64),
        bias=Tensor(rng.uniform(-1, 1, c), requires_grad=True, dtype=np.float64),
    )
    row = rng.uniform(-1, 1, c)
    ts = TokenSet.from_nodes(Tensor(np.tile(row, (5, 1)), dtype=np.float64), (1, 5))
    cls = compute_class_token(ts, proj)
    npt.assert_allclose(cls.data[0], row @ proj.weight.data + proj.bias.data, atol=1e-12)


def test_class_token_permutation_invariant_and_matches_direct(rng):
    c = 5
    proj = LinearParams(
        weight=Tensor(rng.uniform(-1, 1, (c, c)), dtype=np.float64),
        bias=Tensor(rng.uniform(-1, 1, c), dtype=np.float64),
    )
    nodes = rng.uniform(-1, 1, (8, c))
    ts1 = TokenSet.from_nodes(Tensor(nodes, dtype=np.float64), (2, 4))
    ts2 = TokenSet.from_nodes(Tensor(nodes[rng.permutation(8)], dtype=np.float64), (2, 4))
    npt.assert_allclose(compute_class_token(ts1, proj).data, compute_class_token(ts2, proj).data, atol=1e-12)
    direct = nodes.mean(axis=0) @ proj.weight.data + proj.bias.data
    npt.assert_allclose(compute_class_token(ts1, proj).data[0], direct, atol=1e-6)


# --------------------------------------------------------------------------
# blocks


def _stage0_setup(cfg, seed=0, n=16, dtype=np.float32):
    params = init_network_params(cfg, seed=seed, dtype=dtype)
    stage = cfg.stages()[0]
    rng = np.random.default_rng(7)
    nodes = Tensor(rng.uniform(-1, 1, (n, stage.channels)).astype(dtype))
    tokens = TokenSet.from_nodes(nodes, (4, n // 4))
    return stage, params.stages[0].blocks[0], tokens


@pytest.mark.parametrize("mode_kw", [{}, {"attention_mode": "vanilla"}, {"messaging_mode": "single"}])
def test_block_preserves_shape(mode_kw):
    cfg = micro(**mode_kw)
    stage, bp, tokens = _stage0_setup(cfg)
    out = block_forward(tokens, stage, bp, cfg)
    assert out.nodes.shape == tokens.nodes.shape
    assert out.grid == tokens.grid


def test_block_eval_deterministic_bitwise():
    cfg = micro()
    stage, bp, tokens = _stage0_setup(cfg)
    out1 = block_forward(tokens, stage, bp, cfg)
    out2 = block_forward(tokens, stage, bp, cfg)
    assert out1.nodes.data.tobytes() == out2.nodes.data.tobytes()


@pytest.mark.parametrize("mode_kw", [{}, {"attention_mode": "vanilla"}, {"messaging_mode": "single"}])
def test_block_drop_rate_one_is_identity(mode_kw):
    cfg = micro(drop_path_rate=1.0, **mode_kw)
    stage, bp, tokens = _stage0_setup(cfg)
    drop = DropPath(1.0, training=True, rng=np.random.default_rng(0))
    out = block_forward(tokens, stage, bp, cfg, drop=drop)
    assert out.nodes.data.tobytes() == tokens.nodes.data.tobytes()


def test_vanilla_block_builds_no_incidence(monkeypatch):
    calls = []
    orig = model_mod.build_incidence

    def spy(*args, **kwargs):
        calls.append(1)
        return orig(*args, **kwargs)

    monkeypatch.setattr(model_mod, "build_incidence", spy)
    cfg = micro(attention_mode="vanilla")
    stage, bp, tokens = _stage0_setup(cfg)
    block_forward(tokens, stage, bp, cfg)
    assert calls == []
    cfg2 = micro()
    stage, bp, tokens = _stage0_setup(cfg2)
    block_forward(tokens, stage, bp, cfg2)
    assert calls == [1]


def test_single_stage_block_differs_from_full(rng):
    stage, bp, tokens = _stage0_setup(micro())
    out_full = block_forward(tokens, stage, bp, micro())
    out_single = block_forward(tokens, stage, bp, micro(messaging_mode="single"))
    assert not np.allclose(out_full.nodes.data, out_single.nodes.data)


# --------------------------------------------------------------------------
# network


def test_micro_grid_progression_and_logit_shape(rng):
    cfg = micro()
    m = HGFormer(cfg, seed=0)
    grids = []
    orig = model_mod.block_forward

    def spy(tokens, *args, **kwargs):
        grids.append(tokens.grid)
        return orig(tokens, *args, **kwargs)

    model_mod_block = model_mod.block_forward
    try:
        model_mod.network_forward.__globals__["block_forward"] = spy
        logits = m.forward(rng.uniform(0, 1, (3, 32, 32)).astype(np.float32))
    finally:
        model_mod.network_forward.__globals__["block_forward"] = model_mod_block
    assert grids == [(8, 8), (4, 4), (2, 2), (1, 1)]
    assert logits.shape == (4,)


def test_network_eval_deterministic(rng):
    m = HGFormer(micro(), seed=0)
    img = rng.uniform(0, 1, (3, 32, 32)).astype(np.float32)
    a = m.forward(img).data
    b = m.forward(img).data
    assert a.tobytes() == b.tobytes()


def test_network_8x8_degenerates_gracefully(rng):
    m = HGFormer(micro(n_classes=2), seed=0)
    logits = m.forward(rng.uniform(-1, 1, (3, 8, 8)).astype(np.float32))
    assert logits.shape == (2,)
    assert np.isfinite(logits.data).all()


def test_full_network_gradient_check(rng):
    cfg = micro(n_classes=2)
    m = HGFormer(cfg, seed=0, dtype=np.float64)
    img = rng.uniform(-1, 1, (3, 8, 8))

    def loss():
        return cross_entropy_logits(m.forward(Tensor(img, dtype=np.float64)), 1).data.item()

    with Tape() as tape:
        out = cross_entropy_logits(m.forward(Tensor(img, dtype=np.float64)), 1)
    tape.backward(out)
    named = m.named_parameters()
    probe = np.random.default_rng(0)
    picks = probe.choice(sorted(named), size=6, replace=False)
    for name in picks:
        p = named[name]
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        idx = probe.integers(0, p.size)
        orig = p.data.ravel()[idx]
        h = 1e-5
        p.data.ravel()[idx] = orig + h
        fp = loss()
        p.data.ravel()[idx] = orig - h
        fm = loss()
        p.data.ravel()[idx] = orig
        fd = (fp - fm) / (2 * h)
        an = grad.ravel()[idx]
        assert abs(fd - an) / max(abs(fd), abs(an), 1e-6) < 1e-4, name


def test_training_mode_with_drop_rate_uses_rng(rng):
    cfg = micro(drop_path_rate=0.5)
    m = HGFormer(cfg, seed=0)
    img = rng.uniform(0, 1, (3, 32, 32)).astype(np.float32)
    a = m.forward(img, training=True, rng=np.random.default_rng(1)).data
    b = m.forward(img, training=True, rng=np.random.default_rng(1)).data
    c = m.forward(img, training=True, rng=np.random.default_rng(2)).data
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


def test_checkpoint_roundtrip_restores_logits(tmp_path, rng):
    m1 = HGFormer(micro(), seed=0)
    img = rng.uniform(0, 1, (3, 32, 32)).astype(np.float32)
    ref = m1.forward(img).data
    m1.save(tmp_path / "m.ckpt")
    m2 = HGFormer(micro(), seed=99)
    assert not np.allclose(m2.forward(img).data, ref)
    m2.load(tmp_path / "m.ckpt")
    npt.assert_array_equal(m2.forward(img).data, ref)


def test_attention_rows_audited_across_full_forward(rng):
    m = HGFormer(micro(), seed=0)
    img = rng.uniform(0, 1, (3, 32, 32)).astype(np.float32)
    with instrument.attention_audit() as audit:
        m.forward(img)
    assert len(audit) >= 8  # two attentions per block, four blocks
    assert max(dev for dev, _ in audit) <= 1e-6
