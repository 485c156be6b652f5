import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from agfas.oanet import (
    CueEncoder, FASFeature, OANet, OANetConfig, PatchEmbed, classify, cue_encode, load_oanet, oa_forward,
    patch_embed, save_oanet,
)
from gradcheck import w_out_check

TINY = OANetConfig(image_size=8, patch=4, d_model=8, depth=1, heads=2, cross_heads=2, mlp_ratio=1.0,
                   cue_grid=2, d_cue=4, cue_layers=2)


def test_patch_token_counts():
    m = OANet()
    assert patch_embed(torch.rand(2, 3, 32, 32), m).shape == (2, 64, 64)
    pe = PatchEmbed(224, 16, 3, 32)
    assert pe(torch.rand(1, 3, 224, 224)).shape == (1, 196, 32)
    with pytest.raises(ValueError):
        PatchEmbed(30, 4, 3, 8)
    with pytest.raises(ValueError):
        patch_embed(torch.rand(1, 3, 30, 30), m)


def test_zero_image_gives_position_plus_bias():
    m = OANet()
    tok = patch_embed(torch.zeros(1, 3, 32, 32), m)
    expect = m.patch_embed.pos + m.patch_embed.proj.bias
    torch.testing.assert_close(tok, expect, rtol=0, atol=0)


def test_cue_token_shapes():
    m = OANet()
    assert cue_encode(torch.rand(3, 3, 32, 32), m).shape == (3, 16, 32)
    enc = CueEncoder(224, 3, 7, 512)
    with torch.no_grad():
        assert enc(torch.rand(1, 3, 224, 224)).shape == (1, 49, 512)
    with pytest.raises(ValueError):
        cue_encode(torch.rand(1, 3, 16, 16), m)
    with pytest.raises(ValueError):
        cue_encode(torch.rand(1, 3, 32, 32), OANet(OANetConfig(use_cue=False)))
    with pytest.raises(ValueError):
        CueEncoder(32, 3, 3, 8)


def test_zero_cue_tokens_identical_across_samples():
    m = OANet()
    with torch.no_grad():
        tok = cue_encode(torch.zeros(4, 3, 32, 32), m)
    assert all(torch.equal(tok[0], tok[i]) for i in range(1, 4))


def test_cross_attention_output_projection_starts_at_zero():
    m = OANet()
    for blk in m.blocks:
        assert not blk.cross_attn.out.weight.any() and not blk.cross_attn.out.bias.any()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_fresh_model_ignores_the_cue_bitwise(seed):
    torch.manual_seed(seed % 1000)
    m = OANet(OANetConfig(depth=2))
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(2, 3, 32, 32, generator=g)
    a = oa_forward(x, torch.randn(2, 3, 32, 32, generator=g) * 5, m)
    b = oa_forward(x, torch.zeros(2, 3, 32, 32), m)
    assert torch.equal(a.logits, b.logits) and torch.equal(a.feature, b.feature)


def test_eval_mode_is_deterministic_and_checks_shapes():
    m = OANet()
    x, c = torch.rand(2, 3, 32, 32), torch.rand(2, 3, 32, 32)
    a, b = oa_forward(x, c, m), oa_forward(x, c, m)
    assert isinstance(a, FASFeature) and a.feature.shape == (2, 64) and a.logits.shape == (2, 2)
    assert torch.equal(a.logits, b.logits)
    torch.testing.assert_close(a.logits, m.head(a.feature))
    with pytest.raises(ValueError):
        oa_forward(x, torch.rand(2, 3, 16, 16), m)
    with pytest.raises(ValueError):
        oa_forward(x, c, m, mode="infer")


def test_gradient_reaches_zero_initialised_projection():
    m = OANet(OANetConfig(depth=2))
    x, c = torch.rand(4, 3, 32, 32), torch.randn(4, 3, 32, 32)
    out = oa_forward(x, c, m, mode="train")
    F.cross_entropy(out.logits, torch.tensor([0, 1, 0, 1])).backward()
    assert any(p.grad is not None and p.grad.abs().max() > 0 for p in m.cross_out_params())


def _tiny_model(seed=0):
    torch.manual_seed(seed)
    return OANet(TINY).double().eval()


def test_w_out_gradient_matches_finite_differences():
    for init in ("zero", "random"):
        assert w_out_check(init) < 1e-4


def test_cue_token_order_matters_once_cross_attention_is_active():
    m = _tiny_model(1)
    with torch.no_grad():
        for p in m.cross_out_params():
            p.normal_(0, 0.5)
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    c = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    ctx = cue_encode(c, m)
    perm = ctx[:, [3, 1, 2, 0]]

    def logits(tokens):
        h = m.patch_embed(x)
        for blk in m.blocks:
            h = blk(h, tokens)
        return m.head(m.norm(h).mean(1))

    with torch.no_grad():
        # the encoder's positional embedding makes the token set order-aware
        assert not torch.allclose(cue_encode(c.flip(-1), m), ctx)
        base = logits(ctx)
        # attention treats its key/value tokens as a set
        torch.testing.assert_close(logits(perm), base, rtol=0, atol=1e-12)
        # moving content to other positions changes the output through the position embedding
        raw = ctx - m.cue_encoder.pos
        swapped = raw[:, [3, 1, 2, 0]] + m.cue_encoder.pos
        assert (logits(swapped) - base).abs().max() > 1e-8


def test_classify_examples():
    assert classify(torch.tensor([0.0, 0.0])).item() == 0.5
    assert classify(torch.tensor([-10.0, 10.0])).item() == pytest.approx(1.0, abs=1e-8)


@settings(max_examples=100, deadline=None)
@given(st.floats(-15, 15), st.floats(-15, 15))
def test_classify_in_open_unit_interval(a, b):
    s = classify(torch.tensor([a, b], dtype=torch.float64)).item()
    assert 0.0 < s < 1.0


def test_checkpoint_round_trip(tmp_path):
    m = OANet(OANetConfig(depth=1, d_model=32))
    save_oanet(m, tmp_path, note="x")
    back = load_oanet(tmp_path)
    assert back.cfg == m.cfg
    x, c = torch.rand(2, 3, 32, 32), torch.rand(2, 3, 32, 32)
    assert torch.equal(oa_forward(x, c, m).logits, oa_forward(x, c, back).logits)


def test_cue_free_model_has_no_cue_branch():
    m = OANet(OANetConfig(use_cue=False))
    assert m.cue_encoder is None and m.cross_out_params() == []
    out = oa_forward(torch.rand(1, 3, 32, 32), None, m)
    assert np.isfinite(out.logits.numpy()).all()
