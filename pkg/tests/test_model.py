import math

import pytest
import torch

from stylevc.errors import InputError
from stylevc.model import (
    AAMHead,
    ContentEncoder,
    Decoder,
    ModelConfig,
    SpeakerEncoder,
    VoiceConverter,
    split_style,
)

TINY = ModelConfig(
    d_model=16, d_content=8, n_heads=2, conv_kernel=3, ff_expansion=2,
    dropout=0.0, n_speaker_blocks=2,
)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return VoiceConverter(TINY).eval()


def mel(b, l, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(b, l, 80, generator=g)


# ---------------------------------------------------------------- content encoder


def test_content_encoder_time_reduction(model):
    for L in (16, 32, 128, 256):
        latent = model.content_encoder(mel(1, L))
        assert latent.r_m.shape == (1, L // 16, 8)
        assert latent.r_s.shape == latent.r_m.shape


def test_content_encoder_rejects_unaligned_length(model):
    with pytest.raises(InputError):
        model.content_encoder(mel(1, 40))


def test_eval_mode_sample_equals_mean(model):
    latent = model.content_encoder(mel(1, 32))
    assert torch.equal(latent.r_c, latent.r_m)


def test_seeded_noise_is_reproducible(model):
    x = mel(1, 32)
    a = model.content_encoder(x, rng=torch.Generator().manual_seed(5))
    b = model.content_encoder(x, rng=torch.Generator().manual_seed(5))
    assert torch.equal(a.r_c, b.r_c)
    assert not torch.equal(a.r_c, a.r_m)


def test_posterior_std_positive(model):
    latent = model.content_encoder(mel(2, 64, seed=3))
    assert bool((latent.r_s > 0).all())


def test_reparameterization_statistics():
    g = torch.Generator().manual_seed(123)
    draws = torch.randn(10_000, generator=g)
    r_c = 0.0 + draws * 1.0
    assert abs(float(r_c.mean())) < 0.05
    assert 0.9 < float(r_c.var()) < 1.1


def test_instance_norm_filters_channel_means(model):
    # after each in-block IN, per-channel time means vanish
    captured = []
    hooks = [
        blk.instance_norm.register_forward_hook(
            lambda m, a, out: captured.append(out.mean(dim=-2).abs().max().item())
        )
        for blk in model.content_encoder.blocks
    ]
    model.content_encoder(mel(1, 64, seed=9))
    for h in hooks:
        h.remove()
    assert len(captured) == 4
    assert max(captured) < 1e-5


# ---------------------------------------------------------------- speaker encoder


def test_speaker_embedding_shape(model):
    for L in (16, 61, 128):
        emb = model.speaker_encoder(mel(1, L, seed=L))
        assert emb.shape == (1, 32)


def test_speaker_encoder_min_length(model):
    with pytest.raises(InputError):
        model.speaker_encoder(mel(1, 8))


def test_speaker_encoder_deterministic(model):
    x = mel(2, 48, seed=4)
    assert torch.equal(model.speaker_encoder(x), model.speaker_encoder(x))


def test_frame_shuffle_changes_embedding_mildly():
    # pooling is near order-invariant; conv modules keep it from being exact
    torch.manual_seed(11)
    enc = SpeakerEncoder(TINY).eval()
    x = mel(1, 64, seed=8)
    with torch.no_grad():
        base = enc(x)
        perm = torch.randperm(64, generator=torch.Generator().manual_seed(1))
        shuffled = enc(x[:, perm, :])
    rel = (base - shuffled).norm() / base.norm()
    assert float(rel) < 0.10


# ---------------------------------------------------------------- split_style


def test_split_style_zero_embedding_is_identity():
    style = split_style(torch.zeros(8))
    assert torch.equal(style.s1, torch.ones(4))
    assert torch.equal(style.s2, torch.zeros(4))


def test_split_style_lengths():
    style = split_style(torch.arange(8.0))
    assert style.s1.shape == (4,)
    assert style.s2.shape == (4,)


def test_split_style_invertible_bookkeeping():
    emb = torch.tensor([0.1, -0.2, 0.3, -0.4, 1.0, 2.0, 3.0, 4.0])
    style = split_style(emb)
    recovered_first = torch.atanh(style.s1 - 1.0)
    torch.testing.assert_close(recovered_first, emb[:4], atol=1e-6, rtol=0)
    assert torch.equal(style.s2, emb[4:])


def test_split_style_rejects_odd_length():
    with pytest.raises(InputError):
        split_style(torch.zeros(7))


# ---------------------------------------------------------------- decoder


def test_decoder_restores_time_16x(model):
    g = torch.Generator().manual_seed(2)
    latent = torch.randn(1, 8, 8, generator=g)
    style = split_style(torch.randn(1, 32, generator=g) * 0.1)
    out = model.decoder(latent, style)
    assert out.shape == (1, 128, 80)


def test_decoder_style_mismatch(model):
    latent = torch.randn(1, 4, 8)
    with pytest.raises(InputError):
        model.decoder(latent, split_style(torch.zeros(1, 16)))


def test_zero_style_projection_makes_decode_style_independent():
    torch.manual_seed(7)
    m = VoiceConverter(TINY).eval()
    with torch.no_grad():
        m.speaker_encoder.out_proj.weight.zero_()
        m.speaker_encoder.out_proj.bias.zero_()
    src = mel(1, 32, seed=1)
    out_a = m.convert(src, mel(1, 48, seed=2)).x_dec
    out_b = m.convert(src, mel(1, 64, seed=3)).x_dec
    assert torch.equal(out_a, out_b)


# ---------------------------------------------------------------- full converter


def test_convert_end_to_end_shape_law(model):
    for L in (16, 32, 128, 256):
        out = model.convert(mel(1, L, seed=L), mel(1, 48, seed=5))
        assert out.x_dec.shape == (1, L, 80)


def test_convert_output_length_ignores_target_length(model):
    src = mel(1, 64, seed=6)
    a = model.convert(src, mel(1, 16, seed=7)).x_dec
    b = model.convert(src, mel(1, 224, seed=8)).x_dec
    assert a.shape == b.shape == (1, 64, 80)


def test_self_conversion_is_deterministic_in_eval(model):
    x = mel(1, 32, seed=10)
    a = model.convert(x, x).x_dec
    b = model.convert(x, x).x_dec
    assert torch.equal(a, b)


def test_unbatched_inputs_supported(model):
    out = model.convert(mel(1, 32, seed=12)[0], mel(1, 32, seed=13)[0])
    assert out.x_dec.shape == (32, 80)


def test_aam_head_shapes():
    head = AAMHead(n_classes=4, embedding_dim=32)
    assert head.weight.shape == (4, 32)
    assert head.n_classes == 4


def test_forward_triplet_structure(model):
    g = torch.Generator().manual_seed(3)
    fwd = model.forward_triplet(
        mel(2, 32, seed=1), mel(2, 32, seed=2), mel(2, 32, seed=3), rng=g
    )
    assert fwd.y1.shape == fwd.y2.shape == (2, 32, 80)
    assert fwd.latent1.r_m.shape == (2, 2, 8)
    assert fwd.e_anc.shape == (2, 32)
    # separate noise draws for the two conversions
    assert not torch.equal(fwd.latent1.r_c, fwd.latent2.r_c)
    assert torch.equal(fwd.latent1.r_m, fwd.latent2.r_m)
