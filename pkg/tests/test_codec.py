"""Codec transforms, quantization, likelihood models, checkpoint interop."""

import math

import numpy as np
import pytest
import torch

from nrfc.archive import NamedTensorArchive
from nrfc.codec import (
    SCALE_MIN,
    FactorizedPrior,
    FeatureCodec,
    backbone_digest,
    build_codec,
    crop_plane,
    gaussian_likelihood,
    make_backbone,
    pad_plane,
    quantize,
    rate_bits,
    round_half_away,
    swap_heads,
    total_loss,
)
from nrfc.config import CodecProfile
from nrfc.errors import ConfigError, InputError, LoadError

PROFILE = CodecProfile("tiny", internal=8, latent=12, hyper=6)


def test_round_half_away_examples():
    x = torch.tensor([2.4, -1.5, 2.5, -2.5, 0.5, -0.5, 0.4, 3.0])
    out = round_half_away(x)
    assert out.tolist() == [2.0, -2.0, 3.0, -3.0, 1.0, -1.0, 0.0, 3.0]


def test_quantize_noise_bounds_and_determinism():
    y = torch.zeros(10_000)
    g = torch.Generator().manual_seed(5)
    a = quantize(y, "noise", generator=g)
    assert (a >= -0.5).all() and (a < 0.5).all()
    b = quantize(y, "noise", generator=torch.Generator().manual_seed(5))
    assert torch.equal(a, b)
    c = quantize(y, "noise", generator=torch.Generator().manual_seed(6))
    assert not torch.equal(a, c)


def test_quantize_mean_round_example():
    y = torch.tensor([1.9])
    mu = torch.tensor([0.3])
    out = quantize(y, "mean_round", mean=mu)
    assert out.item() == pytest.approx(2.3, abs=1e-6)
    # residual lands exactly on the integer grid
    assert float(out - mu) == pytest.approx(2.0, abs=1e-6)


def test_quantize_round_mode_and_errors():
    y = torch.tensor([1.4, -1.5])
    assert quantize(y, "round").tolist() == [1.0, -2.0]
    with pytest.raises(InputError):
        quantize(y, "mean_round")
    with pytest.raises(InputError):
        quantize(y, "middle_out")


def test_gaussian_likelihood_center_value():
    # Unit bin around the mean under sigma=1: Phi(0.5) - Phi(-0.5).
    from scipy.stats import norm

    lik = gaussian_likelihood(torch.zeros(1), torch.zeros(1), torch.ones(1))
    expect = float(norm.cdf(0.5) - norm.cdf(-0.5))
    assert lik.item() == pytest.approx(expect, abs=1e-6)
    assert lik.item() == pytest.approx(0.38292, abs=1e-5)


def test_gaussian_likelihood_grid_sums_to_one():
    for sigma in (0.2, 1.0, 3.7):
        r = int(math.ceil(30 * sigma))
        grid = torch.arange(-r, r + 1, dtype=torch.float64)
        lik = gaussian_likelihood(grid, torch.zeros_like(grid),
                                  torch.full_like(grid, sigma))
        assert lik.sum().item() == pytest.approx(1.0, abs=1e-3)


def test_gaussian_likelihood_sigma_clamped_not_error():
    tiny = gaussian_likelihood(torch.zeros(1), torch.zeros(1),
                               torch.tensor([1e-6]))
    at_min = gaussian_likelihood(torch.zeros(1), torch.zeros(1),
                                 torch.tensor([SCALE_MIN]))
    assert torch.equal(tiny, at_min)


def test_gaussian_likelihood_floor():
    lik = gaussian_likelihood(torch.tensor([1000.0]), torch.zeros(1),
                              torch.ones(1))
    assert lik.item() == pytest.approx(1e-9)


def test_rate_bits_matches_loop():
    torch.manual_seed(0)
    lik = torch.rand(50) * 0.9 + 0.05
    manual = -sum(math.log2(float(p)) for p in lik)
    assert rate_bits(lik).item() == pytest.approx(manual, rel=1e-5)


def test_total_loss_arithmetic():
    out = total_loss(torch.tensor(0.5), torch.tensor(600.0),
                     torch.tensor(400.0), 1e-3)
    assert out.item() == pytest.approx(1.5, abs=1e-7)


def test_rate_gradients_match_finite_difference():
    # d(bits)/d(mu) and d(bits)/d(sigma) in noise mode, against central
    # differences in float64.
    torch.manual_seed(1)
    y_hat = torch.randn(4, 4, dtype=torch.float64)
    mu = torch.randn(4, 4, dtype=torch.float64, requires_grad=True)
    sigma = (torch.rand(4, 4, dtype=torch.float64) + 0.5).requires_grad_(True)
    bits = rate_bits(gaussian_likelihood(y_hat, mu, sigma))
    bits.backward()
    eps = 1e-6
    for tensor, grad in ((mu, mu.grad), (sigma, sigma.grad)):
        for idx in [(0, 0), (2, 3), (3, 1)]:
            t2 = tensor.detach().clone()
            t2[idx] += eps
            up = rate_bits(gaussian_likelihood(
                y_hat, t2 if tensor is mu else mu.detach(),
                t2 if tensor is sigma else sigma.detach()))
            t2[idx] -= 2 * eps
            dn = rate_bits(gaussian_likelihood(
                y_hat, t2 if tensor is mu else mu.detach(),
                t2 if tensor is sigma else sigma.detach()))
            fd = float((up - dn) / (2 * eps))
            assert float(grad[idx]) == pytest.approx(fd, rel=1e-3, abs=1e-9)


def test_prior_cdf_monotone_for_random_parameters():
    torch.manual_seed(2)
    prior = FactorizedPrior(3)
    with torch.no_grad():
        for p in prior.parameters():
            p.normal_(std=1.5)
    x = torch.linspace(-30, 30, 301).expand(3, -1)
    cdf = prior.cdf(x)
    assert (cdf[:, 1:] >= cdf[:, :-1] - 1e-9).all()
    assert (cdf >= 0).all() and (cdf <= 1).all()


def test_prior_symmetric_init_peaks_at_zero():
    prior = FactorizedPrior(5)
    grid = torch.arange(-25, 26, dtype=torch.float32).expand(5, -1)
    lik = prior.likelihood(grid)
    assert (lik.argmax(dim=1) == 25).all()  # bin at 0 is the mode


def test_prior_likelihood_floor_and_shape_check():
    prior = FactorizedPrior(2)
    lik = prior.likelihood(torch.full((2, 3), 1e6))
    assert (lik >= 1e-9).all()
    with pytest.raises(InputError):
        prior.likelihood(torch.zeros(3, 4, 5))


def test_transform_shapes_paper_size():
    profile = CodecProfile("full", internal=16, latent=24, hyper=8)
    codec = FeatureCodec(channels=24, profile=profile, seed=0)
    plane = torch.randn(24, 128, 128)
    y = codec.encode_plane(plane)
    assert y.shape == (24, 8, 8)  # latent channels x H/16 x W/16
    x_hat = codec.decode_latent(y, (128, 128))
    assert x_hat.shape == (24, 128, 128)


def test_padding_roundtrip_non_multiple():
    codec = FeatureCodec(channels=4, profile=PROFILE, seed=0)
    plane = torch.randn(4, 48, 80)
    y = codec.encode_plane(plane)
    assert y.shape == (PROFILE.latent, 4, 8)  # padded to 64 x 128
    x_hat = codec.decode_latent(y, (48, 80))
    assert x_hat.shape == (4, 48, 80)


def test_pad_plane_values_and_tiny_input():
    plane = torch.arange(12.0).reshape(1, 3, 4)
    padded, size = pad_plane(plane, multiple=8)
    assert size == (3, 4)
    assert padded.shape == (1, 8, 8)
    assert torch.equal(crop_plane(padded, size), plane)
    # reflect padding mirrors without repeating the edge sample first
    assert padded[0, 0, 4].item() == padded[0, 0, 2].item()


def test_channel_mismatch_rejected():
    codec = FeatureCodec(channels=4, profile=PROFILE, seed=0)
    with pytest.raises(ConfigError):
        codec.encode_plane(torch.randn(3, 64, 64))


def test_hyper_forward_shapes_and_sigma_bound():
    codec = FeatureCodec(channels=4, profile=PROFILE, seed=1)
    y = torch.randn(PROFILE.latent, 8, 8)
    z_hat, mean, sigma = codec.hyper_forward(y, mode="round")
    assert z_hat.shape == (PROFILE.hyper, 2, 2)
    assert mean.shape == sigma.shape == (PROFILE.latent, 8, 8)
    assert (sigma >= SCALE_MIN).all()
    assert torch.equal(z_hat, torch.round(z_hat))  # integers in round mode


def test_receiver_side_frozen_sender_side_trainable():
    codec = FeatureCodec(channels=4, profile=PROFILE, seed=0)
    assert all(not p.requires_grad
               for p in codec.synthesis.backbone.parameters())
    assert all(not p.requires_grad for p in codec.hyper_dec.parameters())
    assert all(p.requires_grad for p in codec.analysis.parameters())
    assert all(p.requires_grad for p in codec.hyper_enc.parameters())
    assert all(p.requires_grad for p in codec.synthesis.head.parameters())
    assert all(p.requires_grad for p in codec.prior.parameters())


def test_gradient_reaches_heads_not_backbone():
    codec = FeatureCodec(channels=2, profile=PROFILE, seed=3)
    plane = torch.randn(2, 64, 64, requires_grad=True)
    y = codec.encode_plane(plane)
    y_hat = quantize(y, "noise", generator=torch.Generator().manual_seed(0))
    x_hat = codec.decode_latent(y_hat, (64, 64))
    loss = ((x_hat - plane.detach()) ** 2).mean()
    loss.backward()
    assert codec.analysis.head.weight.grad is not None
    assert codec.synthesis.head.weight.grad is not None
    assert all(p.grad is None for p in codec.synthesis.backbone.parameters())
    assert plane.grad is not None  # field receives gradient through encoder


def test_make_backbone_deterministic_and_reheadable():
    a = make_backbone(PROFILE, seed=7)
    b = make_backbone(PROFILE, seed=7)
    assert a.to_bytes() == b.to_bytes()
    c = make_backbone(PROFILE, seed=8)
    assert c.to_bytes() != a.to_bytes()


def test_swap_heads_same_seed_identical():
    ckpt = make_backbone(PROFILE, seed=0)
    a_enc, a_dec = swap_heads(ckpt, channels=5, profile=PROFILE, seed=4)
    b_enc, b_dec = swap_heads(ckpt, channels=5, profile=PROFILE, seed=4)
    for pa, pb in zip(a_enc.parameters(), b_enc.parameters()):
        assert torch.equal(pa, pb)
    for pa, pb in zip(a_dec.parameters(), b_dec.parameters()):
        assert torch.equal(pa, pb)


def test_swap_heads_backbone_verbatim_heads_fresh():
    ckpt = make_backbone(PROFILE, seed=0)
    wide = build_codec(ckpt, channels=24, profile=PROFILE, seed=1)
    narrow = build_codec(ckpt, channels=3, profile=PROFILE, seed=1)
    # Backbone tensors are byte-identical to the checkpoint for both.
    for codec in (wide, narrow):
        for key, value in codec.backbone_state().items():
            assert np.array_equal(value.numpy(), ckpt[key])
    # Only the head shapes differ between the two channel counts.
    assert wide.analysis.head.weight.shape[1] == 24
    assert narrow.analysis.head.weight.shape[1] == 3
    assert wide.synthesis.head.weight.shape[1] == 24
    assert narrow.synthesis.head.weight.shape[1] == 3


def test_load_backbone_mismatch_lists_offenders():
    ckpt = make_backbone(PROFILE, seed=0)
    other = CodecProfile("other", internal=10, latent=12, hyper=6)
    with pytest.raises(LoadError) as exc:
        build_codec(ckpt, channels=4, profile=other, seed=0)
    assert any("shape:" in o for o in exc.value.details["offenders"])

    incomplete = NamedTensorArchive()
    incomplete.add("analysis.backbone.0.weight", np.zeros((8, 8, 5, 5), np.float32))
    with pytest.raises(LoadError) as exc:
        build_codec(incomplete, channels=4, profile=PROFILE, seed=0)
    assert any(o.startswith("missing:") for o in exc.value.details["offenders"])


def test_backbone_digest_tracks_frozen_weights():
    ckpt = make_backbone(PROFILE, seed=0)
    d1 = backbone_digest(ckpt, "cfg-a")
    assert d1 == backbone_digest(ckpt, "cfg-a")
    assert d1 != backbone_digest(ckpt, "cfg-b")
    other = make_backbone(PROFILE, seed=1)
    assert d1 != backbone_digest(other, "cfg-a")


def test_frozen_state_bytes_stable_under_sender_training():
    ckpt = make_backbone(PROFILE, seed=0)
    codec = build_codec(ckpt, channels=4, profile=PROFILE, seed=2)
    before = codec.frozen_state_bytes()
    with torch.no_grad():
        codec.analysis.head.weight.add_(0.1)
        codec.synthesis.head.weight.add_(0.1)
    assert codec.frozen_state_bytes() == before
