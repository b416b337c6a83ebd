import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from hcpercept.config import ConfigError, EncoderConfig, full_preset
from hcpercept.encoder import Encoder, ImageBatch, interpolate_pos_embed, token_valid_mask


def bilinear_oracle(src, h, w):
    """Corner-aligned bilinear resampling, evaluated one output cell at a time."""
    G0, G1, C = src.shape
    out = np.zeros((h, w, C))
    for i in range(h):
        for j in range(w):
            y = i * (G0 - 1) / (h - 1) if h > 1 else 0.0
            x = j * (G1 - 1) / (w - 1) if w > 1 else 0.0
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, G0 - 1), min(x0 + 1, G1 - 1)
            dy, dx = y - y0, x - x0
            out[i, j] = ((1 - dy) * (1 - dx) * src[y0, x0] + (1 - dy) * dx * src[y0, x1]
                         + dy * (1 - dx) * src[y1, x0] + dy * dx * src[y1, x1])
    return out


def test_grid_shapes():
    b = ImageBatch.from_images([np.zeros((256, 192, 3))], 16)
    assert token_valid_mask(b.pad_mask, 16).shape == (1, 16, 12)
    b = ImageBatch.from_images([np.zeros((1344, 800, 3))], 16)
    m = token_valid_mask(b.pad_mask, 16)
    assert m.shape == (1, 84, 50) and m.numel() <= 84 * 84


def test_padding_rounds_up_and_marks_invalid_columns():
    b = ImageBatch.from_images([np.ones((20, 30, 3)), np.ones((16, 16, 3))], 16)
    assert b.pixels.shape == (2, 32, 32, 3)
    m = token_valid_mask(b.pad_mask, 16)
    assert m[0].all()
    assert not m[1, :, 1].any() and not m[1, 1, :].any()


def test_non_divisible_mask_rejected():
    with pytest.raises(ConfigError):
        token_valid_mask(torch.ones(1, 20, 16, dtype=torch.bool), 16)


def test_pos_identity_at_native_grid():
    src = torch.randn(84, 84, 8)
    assert torch.equal(interpolate_pos_embed(src, (84, 84)), src)


def test_pos_interp_matches_pointwise_oracle():
    src = torch.randn(84, 84, 4, dtype=torch.float64)
    out = interpolate_pos_embed(src, (16, 12))
    np.testing.assert_allclose(out.numpy(), bilinear_oracle(src.numpy(), 16, 12), atol=1e-10)


@given(st.integers(1, 20), st.integers(1, 20), st.floats(-3, 3))
@settings(max_examples=30, deadline=None)
def test_pos_interp_preserves_constants(h, w, c):
    out = interpolate_pos_embed(torch.full((16, 16, 3), c, dtype=torch.float64), (h, w))
    np.testing.assert_allclose(out.numpy(), c, atol=1e-12)


def test_pos_interp_rejects_empty_target():
    with pytest.raises(ValueError):
        interpolate_pos_embed(torch.zeros(4, 4, 2), (0, 3))


def test_encoder_shape_and_eval_determinism(toy_cfg):
    enc = Encoder(toy_cfg.encoder).eval()
    b = ImageBatch.from_images([np.random.default_rng(0).random((64, 48, 3))] * 2, 8)
    a, c = enc(b), enc(b)
    assert a.tokens.shape == (2, 8, 6, 64)
    assert torch.equal(a.tokens, c.tokens)


def test_mask_invariance(toy_cfg):
    torch.manual_seed(0)
    enc = Encoder(toy_cfg.encoder).eval()
    rng = np.random.default_rng(1)
    b = ImageBatch.from_images([rng.random((40, 24, 3)), rng.random((64, 48, 3))], 8)
    ref = enc(b)
    b.pixels[0, 40:] = 100.0
    b.pixels[0, :, 24:] = -50.0
    out = enc(b)
    valid = ref.token_valid[0]
    diff = (out.tokens[0][valid] - ref.tokens[0][valid]).abs().max()
    assert float(diff.detach()) <= 1e-6 * float(ref.tokens[0][valid].abs().max().detach())


def test_pixel_gradient_matches_finite_differences(toy_cfg):
    torch.manual_seed(0)
    enc = Encoder(toy_cfg.encoder).eval()
    x = torch.rand(1, 16, 16, 3)
    mask = torch.ones(1, 16, 16, dtype=torch.bool)
    w = torch.randn(1, 2, 2, 64)

    def readout(px):
        return (enc(ImageBatch(px, mask, [(16, 16)])).tokens * w).sum()

    px = x.clone().requires_grad_(True)
    readout(px).backward()
    analytic = px.grad.flatten()
    idx = torch.randperm(x.numel())[:12]
    h = 1e-3
    fd = []
    for i in idx:
        # finite differences in float64 so that the step size is not swamped by rounding
        enc64 = enc.double()
        xp, xm = x.double().clone().flatten(), x.double().clone().flatten()
        xp[i] += h
        xm[i] -= h
        fp = (enc64(ImageBatch(xp.view_as(x), mask, [(16, 16)])).tokens * w.double()).sum()
        fm = (enc64(ImageBatch(xm.view_as(x), mask, [(16, 16)])).tokens * w.double()).sum()
        fd.append(float((fp - fm).detach()) / (2 * h))
        enc.float()
    a = analytic[idx].numpy()
    assert np.max(np.abs(a - np.array(fd))) / np.max(np.abs(fd)) <= 1e-3


def test_grid_exceeding_table_rejected(toy_cfg):
    enc = Encoder(toy_cfg.encoder)
    with pytest.raises(ConfigError):
        enc(ImageBatch.from_images([np.zeros((8 * 17, 8, 3))], 8))


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(width=100, heads=12)
    with pytest.raises(ConfigError):
        EncoderConfig(drop_path_rate=1.0)


def test_drop_path_only_in_training(toy_cfg):
    from dataclasses import replace
    cfg = replace(toy_cfg.encoder, drop_path_rate=0.5)
    enc = Encoder(cfg)
    b = ImageBatch.from_images([np.random.default_rng(0).random((16, 16, 3))] * 4, 8)
    enc.eval()
    assert torch.equal(enc(b).tokens, enc(b).tokens)
    enc.train()
    torch.manual_seed(0)
    a = enc(b).tokens
    torch.manual_seed(1)
    assert not torch.equal(a, enc(b).tokens)


def test_full_encoder_count():
    with torch.device("meta"):
        enc = Encoder(full_preset().encoder)
    n = sum(p.numel() for p in enc.parameters())
    assert abs(n - 91.1e6) / 91.1e6 <= 0.02
