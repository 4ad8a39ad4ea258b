import numpy as np
import pytest
import torch

from pek.embedders import (ARCHITECTURES, FeatureExtractor, embed, load_extractor, make_desk_embedder,
                           save_extractor, train_embedder)
from pek.imaging import ImageError, to_torch
from pek.synthetic import synthetic_images


@pytest.mark.parametrize("arch", sorted(ARCHITECTURES))
def test_deterministic_per_seed(arch):
    x = synthetic_images(4, seed=1)
    a, b = make_desk_embedder(5, arch), make_desk_embedder(5, arch)
    assert a.checksum() == b.checksum()
    assert np.array_equal(embed(a, x), embed(b, x))
    other = make_desk_embedder(6, arch)
    assert a.checksum() != other.checksum()


@pytest.mark.parametrize("arch", sorted(ARCHITECTURES))
def test_output_shapes(arch):
    ex = make_desk_embedder(0, arch, dim=24)
    x = synthetic_images(3, seed=0)
    assert embed(ex, x).shape == (3, 24)
    assert embed(ex, x[0]).shape == (24,)
    taps = ex.taps(to_torch(x))
    assert len(taps) == len(ex.tap_layers) == 3
    assert taps[-1].shape[1] == 64


def test_init_does_not_disturb_global_rng():
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    FeatureExtractor("residual", 9)
    assert torch.equal(torch.rand(3), expected)


def test_wrong_input_shape():
    ex = make_desk_embedder(0)
    with pytest.raises(ImageError):
        embed(ex, np.zeros((16, 16, 3)))


def test_unknown_arch():
    with pytest.raises(ValueError):
        FeatureExtractor("vgg", 0)


def test_gradient_matches_finite_difference():
    ex = FeatureExtractor("conv_wide", 2, dim=8, input_shape=(8, 8, 3)).double().freeze()
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
    w = torch.randn(8, dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda t: (embed(ex, t) * w).sum(), (x,), eps=1e-6, atol=1e-7, rtol=1e-3)


def test_freeze_blocks_updates_and_keeps_checksum():
    ex = make_desk_embedder(1)
    before = ex.checksum()
    assert all(not p.requires_grad for p in ex.parameters())
    with pytest.raises(RuntimeError):
        train_embedder(ex, synthetic_images(8), np.zeros(8, dtype=int), steps=1)
    x = to_torch(synthetic_images(2)).requires_grad_(True)
    ex(x).sum().backward()
    assert ex.checksum() == before
    assert x.grad is not None


def test_training_changes_weights():
    ex = FeatureExtractor("conv_small", 0)
    before = ex.checksum()
    imgs = synthetic_images(16, seed=3)
    train_embedder(ex, imgs, np.arange(16) % 2, steps=3)
    assert ex.checksum() != before


def test_save_load_roundtrip(tmp_path):
    ex = make_desk_embedder(4, "residual", dim=16)
    p = tmp_path / "ex.pt"
    save_extractor(ex, p)
    back = load_extractor(p)
    assert back.checksum() == ex.checksum()
    assert back.frozen and back.name == ex.name
    x = synthetic_images(2, seed=5)
    assert np.array_equal(embed(back, x), embed(ex, x))


def test_embedding_is_lipschitz_on_small_perturbations():
    ex = make_desk_embedder(0, "conv_small")
    x = synthetic_images(1, seed=7)[0]
    noise = np.random.default_rng(0).standard_normal(x.shape)
    e0 = embed(ex, x)
    ratios = []
    for eps in (1e-3, 1e-2):
        xp = np.clip(x + eps * noise, 0, 1)
        ratios.append(np.linalg.norm(embed(ex, xp) - e0) / np.linalg.norm(xp - x))
    assert max(ratios) < 100
