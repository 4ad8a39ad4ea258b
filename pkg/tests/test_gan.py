import numpy as np
import pytest
import torch

from pek.embedders import FeatureExtractor
from pek.imaging import to_torch
from pek.synthetic import synthetic_images
from pek.gan import (GanTrainer, PatchDiscriminator, TrainConfig, TrainingDiverged, adv_loss,
                     build_discriminator, build_generator, feature_loss, l1_loss, load_generator,
                     minibatches, save_generator, total_loss)


def dtensor(*shape, seed=0):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


# ---------------------------------------------------------------- architectures


def test_resnet9_shapes_and_range():
    G = build_generator("resnet9", 0, ngf=8)
    assert len([m for m in G.model if m.__class__.__name__ == "_ResnetBlock"]) == 9
    y = G(torch.rand(2, 3, 32, 32))
    assert y.shape == (2, 3, 32, 32)
    assert y.min() >= 0 and y.max() <= 1


def test_resnet50_encoder_default_layout():
    G = build_generator("resnet50_encoder", 0, width=8)
    assert len(G.encoder) == 3 + 4 + 6 + 3
    assert G(torch.rand(1, 3, 64, 64)).shape == (1, 3, 64, 64)


def test_unknown_variant():
    with pytest.raises(ValueError):
        build_generator("unet", 0)


def test_generator_seed_determinism():
    a = build_generator("resnet9", 3, ngf=4, n_blocks=2)
    b = build_generator("resnet9", 3, ngf=4, n_blocks=2)
    c = build_generator("resnet9", 4, ngf=4, n_blocks=2)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not all(torch.equal(sa[k], sc[k]) for k in sa)


def test_patchgan_has_three_convs_and_map_output():
    D = PatchDiscriminator(ndf=8)
    convs = [m for m in D.modules() if isinstance(m, torch.nn.Conv2d)]
    assert len(convs) == 3
    out = D(torch.rand(2, 3, 32, 32))
    assert out.shape == (2, 1, 7, 7)
    assert out.min() > 0 and out.max() < 1


def _receptive_field(geometry):
    rf, jump = 1, 1
    for k, s, _ in geometry:
        rf += (k - 1) * jump
        jump *= s
    return rf, jump


def test_patchgan_locality():
    D = build_discriminator(0, ndf=8).double()
    x = dtensor(1, 3, 32, 32)
    base = D(x)[0, 0]
    rf, jump = _receptive_field(D.geometry)
    assert rf == 22 and jump == 4
    y = x.clone()
    y[0, :, 0, 0] += 0.5  # top-left corner pixel
    changed = (D(y)[0, 0] - base).abs() > 0
    # output (i, j) sees input rows [jump*i - pad_total, ...+rf); pad_total is 1 + 2 + 4
    pad_total = 1 + 1 * 2 + 1 * 4
    for i in range(base.shape[0]):
        for j in range(base.shape[1]):
            top, left = jump * i - pad_total, jump * j - pad_total
            inside = top <= 0 < top + rf and left <= 0 < left + rf
            if not inside:
                assert not changed[i, j]
    assert changed[0, 0]
    assert not changed[-1, -1]


def test_conditional_discriminator_needs_condition():
    D = PatchDiscriminator(ndf=4, conditional=True)
    with pytest.raises(ValueError):
        D(torch.rand(1, 3, 16, 16))
    assert D(torch.rand(1, 3, 16, 16), condition=torch.rand(1, 3, 16, 16)).shape == (1, 1, 3, 3)


# ---------------------------------------------------------------- losses


def test_adv_loss_matches_formula():
    D = build_discriminator(1, ndf=4).double()
    real, fake = dtensor(2, 3, 16, 16, seed=1), dtensor(2, 3, 16, 16, seed=2)
    with torch.no_grad():
        dr, df = D(real).numpy(), D(fake).numpy()
    want = np.log(dr).mean() + np.log(1 - df).mean()
    assert adv_loss(D, real, fake).item() == pytest.approx(want, abs=1e-12)


def test_adv_loss_clamps_saturated_output():
    class Sure(torch.nn.Module):
        def forward(self, x):
            return torch.ones(x.shape[0], 1, 2, 2, dtype=x.dtype)

    v = adv_loss(Sure(), dtensor(1, 3, 4, 4), dtensor(1, 3, 4, 4)).item()
    assert np.isfinite(v) and v == pytest.approx(np.log(1e-12))


def test_adv_loss_errors():
    D = PatchDiscriminator(ndf=4)
    with pytest.raises(ValueError):
        adv_loss(D, torch.rand(1, 3, 16, 16), torch.rand(1, 3, 8, 8))
    with pytest.raises(ValueError):
        adv_loss(D, torch.rand(0, 3, 16, 16), torch.rand(0, 3, 16, 16))


def test_l1_and_feature_values():
    a, b = dtensor(2, 3, 8, 8, seed=3), dtensor(2, 3, 8, 8, seed=4)
    assert l1_loss(a, b).item() == pytest.approx(np.abs(a.numpy() - b.numpy()).mean())
    assert l1_loss(a, a).item() == 0
    h = FeatureExtractor("conv_wide", 0, dim=8, input_shape=(8, 8, 3)).double().freeze()
    with torch.no_grad():
        ea, eb = h(a).numpy(), h(b).numpy()
    assert feature_loss(h, a, b).item() == pytest.approx(((ea - eb) ** 2).mean(), abs=1e-14)
    assert feature_loss(h, a, a).item() == 0


def test_total_loss_gating():
    assert total_loss(1, 100, 1, 0.5, 0.1, 2.0) == pytest.approx(0.5 + 10 + 2)
    assert total_loss(0, 0, 1, 9.0, 9.0, 2.0) == 2.0
    with pytest.raises(ValueError):
        total_loss(-1, 1, 1, 0, 0, 0)
    with pytest.raises(ValueError):
        TrainConfig(gamma=-0.1)


def test_gradients_of_losses_in_double():
    D = build_discriminator(2, ndf=4).double()
    h = FeatureExtractor("conv_wide", 1, dim=8, input_shape=(8, 8, 3)).double().freeze()
    real = dtensor(1, 3, 8, 8, seed=5)
    fake = dtensor(1, 3, 8, 8, seed=6).requires_grad_(True)
    kw = dict(eps=1e-6, atol=1e-8, rtol=1e-3)
    assert torch.autograd.gradcheck(lambda t: adv_loss(D, real, t), (fake,), **kw)
    # keep L1 away from its kink at zero
    assert torch.autograd.gradcheck(lambda t: l1_loss(real, t + 2.0), (fake,), **kw)
    assert torch.autograd.gradcheck(lambda t: feature_loss(h, real, t), (fake,), **kw)
    assert torch.autograd.gradcheck(
        lambda t: total_loss(1, 100, 1, adv_loss(D, real, t), l1_loss(real, t + 2.0),
                             feature_loss(h, real, t)), (fake,), **kw)


# ---------------------------------------------------------------- training


def _tiny(seed=0, **cfg):
    G = build_generator("resnet50_encoder", seed, width=4, layers=(1,), strides=(1,), stem=2)
    D = build_discriminator(seed + 1, ndf=4)
    h = FeatureExtractor("conv_small", 0, dim=8, input_shape=(16, 16, 3)).freeze()
    return GanTrainer(G, D, h, TrainConfig(**{"lr": 1e-2, **cfg}))


def test_trainer_requires_frozen_branch():
    G, D = build_generator("resnet9", 0, ngf=4, n_blocks=1), PatchDiscriminator(ndf=4)
    with pytest.raises(ValueError):
        GanTrainer(G, D, FeatureExtractor("conv_small", 0), TrainConfig())
    with pytest.raises(ValueError):
        GanTrainer(G, D, None, TrainConfig(gamma=1.0))


def test_overfit_single_batch():
    torch.manual_seed(0)
    G = build_generator("resnet9", 0, ngf=4, n_blocks=1, norm="none")
    h = FeatureExtractor("conv_small", 0, dim=8, input_shape=(16, 16, 3)).freeze()
    tr = GanTrainer(G, build_discriminator(1, ndf=4), h, TrainConfig(lr=3e-3))
    x = to_torch(synthetic_images(2, size=16, seed=0))
    first = tr.step(x, x).g
    for _ in range(150):
        rec = tr.step(x, x)
    assert rec.g < 0.5 * first


def test_step_updates_discriminator_only_when_enabled():
    x = torch.rand(2, 3, 16, 16)
    for flag in (True, False):
        tr = _tiny(update_discriminator=flag)
        before = [p.clone() for p in tr.D.parameters()]
        rec = tr.step(x, x)
        moved = any(not torch.equal(a, b) for a, b in zip(before, tr.D.parameters()))
        assert moved == flag
        assert np.isnan(rec.d) != flag


def test_branch_checksum_unchanged_by_training():
    tr = _tiny()
    before = tr.h.checksum()
    x = torch.rand(2, 3, 16, 16)
    for _ in range(3):
        tr.step(x, x)
    assert tr.h.checksum() == before


def test_divergence_raises():
    tr = _tiny()
    x = torch.rand(2, 3, 16, 16)
    with pytest.raises(TrainingDiverged):
        tr.step(x, x * float("nan"))


def test_training_is_deterministic():
    def run():
        torch.manual_seed(0)
        tr = _tiny(seed=5)
        x = torch.rand(4, 3, 16, 16, generator=torch.Generator().manual_seed(1))
        g = torch.Generator().manual_seed(2)
        recs = [tr.step(x[i], x[i]) for _ in range(2) for i in minibatches(4, 2, g)]
        return recs, tr.G.state_dict()

    (r1, s1), (r2, s2) = run(), run()
    assert r1 == r2
    assert all(torch.equal(s1[k], s2[k]) for k in s1)


def test_minibatches_cover_everything():
    idx = torch.cat(list(minibatches(10, 3, torch.Generator().manual_seed(0))))
    assert sorted(idx.tolist()) == list(range(10))


def test_generator_checkpoint_roundtrip(tmp_path):
    G = build_generator("resnet50_encoder", 7, width=4, layers=(1, 1), strides=(1, 2), stem=2)
    p = tmp_path / "g.pt"
    save_generator(G, p, seed_label="s", epoch=3, coefficients={"alpha": 1})
    back, blob = load_generator(p)
    x = torch.rand(1, 3, 16, 16)
    assert torch.equal(back(x), G(x))
    assert blob["seed_label"] == "s" and blob["epoch"] == 3
