import numpy as np
import pytest
import torch

from pek.attack import (AutoencoderBaseline, KeyLeakError, MasterKeyModel, attack, check_key_hygiene,
                        evaluate_attack, train_autoencoder_baseline, train_master_key,
                        transferability_eval)
from pek.ciphers import le_encrypt, le_keygen
from pek.embedders import make_desk_embedder
from pek.gan import TrainConfig
from pek.imaging import ImageError
from pek.surrogate import ManifestError, generate_traditional_pairs
from pek.synthetic import synthetic_images

SMALL = {"width": 4, "layers": (1,), "strides": (1,), "stem": 4}


@pytest.fixture(scope="module")
def h():
    return make_desk_embedder(100, "residual")


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    d = tmp_path_factory.mktemp("le")
    return generate_traditional_pairs("le", [1, 2], synthetic_images(32, seed=0), 16, str(d))


@pytest.fixture(scope="module")
def model(manifest, h):
    return train_master_key(manifest, h, TrainConfig(epochs=2, batch_size=8, lr=1e-3),
                            generator_kwargs=SMALL, ndf=4, manifest_hash="abc")


def test_training_records_history_and_provenance(model, h):
    assert len(model.history) == 2
    assert set(model.history[0]) >= {"adv", "g", "h", "total", "d", "val_l1"}
    assert model.training_keys == {"le-1", "le-2"}
    assert model.provenance["manifest_hash"] == "abc"
    assert model.feature_branch["checksum"] == h.checksum()


def test_training_deterministic(manifest, h, model):
    again = train_master_key(manifest, h, TrainConfig(epochs=2, batch_size=8, lr=1e-3),
                             generator_kwargs=SMALL, ndf=4, manifest_hash="abc")
    x = synthetic_images(2, seed=9)
    assert np.array_equal(attack(again, x), attack(model, x))
    assert again.history == model.history


def test_needs_two_keys(tmp_path, h):
    m = generate_traditional_pairs("le", [1], synthetic_images(8), 8, str(tmp_path))
    with pytest.raises(ManifestError):
        train_master_key(m, h, TrainConfig(epochs=1), generator_kwargs=SMALL)


def test_attack_shapes(model):
    x = synthetic_images(3, seed=1)
    assert attack(model, x).shape == x.shape
    assert attack(model, x[0]).shape == x[0].shape
    with pytest.raises(ImageError):
        attack(model, np.zeros((1, 30, 30, 3)))


def test_key_leak(model):
    check_key_hygiene(model, ["le-3"])
    with pytest.raises(KeyLeakError):
        check_key_hygiene(model, ["le-3", "le-2"])
    x = synthetic_images(2, seed=2)
    with pytest.raises(KeyLeakError):
        evaluate_attack(model, (x, le_encrypt(x, le_keygen(1)), ["le-1"] * 2, ["a", "b"]), model_ex())


def model_ex():
    return make_desk_embedder(7)


def test_evaluate_attack_rows_and_deltas(model):
    x = synthetic_images(4, seed=3)
    enc = le_encrypt(x, le_keygen(3))
    rep = evaluate_attack(model, (x, enc, ["le-3"] * 4, list("abcd")), model_ex())
    assert set(rep.aggregates) == {"le-3:ciphertext", "le-3:attack"}
    d = rep.metadata["deltas"]["le-3"]
    agg = rep.aggregates
    assert d["ssim"] == pytest.approx(agg["le-3:attack"]["ssim"] - agg["le-3:ciphertext"]["ssim"])


def test_checkpoint_roundtrip(model, tmp_path):
    p = tmp_path / "m.pt"
    model.save(p)
    back = MasterKeyModel.load(p)
    x = synthetic_images(2, seed=4)
    assert np.array_equal(attack(back, x), attack(model, x))
    assert back.training_keys == model.training_keys
    assert back.history == model.history


def test_transferability_report(model):
    x = synthetic_images(3, seed=5)
    sets = {"B": (x, le_encrypt(x, le_keygen(5)), ["k"] * 3, ["a", "b", "c"]),
            "C": (x, le_encrypt(x, le_keygen(6)), ["k"] * 3, ["a", "b", "c"])}
    service = {"B": make_desk_embedder(1), "C": make_desk_embedder(2, "conv_wide")}
    rep = transferability_eval(model, sets, service, model_ex(), trained_against="A")
    assert set(rep.metadata["deltas"]) == {"B/k", "C/k"}
    assert set(rep.metadata["embedding_cosine"]["C"]) == {"ciphertext", "attack"}
    with pytest.raises(ValueError):
        transferability_eval(model, {}, service, model_ex(), "A")


def test_autoencoder_single_key_and_overfit(tmp_path):
    x = synthetic_images(8, seed=6)
    enc = le_encrypt(x, le_keygen(1))
    with pytest.raises(ValueError):
        train_autoencoder_baseline((x, enc, ["a"] * 4 + ["b"] * 4, list(range(8))), TrainConfig(epochs=1))
    cfg = TrainConfig(epochs=1, batch_size=8, lr=1e-3)
    short = train_autoencoder_baseline((x, enc, ["a"] * 8, list(range(8))), cfg)
    cfg = TrainConfig(epochs=200, batch_size=8, lr=1e-3)
    ae = train_autoencoder_baseline((x, enc, ["a"] * 8, list(range(8))), cfg)
    err = lambda m: float(np.mean((attack(m, enc) - x) ** 2))
    assert err(ae) < 0.5 * err(short)
    p = tmp_path / "ae.pt"
    ae.save(p)
    back = AutoencoderBaseline.load(p)
    assert back.key_label == "a"
    assert np.array_equal(attack(back, enc), attack(ae, enc))
