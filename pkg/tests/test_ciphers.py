import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pek.ciphers import (FLIP_HORIZONTAL, FLIP_NONE, FLIP_VERTICAL, EtcKey, LeKey, etc_decrypt,
                         etc_encrypt, etc_keygen, le_decrypt, le_encrypt, le_keygen, per_image_seed)
from pek.imaging import ImageError


def grid_images(n, size=32, seed=0):
    """Random images on the 1/255 grid, so the integer boundary is lossless."""
    return np.random.default_rng(seed).integers(0, 256, (n, size, size, 3)) / 255.0


# ---------------------------------------------------------------- LE


def test_le_keygen_deterministic_and_seed_sensitive():
    assert le_keygen(0) == le_keygen(0)
    assert not np.array_equal(le_keygen(0).permutation, le_keygen(1).permutation)
    assert le_keygen(0, block_size=4).permutation.shape == (48,)


def test_le_identity_key():
    x = grid_images(3)
    assert np.array_equal(le_encrypt(x, LeKey.identity()), x)
    assert np.array_equal(le_decrypt(x, LeKey.identity()), x)


def _le_oracle_block(block_q, perm, mask):
    b = block_q.shape[0]
    comps = [int(block_q[y][x][c]) for y in range(b) for x in range(b) for c in range(3)]
    out = []
    for j in range(len(comps)):
        v = comps[perm[j]]
        out.append(255 - v if mask[j] else v)
    res = np.zeros_like(block_q)
    k = 0
    for y in range(b):
        for x in range(b):
            for c in range(3):
                res[y][x][c] = out[k]
                k += 1
    return res


def test_le_component_oracle_single_block():
    q = np.arange(48).reshape(4, 4, 3) * 5  # distinct gray-ish levels 0..235
    perm = np.arange(48)
    perm[[0, 1]] = perm[[1, 0]]
    mask = np.zeros(48, dtype=bool)
    mask[2] = True
    key = LeKey(None, 4, perm, mask)
    got = np.rint(le_encrypt(q / 255.0, key) * 255).astype(int)
    assert np.array_equal(got, _le_oracle_block(q, perm, mask))
    assert got[0, 0, 0] == q[0, 0, 1] and got[0, 0, 1] == q[0, 0, 0]
    assert got[0, 0, 2] == 255 - q[0, 0, 2]


def test_le_oracle_random_key_every_block():
    x = grid_images(1, size=8, seed=3)[0]
    key = le_keygen(11)
    q = np.rint(x * 255).astype(int)
    got = np.rint(le_encrypt(x, key) * 255).astype(int)
    for r in range(2):
        for c in range(2):
            blk = q[4 * r:4 * r + 4, 4 * c:4 * c + 4]
            want = _le_oracle_block(blk, key.permutation, key.reverse)
            assert np.array_equal(got[4 * r:4 * r + 4, 4 * c:4 * c + 4], want)


def test_le_deterministic():
    x = grid_images(2)
    k = le_keygen(5)
    assert np.array_equal(le_encrypt(x, k), le_encrypt(x, k))


def test_le_roundtrip_and_wrong_key():
    x = grid_images(100)
    k, wrong = le_keygen(1), le_keygen(2)
    assert np.array_equal(le_decrypt(le_encrypt(x, k), k), x)
    assert np.array_equal(le_encrypt(le_decrypt(x, k), k), x)
    assert np.abs(le_decrypt(le_encrypt(x, k), wrong) - x).mean() > 0.05


def test_le_rejects_bad_tiling():
    with pytest.raises(ImageError):
        le_encrypt(np.zeros((30, 32, 3)), le_keygen(0))


def test_le_key_validation():
    with pytest.raises(ValueError):
        LeKey(None, 4, np.zeros(48, dtype=int), np.zeros(48, dtype=bool))


# ---------------------------------------------------------------- EtC


def test_etc_keygen():
    assert etc_keygen(7, (4, 4)) == etc_keygen(7, (4, 4))
    k = etc_keygen(7, (4, 4), 8)
    assert sorted(k.block_permutation.tolist()) == list(range(16))
    assert set(k.rotation.tolist()) <= {0, 1, 2, 3}
    assert set(k.flip.tolist()) <= {FLIP_NONE, FLIP_HORIZONTAL, FLIP_VERTICAL}
    assert all(sorted(p) == [0, 1, 2] for p in k.channel_permutation.tolist())


def test_etc_identity_key():
    x = grid_images(2)
    key = EtcKey.identity((4, 4), 8)
    assert np.array_equal(etc_encrypt(x, key), x)
    assert np.array_equal(etc_decrypt(x, key), x)


def test_etc_rotation_and_negpos_coordinate_oracle():
    b = 8
    q = np.random.default_rng(4).integers(0, 256, (b, b, 3))
    key = EtcKey.identity((1, 1), b)
    key = EtcKey(None, b, (1, 1), key.block_permutation, np.array([1]), np.array([FLIP_NONE]),
                 np.array([[True, False, False]]), key.channel_permutation)
    got = np.rint(etc_encrypt(q / 255.0, key) * 255).astype(int)
    for i in range(b):
        for j in range(b):
            src = q[j, b - 1 - i]  # one counter-clockwise quarter turn
            assert got[i, j, 0] == 255 - src[0]
            assert got[i, j, 1] == src[1]
            assert got[i, j, 2] == src[2]


def test_etc_flip_and_channel_oracle():
    b = 4
    q = np.random.default_rng(5).integers(0, 256, (b, b, 3))
    base = EtcKey.identity((1, 1), b)
    for flip, mapping in ((FLIP_HORIZONTAL, lambda i, j: (i, b - 1 - j)),
                          (FLIP_VERTICAL, lambda i, j: (b - 1 - i, j))):
        key = EtcKey(None, b, (1, 1), base.block_permutation, np.array([0]), np.array([flip]),
                     base.negative_positive, np.array([[2, 0, 1]]))
        got = np.rint(etc_encrypt(q / 255.0, key) * 255).astype(int)
        for i in range(b):
            for j in range(b):
                src = q[mapping(i, j)]
                assert got[i, j].tolist() == [src[2], src[0], src[1]]


def test_etc_block_swap():
    x = grid_images(1, seed=9)[0][:8, :16]
    base = EtcKey.identity((1, 2), 8)
    key = EtcKey(None, 8, (1, 2), np.array([1, 0]), base.rotation, base.flip,
                 base.negative_positive, base.channel_permutation)
    enc = etc_encrypt(x, key)
    assert np.array_equal(enc[:, :8], x[:, 8:])
    assert np.array_equal(enc[:, 8:], x[:, :8])


def test_etc_roundtrip_and_wrong_key():
    x = grid_images(100, seed=1)
    for i in range(10):
        k = etc_keygen(per_image_seed(3, i), (4, 4))
        assert np.array_equal(etc_decrypt(etc_encrypt(x, k), k), x)
        assert np.array_equal(etc_encrypt(etc_decrypt(x, k), k), x)
    k, wrong = etc_keygen(1, (4, 4)), etc_keygen(2, (4, 4))
    assert np.abs(etc_decrypt(etc_encrypt(x, k), wrong) - x).mean() > 0.05


def test_etc_grid_mismatch():
    with pytest.raises(ImageError):
        etc_encrypt(grid_images(1)[0], etc_keygen(0, (2, 2), 8))


def test_key_sensitivity():
    x = grid_images(100, seed=2)
    for i in range(100):
        a, b = le_keygen(2 * i), le_keygen(2 * i + 1)
        assert not np.array_equal(le_encrypt(x[i], a), le_encrypt(x[i], b))
        ea, eb = etc_keygen(2 * i, (4, 4)), etc_keygen(2 * i + 1, (4, 4))
        assert not np.array_equal(etc_encrypt(x[i], ea), etc_encrypt(x[i], eb))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 63 - 1), st.sampled_from([2, 4, 8]), st.integers(0, 2 ** 32 - 1))
def test_bijection_property(seed, b, img_seed):
    x = grid_images(1, size=16, seed=img_seed)[0]
    lk = le_keygen(seed, b)
    assert np.array_equal(le_decrypt(le_encrypt(x, lk), lk), x)
    ek = etc_keygen(seed, (16 // b, 16 // b), b)
    enc = etc_encrypt(x, ek)
    assert enc.min() >= 0 and enc.max() <= 1
    assert np.array_equal(etc_decrypt(enc, ek), x)


def test_negative_positive_is_involution_on_integers():
    v = np.arange(256)
    assert np.array_equal(255 - (255 - v), v)
    assert (255 - v).min() == 0 and (255 - v).max() == 255
