"""Keyed block-scrambling perceptual encryption: LE and EtC.

Both ciphers work on 8-bit integers. Images cross the integer boundary with
round(v*255) on the way in and /255 on the way out, so round trips are exact
for images already on the 1/255 grid.

Functions accept a single (H, W, 3) image or an (N, H, W, 3) batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import ImageError, as_image, block_view, unblock_view

LE_DEFAULT_BLOCK = 4
ETC_DEFAULT_BLOCK = 8

FLIP_NONE, FLIP_HORIZONTAL, FLIP_VERTICAL = 0, 1, 2


def _quantize(images) -> tuple[np.ndarray, bool]:
    arr = np.asarray(images, dtype=np.float64)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4:
        raise ImageError(f"expected (H, W, C) or (N, H, W, C), got {arr.shape}")
    for img in arr:
        as_image(img, copy=False)
    if arr.shape[-1] != 3:
        raise ImageError("block ciphers operate on RGB images")
    return np.rint(arr * 255.0).astype(np.int16), single


def _dequantize(q: np.ndarray, single: bool) -> np.ndarray:
    out = q.astype(np.float64) / 255.0
    out = out[0] if single else out
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------- LE


@dataclass(frozen=True, eq=False)
class LeKey:
    """One global key: a permutation of the 3*b*b colour components of a
    block plus a reversal mask over the permuted components."""

    seed: int | None
    block_size: int
    permutation: np.ndarray
    reverse: np.ndarray

    def __post_init__(self):
        n = 3 * self.block_size ** 2
        if self.permutation.shape != (n,) or not np.array_equal(
            np.sort(self.permutation), np.arange(n)
        ):
            raise ValueError("LE permutation must be a bijection on 3*b*b components")
        if self.reverse.shape != (n,):
            raise ValueError("LE reversal mask must have 3*b*b entries")

    def __eq__(self, other):
        return (
            isinstance(other, LeKey)
            and self.block_size == other.block_size
            and np.array_equal(self.permutation, other.permutation)
            and np.array_equal(self.reverse, other.reverse)
        )

    __hash__ = None

    @classmethod
    def identity(cls, block_size: int = LE_DEFAULT_BLOCK) -> "LeKey":
        n = 3 * block_size ** 2
        return cls(None, block_size, np.arange(n), np.zeros(n, dtype=bool))


def le_keygen(seed: int, block_size: int = LE_DEFAULT_BLOCK) -> LeKey:
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    rng = np.random.default_rng(seed)
    n = 3 * block_size ** 2
    perm = rng.permutation(n)
    reverse = rng.random(n) < 0.5
    return LeKey(int(seed), block_size, perm, reverse)


def _le_components(q: np.ndarray, b: int) -> np.ndarray:
    blocks = block_view(q, b)
    n, rows, cols = blocks.shape[:3]
    return blocks.reshape(n, rows, cols, -1)


def _le_reassemble(comp: np.ndarray, b: int, shape) -> np.ndarray:
    n, rows, cols, _ = comp.shape
    return unblock_view(comp.reshape(n, rows, cols, b, b, shape[-1]))


def le_encrypt(images, key: LeKey) -> np.ndarray:
    q, single = _quantize(images)
    comp = _le_components(q, key.block_size)[..., key.permutation]
    comp = np.where(key.reverse, 255 - comp, comp)
    return _dequantize(_le_reassemble(comp, key.block_size, q.shape), single)


def le_decrypt(images, key: LeKey) -> np.ndarray:
    q, single = _quantize(images)
    comp = _le_components(q, key.block_size)
    comp = np.where(key.reverse, 255 - comp, comp)
    comp = comp[..., np.argsort(key.permutation)]
    return _dequantize(_le_reassemble(comp, key.block_size, q.shape), single)


# ---------------------------------------------------------------- EtC


@dataclass(frozen=True, eq=False)
class EtcKey:
    """Per-image key. Per-block codes are indexed by the block's source
    position (before the global shuffle)."""

    seed: int | None
    block_size: int
    grid: tuple[int, int]
    block_permutation: np.ndarray
    rotation: np.ndarray          # quarter turns counter-clockwise, 0..3
    flip: np.ndarray              # FLIP_NONE / FLIP_HORIZONTAL / FLIP_VERTICAL
    negative_positive: np.ndarray  # (n_blocks, 3) bool
    channel_permutation: np.ndarray  # (n_blocks, 3)

    def __post_init__(self):
        n = self.grid[0] * self.grid[1]
        if not np.array_equal(np.sort(self.block_permutation), np.arange(n)):
            raise ValueError("block permutation must be a bijection over grid positions")
        if self.rotation.shape != (n,) or self.flip.shape != (n,):
            raise ValueError("per-block codes must have one entry per block")
        if self.negative_positive.shape != (n, 3) or self.channel_permutation.shape != (n, 3):
            raise ValueError("per-block channel codes must be (n_blocks, 3)")

    def __eq__(self, other):
        return isinstance(other, EtcKey) and self.block_size == other.block_size and all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("block_permutation", "rotation", "flip",
                      "negative_positive", "channel_permutation")
        ) and tuple(self.grid) == tuple(other.grid)

    __hash__ = None

    @property
    def n_blocks(self) -> int:
        return self.grid[0] * self.grid[1]

    @classmethod
    def identity(cls, grid: tuple[int, int], block_size: int = ETC_DEFAULT_BLOCK) -> "EtcKey":
        n = grid[0] * grid[1]
        return cls(
            None, block_size, tuple(grid), np.arange(n),
            np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64),
            np.zeros((n, 3), dtype=bool), np.tile(np.arange(3), (n, 1)),
        )


def etc_keygen(seed: int, grid: tuple[int, int], block_size: int = ETC_DEFAULT_BLOCK) -> EtcKey:
    rows, cols = grid
    if rows < 1 or cols < 1:
        raise ValueError("grid must have at least one row and column")
    rng = np.random.default_rng(seed)
    n = rows * cols
    return EtcKey(
        seed=int(seed),
        block_size=block_size,
        grid=(rows, cols),
        block_permutation=rng.permutation(n),
        rotation=rng.integers(0, 4, n),
        flip=rng.integers(0, 3, n),
        negative_positive=rng.random((n, 3)) < 0.5,
        channel_permutation=np.stack([rng.permutation(3) for _ in range(n)]),
    )


def _etc_blocks(q: np.ndarray, key: EtcKey) -> np.ndarray:
    h, w = q.shape[1:3]
    b = key.block_size
    if h % b or w % b or (h // b, w // b) != tuple(key.grid):
        raise ImageError(f"EtC key grid {key.grid} (block {b}) does not match a {h}x{w} image")
    blocks = block_view(q, b)
    n = blocks.shape[0]
    return blocks.reshape(n, key.n_blocks, b, b, 3).copy()


def _etc_unblocks(blocks: np.ndarray, key: EtcKey) -> np.ndarray:
    rows, cols = key.grid
    b = key.block_size
    return unblock_view(blocks.reshape(blocks.shape[0], rows, cols, b, b, 3))


def _rotate(blocks, codes, inverse=False):
    for k in (1, 2, 3):
        sel = codes == k
        if sel.any():
            turns = (4 - k) if inverse else k
            blocks[:, sel] = np.rot90(blocks[:, sel], turns, axes=(2, 3))
    return blocks


def _flip(blocks, codes):
    for code, axis in ((FLIP_HORIZONTAL, 3), (FLIP_VERTICAL, 2)):
        sel = codes == code
        if sel.any():
            blocks[:, sel] = np.flip(blocks[:, sel], axis=axis)
    return blocks


def etc_encrypt(images, key: EtcKey) -> np.ndarray:
    q, single = _quantize(images)
    blocks = _etc_blocks(q, key)
    blocks = _rotate(blocks, key.rotation)
    blocks = _flip(blocks, key.flip)
    neg = key.negative_positive[None, :, None, None, :]
    blocks = np.where(neg, 255 - blocks, blocks)
    perm = key.channel_permutation[None, :, None, None, :]
    blocks = np.take_along_axis(blocks, np.broadcast_to(perm, blocks.shape), axis=-1)
    blocks = blocks[:, key.block_permutation]
    return _dequantize(_etc_unblocks(blocks, key), single)


def etc_decrypt(images, key: EtcKey) -> np.ndarray:
    q, single = _quantize(images)
    blocks = _etc_blocks(q, key)
    blocks = blocks[:, np.argsort(key.block_permutation)]
    inv = np.argsort(key.channel_permutation, axis=1)[None, :, None, None, :]
    blocks = np.take_along_axis(blocks, np.broadcast_to(inv, blocks.shape), axis=-1)
    neg = key.negative_positive[None, :, None, None, :]
    blocks = np.where(neg, 255 - blocks, blocks)
    blocks = _flip(blocks, key.flip)
    blocks = _rotate(blocks, key.rotation, inverse=True)
    return _dequantize(_etc_unblocks(blocks, key), single)


def per_image_seed(base_seed: int, index: int) -> int:
    """Seed of the ``index``-th per-image EtC key drawn from ``base_seed``."""
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1, np.uint64)[0])
