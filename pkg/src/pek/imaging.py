"""Image representation, deterministic I/O, resizing and block partitioning.

Images are plain ``numpy`` float64 arrays of shape (H, W, C) with values in
[0, 1]. Every public function returns a fresh read-only array.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError


class ImageError(ValueError):
    """Raised for invalid image values, shapes or files."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def as_image(data, copy: bool = True) -> np.ndarray:
    """Validate ``data`` as an ImageTensor and return a read-only float64 array.

    A 2-D array is promoted to a single channel image.
    """
    arr = np.array(data, dtype=np.float64, copy=copy)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ImageError(f"expected (H, W, C) array, got shape {arr.shape}")
    h, w, c = arr.shape
    if h < 1 or w < 1 or c not in (1, 3):
        raise ImageError(f"invalid image shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ImageError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ImageError(
            f"image values must lie in [0, 1], got [{arr.min():.4g}, {arr.max():.4g}]"
        )
    return _freeze(arr)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Quantize to 8 bit with round(v*255), clamped to [0, 255]."""
    img = as_image(img, copy=False)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def from_uint8(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q)
    if q.min(initial=0) < 0 or q.max(initial=0) > 255:
        raise ImageError("integer image outside [0, 255]")
    return as_image(q.astype(np.float64) / 255.0, copy=False)


def resize(img: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resize to ``target`` = (H, W)."""
    img = as_image(img, copy=False)
    th, tw = (int(t) for t in target)
    if th < 1 or tw < 1:
        raise ImageError(f"zero-sized resize target {target}")
    if (th, tw) == img.shape[:2]:
        return img
    t = torch.from_numpy(np.array(img, copy=True)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(th, tw), mode="bilinear", align_corners=False)
    out = out[0].permute(1, 2, 0).numpy()
    return as_image(np.clip(out, 0.0, 1.0), copy=False)


def load_image(path: str | os.PathLike, target: tuple[int, int] | None = None) -> np.ndarray:
    """Load a PNG/JPEG as an RGB (or grayscale) ImageTensor in [0, 1]."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise ImageError(f"no such image file: {path}")
    if target is not None and (int(target[0]) < 1 or int(target[1]) < 1):
        raise ImageError(f"zero-sized resize target {target}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            q = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageError(f"cannot decode image {path}: {exc}") from exc
    img = from_uint8(q)
    if target is not None:
        img = resize(img, target)
    return img


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write ``img`` as a lossless PNG."""
    q = to_uint8(img)
    if q.shape[2] == 1:
        q = q[:, :, 0]
    path = os.fspath(path)
    try:
        Image.fromarray(q).save(path, format="PNG")
    except OSError as exc:
        raise ImageError(f"cannot write {path}: {exc}") from exc


@dataclass(frozen=True)
class BlockGrid:
    block_size: int
    rows: int
    cols: int
    blocks: tuple[np.ndarray, ...]
    origin_shape: tuple[int, int, int]


def _check_tiling(shape, block_size: int) -> None:
    h, w = shape[:2]
    if block_size < 1 or h % block_size or w % block_size:
        raise ImageError(f"block size {block_size} does not tile a {h}x{w} image")


def to_blocks(img: np.ndarray, block_size: int) -> BlockGrid:
    """Split into row-major ``block_size`` x ``block_size`` blocks."""
    img = as_image(img, copy=False)
    _check_tiling(img.shape, block_size)
    h, w, c = img.shape
    rows, cols = h // block_size, w // block_size
    blocks = tuple(
        _freeze(img[r * block_size:(r + 1) * block_size,
                    k * block_size:(k + 1) * block_size].copy())
        for r in range(rows)
        for k in range(cols)
    )
    return BlockGrid(block_size, rows, cols, blocks, (h, w, c))


def from_blocks(grid: BlockGrid) -> np.ndarray:
    """Exact inverse of :func:`to_blocks`."""
    b = grid.block_size
    h, w, c = grid.origin_shape
    if grid.rows * b != h or grid.cols * b != w:
        raise ImageError("grid dimensions disagree with origin shape")
    if len(grid.blocks) != grid.rows * grid.cols:
        raise ImageError(
            f"grid holds {len(grid.blocks)} blocks, expected {grid.rows * grid.cols}"
        )
    out = np.empty((h, w, c), dtype=np.float64)
    for i, blk in enumerate(grid.blocks):
        if blk.shape != (b, b, c):
            raise ImageError(f"block {i} has shape {blk.shape}, expected {(b, b, c)}")
        r, k = divmod(i, grid.cols)
        out[r * b:(r + 1) * b, k * b:(k + 1) * b] = blk
    return as_image(out, copy=False)


def block_view(arr: np.ndarray, block_size: int) -> np.ndarray:
    """Reshape a batch (N, H, W, C) into (N, rows, cols, b, b, C) without copying semantics."""
    n, h, w, c = arr.shape
    _check_tiling((h, w), block_size)
    b = block_size
    return arr.reshape(n, h // b, b, w // b, b, c).transpose(0, 1, 3, 2, 4, 5)


def unblock_view(blocks: np.ndarray) -> np.ndarray:
    n, rows, cols, b, _, c = blocks.shape
    return blocks.transpose(0, 1, 3, 2, 4, 5).reshape(n, rows * b, cols * b, c)


def to_torch(images) -> torch.Tensor:
    """(N, H, W, C) or (H, W, C) numpy -> (N, C, H, W) float32 tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).contiguous()


def from_torch(t: torch.Tensor) -> np.ndarray:
    """(N, C, H, W) tensor -> (N, H, W, C) float64 numpy clipped to [0, 1]."""
    arr = t.detach().to(torch.float64).permute(0, 2, 3, 1).cpu().numpy()
    return np.clip(arr, 0.0, 1.0)


def list_images(directory: str | os.PathLike) -> list[str]:
    exts = (".png", ".jpg", ".jpeg")
    directory = os.fspath(directory)
    return sorted(
        os.path.join(directory, f)
        for f in os.listdir(directory)
        if f.lower().endswith(exts)
    )
