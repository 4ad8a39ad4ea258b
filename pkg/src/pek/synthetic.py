"""Seeded synthetic image source for self-contained experiments.

Images are smooth two-colour gradients with a few flat ellipses and
rectangles on top, lightly blurred. Crude, but they carry the low-frequency
structure and block-level correlation that the attacks exploit in natural
photos.
"""

from __future__ import annotations

import os

import numpy as np
from scipy.ndimage import gaussian_filter

from .imaging import save_image


def synthetic_images(n: int, size: int = 32, seed: int = 0, blur: float = 1.0) -> np.ndarray:
    """Return ``n`` images as an (n, size, size, 3) float64 array in [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.empty((n, size, size, 3))
    for i in range(n):
        c0, c1 = rng.random(3), rng.random(3)
        angle = rng.random() * 2 * np.pi
        t = np.cos(angle) * xx + np.sin(angle) * yy
        t = (t - t.min()) / (t.max() - t.min() + 1e-9)
        img = c0 * (1 - t[..., None]) + c1 * t[..., None]
        for _ in range(rng.integers(2, 5)):
            cx, cy = rng.random(2)
            rx, ry = rng.random(2) * 0.3 + 0.08
            colour = rng.random(3)
            if rng.random() < 0.5:
                mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 < 1
            else:
                mask = (np.abs(xx - cx) < rx) & (np.abs(yy - cy) < ry)
            img[mask] = colour
        if blur > 0:
            img = gaussian_filter(img, (blur, blur, 0))
        out[i] = img
    return np.clip(out, 0.0, 1.0)


def write_synthetic_dir(directory: str, n: int, size: int = 32, seed: int = 0) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, img in enumerate(synthetic_images(n, size, seed)):
        p = os.path.join(directory, f"img_{i:05d}.png")
        save_image(img, p)
        paths.append(p)
    return paths
