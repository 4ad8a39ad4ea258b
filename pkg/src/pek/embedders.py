"""Pluggable feature extractors.

These stand in for the recognition model whose features an encryption must
preserve and for the frozen perceptual branch used during attack training.
Three small convolutional architectures are provided so transferability can
be tested across architectures as well as seeds.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import read_checkpoint, state_checksum, write_checkpoint
from .imaging import ImageError, to_torch


class _Residual(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.c1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.c2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.c2(F.silu(self.c1(x)))


def _conv_small():
    return [
        ("tap1", nn.Sequential(nn.Conv2d(3, 16, 3, padding=1), nn.ReLU())),
        ("tap2", nn.Sequential(nn.AvgPool2d(2), nn.Conv2d(16, 32, 3, padding=1), nn.ReLU())),
        ("tap3", nn.Sequential(nn.AvgPool2d(2), nn.Conv2d(32, 64, 3, padding=1), nn.ReLU())),
    ]


def _conv_wide():
    return [
        ("tap1", nn.Sequential(nn.Conv2d(3, 32, 5, padding=2), nn.Tanh())),
        ("tap2", nn.Sequential(nn.Conv2d(32, 48, 5, stride=2, padding=2), nn.Tanh())),
        ("tap3", nn.Sequential(nn.Conv2d(48, 64, 3, stride=2, padding=1), nn.Tanh())),
    ]


def _residual():
    return [
        ("tap1", nn.Sequential(nn.Conv2d(3, 24, 3, padding=1), nn.SiLU())),
        ("tap2", nn.Sequential(nn.Conv2d(24, 32, 3, stride=2, padding=1), _Residual(32), nn.SiLU())),
        ("tap3", nn.Sequential(nn.Conv2d(32, 64, 3, stride=2, padding=1), _Residual(64), nn.SiLU())),
    ]


_TRUNK_WIDTH = 64

ARCHITECTURES = {
    "conv_small": _conv_small,
    "conv_wide": _conv_wide,
    "residual": _residual,
}


class FeatureExtractor(nn.Module):
    """Conv trunk with named tap stages, global pooling and a linear head."""

    def __init__(self, arch: str, seed: int, dim: int = 64,
                 input_shape: tuple[int, int, int] = (32, 32, 3), name: str | None = None):
        super().__init__()
        if arch not in ARCHITECTURES:
            raise ValueError(f"unknown embedder architecture {arch!r}; known: {sorted(ARCHITECTURES)}")
        self.arch = arch
        self.seed = int(seed)
        self.dim = int(dim)
        self.input_shape = tuple(input_shape)
        self.name = name or f"{arch}-s{seed}"
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            stages = ARCHITECTURES[arch]()
            self.stages = nn.ModuleDict(stages)
            self.head = nn.Linear(_TRUNK_WIDTH, self.dim)
        self.frozen = False

    @property
    def tap_layers(self) -> list[str]:
        return list(self.stages.keys())

    def descriptor(self) -> dict:
        return {"arch": self.arch, "seed": self.seed, "dim": self.dim,
                "input_shape": list(self.input_shape), "name": self.name,
                "taps": self.tap_layers}

    def _check(self, x: torch.Tensor) -> None:
        h, w, c = self.input_shape
        if x.ndim != 4 or tuple(x.shape[1:]) != (c, h, w):
            raise ImageError(
                f"extractor {self.name} expects (N, {c}, {h}, {w}) input, got {tuple(x.shape)}"
            )

    def taps(self, x: torch.Tensor) -> list[torch.Tensor]:
        self._check(x)
        feats = []
        for stage in self.stages.values():
            x = stage(x)
            feats.append(x)
        return feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        last = self.taps(x)[-1]
        return self.head(last.mean(dim=(2, 3)))

    def freeze(self) -> "FeatureExtractor":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.frozen = True
        return self

    def checksum(self) -> str:
        return state_checksum(self)


def embed(ex: FeatureExtractor, img):
    """Embedding of one image or a batch.

    numpy input (H, W, C) / (N, H, W, C) gives a numpy vector / matrix;
    a torch (N, C, H, W) tensor gives a differentiable tensor.
    """
    if isinstance(img, torch.Tensor):
        return ex(img.to(next(ex.parameters()).dtype))
    arr = np.asarray(img)
    single = arr.ndim == 3
    with torch.no_grad():
        out = ex(to_torch(arr).to(next(ex.parameters()).dtype)).double().numpy()
    return out[0] if single else out


def train_embedder(ex: FeatureExtractor, images: np.ndarray, labels: np.ndarray,
                   steps: int = 200, lr: float = 1e-3, seed: int = 0) -> FeatureExtractor:
    """Briefly fit the embedder with a throwaway softmax head."""
    if ex.frozen:
        raise RuntimeError(f"extractor {ex.name} is frozen")
    g = torch.Generator().manual_seed(seed)
    n_cls = int(labels.max()) + 1
    clf = nn.Linear(ex.dim, n_cls)
    opt = torch.optim.Adam(list(ex.parameters()) + list(clf.parameters()), lr=lr)
    x_all, y_all = to_torch(images), torch.as_tensor(labels, dtype=torch.long)
    ex.train()
    for _ in range(steps):
        idx = torch.randint(0, len(x_all), (min(32, len(x_all)),), generator=g)
        loss = F.cross_entropy(clf(ex(x_all[idx])), y_all[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    ex.eval()
    return ex


def make_desk_embedder(seed: int, arch: str = "conv_small", dim: int = 64,
                       input_shape=(32, 32, 3), train_data=None, train_steps: int = 200) -> FeatureExtractor:
    """Deterministically initialised (optionally briefly trained) frozen embedder."""
    ex = FeatureExtractor(arch, seed, dim=dim, input_shape=input_shape)
    if train_data is not None:
        images, labels = train_data
        train_embedder(ex, images, labels, steps=train_steps, seed=seed)
    return ex.freeze()


def save_extractor(ex: FeatureExtractor, path) -> None:
    write_checkpoint(path, "extractor", ex.descriptor(), ex.state_dict(),
                     seed_label=str(ex.seed), frozen=ex.frozen)


def load_extractor(path) -> FeatureExtractor:
    blob = read_checkpoint(path, "extractor")
    d = blob["descriptor"]
    ex = FeatureExtractor(d["arch"], d["seed"], dim=d["dim"],
                          input_shape=tuple(d["input_shape"]), name=d["name"])
    ex.load_state_dict(blob["state"])
    return ex.freeze() if blob.get("frozen", True) else ex
