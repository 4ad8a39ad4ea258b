"""Optimisation-based perceptual encryption with a secret reconstruction GAN.

The secret key is a reconstruction generator G trained from a secret seed.
Encrypting x searches for an x' that

* keeps the service embedding f(x') close to f(x),
* lets G map x' back to x,
* has the same pixel variance in every block of a k x k grid,

starting from seeded noise so the ciphertext does not inherit x's structure.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import read_checkpoint, seed_from_label
from .embedders import FeatureExtractor
from .gan import (GanTrainer, TrainConfig, TrainingDiverged, build_discriminator,
                  build_generator, generator_from_blob, l1_loss, minibatches, save_generator)
from .imaging import ImageError, from_torch, to_torch

RECONSTRUCTION_THRESHOLD = 0.05
MIN_TRAINING_IMAGES = 100


@dataclass
class SecretGan:
    generator: nn.Module
    seed_label: str
    dataset_tag: str = "synthetic"
    val_l1: float = float("nan")
    history: list = field(default_factory=list)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return self.generator(x)

    @property
    def meets_threshold(self) -> bool:
        return self.val_l1 < RECONSTRUCTION_THRESHOLD

    def save(self, path) -> None:
        save_generator(self.generator, path, seed_label=self.seed_label, kind="secret_gan",
                       dataset_tag=self.dataset_tag, val_l1=self.val_l1,
                       epoch=len(self.history))

    @classmethod
    def load(cls, path) -> "SecretGan":
        blob = read_checkpoint(path, "secret_gan")
        G = generator_from_blob(blob)
        for p in G.parameters():
            p.requires_grad_(False)
        return cls(G, blob["seed_label"], blob.get("dataset_tag", ""), blob.get("val_l1", float("nan")))


@dataclass
class AvihConfig:
    steps: int = 500
    step_size: float = 0.01
    lambda_f: float = 1.0
    lambda_g: float = 1.0
    lambda_v: float = 10.0
    grid: int = 4
    init: str = "noise"
    rng_seed: int = 0
    record_every: int = 10

    def __post_init__(self):
        if self.steps < 1 or self.step_size <= 0:
            raise ValueError("steps must be >= 1 and step_size > 0")
        if self.grid < 2:
            raise ValueError("variance grid needs k >= 2 blocks per side")
        if self.init not in ("noise", "copy"):
            raise ValueError(f"unknown init mode {self.init!r}")

    def as_dict(self) -> dict:
        return asdict(self)


def train_secret_gan(images: np.ndarray, seed_label: str, cfg: TrainConfig,
                     dataset_tag: str = "synthetic", val_fraction: float = 0.2,
                     ngf: int = 8, n_blocks: int = 9, ndf: int = 16, norm: str = "none",
                     log=None) -> SecretGan:
    """Fit a seed-specific reconstruction GAN G(x) ~ x on ``images``."""
    images = np.asarray(images)
    if len(images) < MIN_TRAINING_IMAGES:
        raise ValueError(f"need at least {MIN_TRAINING_IMAGES} training images, got {len(images)}")
    seed = seed_from_label(seed_label)
    G = build_generator("resnet9", seed, ngf=ngf, n_blocks=n_blocks, norm=norm)
    D = build_discriminator(seed ^ 0x5A5A, ndf=ndf)
    cfg = TrainConfig(**{**cfg.as_dict(), "gamma": 0.0, "conditional": False})
    trainer = GanTrainer(G, D, None, cfg)

    n_val = max(1, int(round(len(images) * val_fraction)))
    data = to_torch(images)
    train, val = data[n_val:], data[:n_val]
    gen = torch.Generator().manual_seed(seed)
    history, best, best_val = [], None, float("inf")
    for epoch in range(cfg.epochs):
        recs = [trainer.step(train[idx], train[idx]) for idx in minibatches(len(train), cfg.batch_size, gen)]
        G.eval()
        with torch.no_grad():
            v = l1_loss(val, G(val)).item()
        history.append({"epoch": epoch, "train_l1": float(np.mean([r.g for r in recs])), "val_l1": v})
        if v < best_val:
            best_val, best = v, copy.deepcopy(G.state_dict())
        if log:
            log(f"secret gan {seed_label} epoch {epoch} val_l1={v:.4f}")
    G.load_state_dict(best)
    for p in G.parameters():
        p.requires_grad_(False)
    G.eval()
    return SecretGan(G, str(seed_label), dataset_tag, best_val, history)


def block_variances(x: torch.Tensor, grid) -> torch.Tensor:
    """Pixel variance of each block of a ``grid`` partition, shape (N, n_blocks)."""
    kr, kc = (grid, grid) if isinstance(grid, int) else tuple(grid)
    n, c, h, w = x.shape
    if h % kr or w % kc:
        raise ImageError(f"a {kr}x{kc} block grid does not tile a {h}x{w} image")
    blocks = x.reshape(n, c, kr, h // kr, kc, w // kc).permute(0, 2, 4, 1, 3, 5)
    blocks = blocks.reshape(n, kr * kc, -1)
    return blocks.var(dim=2, unbiased=False)


def variance_consistency_loss(x, grid) -> torch.Tensor | float:
    """Spread of block variances: mean_b (v_b - mean(v))^2.

    ``grid`` is k (k x k blocks) or (rows, cols). Tensor input gives a
    per-image tensor; a numpy (H, W, C) image gives a float.
    """
    if isinstance(x, torch.Tensor):
        v = block_variances(x, grid)
        return ((v - v.mean(dim=1, keepdim=True)) ** 2).mean(dim=1)
    return float(variance_consistency_loss(to_torch(np.asarray(x, dtype=np.float64)).double(), grid)[0])


@dataclass
class AvihResult:
    images: np.ndarray          # (N, H, W, C)
    objective: np.ndarray       # (steps + 1, N), objective at every iterate
    best: np.ndarray            # (steps + 1, N), best-so-far objective
    recorded_steps: np.ndarray  # indices sampled every cfg.record_every
    components: dict            # per-term values at the returned iterate


def _objective(xp, x, f_target, f: FeatureExtractor, G, cfg: AvihConfig):
    terms = {}
    terms["f"] = ((f(xp) - f_target) ** 2).mean(dim=1) if cfg.lambda_f else xp.new_zeros(len(xp))
    terms["g"] = (G(xp) - x).abs().mean(dim=(1, 2, 3)) if cfg.lambda_g else xp.new_zeros(len(xp))
    terms["v"] = variance_consistency_loss(xp, cfg.grid) if cfg.lambda_v else xp.new_zeros(len(xp))
    total = cfg.lambda_f * terms["f"] + cfg.lambda_g * terms["g"] + cfg.lambda_v * terms["v"]
    return total, terms


def _init_noise(shape, seeds) -> torch.Tensor:
    return torch.stack([torch.rand(shape[1:], generator=torch.Generator().manual_seed(int(s)))
                        for s in seeds])


def avih_encrypt_batch(images: np.ndarray, f: FeatureExtractor, G, cfg: AvihConfig,
                       seeds=None) -> AvihResult:
    """Encrypt a batch. Each image has its own objective and its own noise seed
    (default ``cfg.rng_seed + i``), so results do not depend on batch makeup."""
    G = G.generator if isinstance(G, SecretGan) else G
    x = to_torch(images)
    n, c, h, w = x.shape
    if h % cfg.grid or w % cfg.grid:
        raise ImageError(f"variance grid {cfg.grid} does not tile {h}x{w}")
    G.eval()
    with torch.no_grad():
        f_target = f(x)
    if seeds is None:
        seeds = [cfg.rng_seed + i for i in range(n)]
    if len(seeds) != n:
        raise ValueError("need one noise seed per image")
    if cfg.init == "noise":
        xp = _init_noise(x.shape, seeds)
    else:
        xp = x.clone()
    xp.requires_grad_(True)
    opt = torch.optim.Adam([xp], lr=cfg.step_size)

    best = xp.detach().clone()
    best_val = torch.full((n,), float("inf"))
    trace, best_trace = [], []
    for step in range(cfg.steps + 1):
        total, _ = _objective(xp, x, f_target, f, G, cfg)
        if not torch.all(torch.isfinite(total)):
            raise TrainingDiverged(f"AVIH objective became non-finite at step {step}")
        with torch.no_grad():
            better = total < best_val
            best[better] = xp.detach()[better]
            best_val = torch.where(better, total.detach(), best_val)
        trace.append(total.detach().numpy().copy())
        best_trace.append(best_val.numpy().copy())
        if step == cfg.steps:
            break
        grad, = torch.autograd.grad(total.sum(), xp)
        xp.grad = grad
        opt.step()
        with torch.no_grad():
            xp.clamp_(0.0, 1.0)

    with torch.no_grad():
        _, terms = _objective(best, x, f_target, f, G, cfg)
    recorded = np.arange(0, cfg.steps + 1, cfg.record_every)
    return AvihResult(
        images=from_torch(best),
        objective=np.stack(trace),
        best=np.stack(best_trace),
        recorded_steps=recorded,
        components={k: v.numpy() for k, v in terms.items()},
    )


def avih_encrypt(x: np.ndarray, f: FeatureExtractor, G, cfg: AvihConfig) -> np.ndarray:
    return avih_encrypt_batch(np.asarray(x)[None], f, G, cfg).images[0]


def avih_decrypt(xp: np.ndarray, G) -> np.ndarray:
    """Authorised recovery G(x'). Accepts one image or a batch."""
    G = G.generator if isinstance(G, SecretGan) else G
    arr = np.asarray(xp)
    single = arr.ndim == 3
    G.eval()
    try:
        with torch.no_grad():
            out = from_torch(G(to_torch(arr)))
    except RuntimeError as exc:
        raise ImageError(f"input shape {arr.shape} incompatible with the secret GAN: {exc}") from exc
    return out[0] if single else out
