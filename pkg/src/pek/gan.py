"""Shared GAN machinery: generators, PatchGAN discriminator, losses, one training step.

Tensors are (N, C, H, W) in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import read_checkpoint, write_checkpoint
from .embedders import FeatureExtractor

LOG_EPS = 1e-12


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- generators


def _norm(kind: str, ch: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(ch)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown norm {kind!r}")


class _ResnetBlock(nn.Module):
    def __init__(self, ch, norm="instance"):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), _norm(norm, ch), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), _norm(norm, ch),
        )
        # residual branch starts at zero: the block is the identity at init
        nn.init.zeros_(self.body[5].weight)
        nn.init.zeros_(self.body[5].bias)

    def forward(self, x):
        return x + self.body(x)


class ResnetGenerator(nn.Module):
    """pix2pix/CycleGAN ResNet generator: c7 stem, two stride-2 downsamples,
    ``n_blocks`` residual blocks, two transposed-conv upsamples, c7 head.
    The head is a sigmoid so outputs stay in [0, 1]."""

    variant = "resnet9"

    def __init__(self, ngf: int = 64, n_blocks: int = 9, channels: int = 3, norm: str = "instance"):
        super().__init__()
        self.config = {"ngf": ngf, "n_blocks": n_blocks, "channels": channels, "norm": norm}
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(channels, ngf, 7),
                  _norm(norm, ngf), nn.ReLU(True)]
        ch = ngf
        for _ in range(2):
            layers += [nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1),
                       _norm(norm, ch * 2), nn.ReLU(True)]
            ch *= 2
        layers += [_ResnetBlock(ch, norm) for _ in range(n_blocks)]
        for _ in range(2):
            layers += [nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                       _norm(norm, ch // 2), nn.ReLU(True)]
            ch //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(ch, channels, 7), nn.Sigmoid()]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class _Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, mid, stride=1):
        super().__init__()
        cout = mid * self.expansion
        self.c1 = nn.Conv2d(cin, mid, 1)
        self.c2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=1)
        self.c3 = nn.Conv2d(mid, cout, 1)
        nn.init.zeros_(self.c3.weight)
        nn.init.zeros_(self.c3.bias)
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = nn.Conv2d(cin, cout, 1, stride=stride)

    def forward(self, x):
        y = self.c3(F.relu(self.c2(F.relu(self.c1(x)))))
        skip = x if self.proj is None else self.proj(x)
        return F.relu(skip + y)


class ResEncoderGenerator(nn.Module):
    """ResNet-50 style bottleneck encoder followed by an upsampling decoder.

    The stem is a ``stem`` x ``stem`` convolution with stride ``stem`` so that
    each stem cell sees exactly one cipher block. The defaults reproduce the
    ResNet-50 stage layout (3, 4, 6, 3); desk runs use a single block per stage.
    """

    variant = "resnet50_encoder"

    def __init__(self, width: int = 64, layers=(3, 4, 6, 3), strides=(1, 2, 2, 2),
                 stem: int = 4, channels: int = 3):
        super().__init__()
        layers, strides = tuple(layers), tuple(strides)
        if len(layers) != len(strides):
            raise ValueError("layers and strides must have equal length")
        self.config = {"width": width, "layers": list(layers), "strides": list(strides),
                       "stem": stem, "channels": channels}
        self.stem = nn.Conv2d(channels, width, stem, stride=stem)
        blocks, cin = [], width
        for i, (n, s) in enumerate(zip(layers, strides)):
            mid = width * 2 ** i
            for j in range(n):
                blocks.append(_Bottleneck(cin, mid, stride=s if j == 0 else 1))
                cin = mid * _Bottleneck.expansion
        self.encoder = nn.Sequential(*blocks)
        factor = stem * math.prod(strides)
        n_up = int(round(math.log2(factor)))
        if 2 ** n_up != factor:
            raise ValueError("stem * prod(strides) must be a power of two")
        dec, ch = [], cin
        for _ in range(n_up):
            nxt = max(ch // 2, 16)
            dec += [nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                    nn.Conv2d(ch, nxt, 3, padding=1), nn.ReLU(True)]
            ch = nxt
        dec += [nn.Conv2d(ch, channels, 3, padding=1), nn.Sigmoid()]
        self.decoder = nn.Sequential(*dec)

    def forward(self, x):
        return self.decoder(self.encoder(F.relu(self.stem(x))))


GENERATORS = {
    ResnetGenerator.variant: ResnetGenerator,
    ResEncoderGenerator.variant: ResEncoderGenerator,
}


def build_generator(variant: str, seed: int, **kwargs) -> nn.Module:
    """Construct a generator with parameters drawn deterministically from ``seed``."""
    if variant not in GENERATORS:
        raise ValueError(f"unknown generator variant {variant!r}; known: {sorted(GENERATORS)}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        g = GENERATORS[variant](**kwargs)
    g.seed = int(seed)
    return g


# ---------------------------------------------------------------- discriminator


class PatchDiscriminator(nn.Module):
    """Three-convolution PatchGAN. Emits an (N, 1, P, P) map of probabilities.

    No normalisation layers, so each score depends only on its receptive field.
    """

    variant = "patchgan"

    def __init__(self, ndf: int = 64, channels: int = 3, conditional: bool = False):
        super().__init__()
        self.config = {"ndf": ndf, "channels": channels, "conditional": conditional}
        self.conditional = conditional
        cin = channels * (2 if conditional else 1)
        self.model = nn.Sequential(
            nn.Conv2d(cin, ndf, 4, stride=2, padding=1), nn.LeakyReLU(0.2, True),
            nn.Conv2d(ndf, ndf * 2, 4, stride=2, padding=1), nn.LeakyReLU(0.2, True),
            nn.Conv2d(ndf * 2, 1, 4, stride=1, padding=1),
        )

    # (kernel, stride, padding) of each conv, for receptive-field bookkeeping
    geometry = ((4, 2, 1), (4, 2, 1), (4, 1, 1))

    def forward(self, x, condition=None):
        if self.conditional:
            if condition is None:
                raise ValueError("conditional discriminator needs the encrypted input")
            x = torch.cat([x, condition], dim=1)
        return torch.sigmoid(self.model(x))


def build_discriminator(seed: int, **kwargs) -> PatchDiscriminator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        d = PatchDiscriminator(**kwargs)
    d.seed = int(seed)
    return d


# ---------------------------------------------------------------- losses


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def adv_loss(D: nn.Module, real: torch.Tensor, fake: torch.Tensor, condition=None) -> torch.Tensor:
    """E[log D(real)] + E[log(1 - D(fake))], averaged over batch and patch map."""
    _check_shapes(real, fake)
    if real.shape[0] == 0:
        raise ValueError("empty batch")
    kw = {} if condition is None else {"condition": condition}
    d_real = D(real, **kw)
    d_fake = D(fake, **kw)
    return (torch.log(d_real.clamp_min(LOG_EPS)).mean()
            + torch.log((1 - d_fake).clamp_min(LOG_EPS)).mean())


def l1_loss(target: torch.Tensor, output: torch.Tensor) -> torch.Tensor:
    _check_shapes(target, output)
    return (target - output).abs().mean()


def feature_loss(h: FeatureExtractor, target: torch.Tensor, output: torch.Tensor) -> torch.Tensor:
    """Batch mean of (1/n) * sum_i (h(target)_i - h(output)_i)^2."""
    _check_shapes(target, output)
    return ((h(target) - h(output)) ** 2).mean()


def total_loss(alpha: float, beta: float, gamma: float, l_adv, l_g, l_h):
    if min(alpha, beta, gamma) < 0:
        raise ValueError("loss coefficients must be non-negative")
    return alpha * l_adv + beta * l_g + gamma * l_h


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 100.0
    gamma: float = 1.0
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    epochs: int = 220
    batch_size: int = 32
    seed: int = 0
    conditional: bool = False
    update_discriminator: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch size and epoch budget must be >= 1")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss coefficients must be non-negative")
        self.betas = tuple(self.betas)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass(frozen=True)
class LossRecord:
    adv: float
    g: float
    h: float
    total: float
    d: float


class GanTrainer:
    """Owns a (G, D) pair plus their optimisers; ``h`` is used read-only.

    One :meth:`step` descends the total loss in G and ascends the adversarial
    loss in D, one D update per G update.
    """

    def __init__(self, G: nn.Module, D: nn.Module, h: FeatureExtractor | None, cfg: TrainConfig):
        if h is not None and not getattr(h, "frozen", False):
            raise ValueError("the feature branch must be frozen before training")
        if h is None and cfg.gamma > 0:
            raise ValueError("gamma > 0 needs a feature extractor")
        self.G, self.D, self.h, self.cfg = G, D, h, cfg
        self.opt_g = torch.optim.Adam(G.parameters(), lr=cfg.lr, betas=cfg.betas)
        d_params = [p for p in D.parameters() if p.requires_grad]
        self.opt_d = torch.optim.Adam(d_params, lr=cfg.lr, betas=cfg.betas) if d_params else None
        self.steps = 0

    def losses(self, source: torch.Tensor, target: torch.Tensor):
        fake = self.G(source)
        cond = source if self.cfg.conditional else None
        l_adv = adv_loss(self.D, target, fake, condition=cond)
        l_g = l1_loss(target, fake)
        l_h = feature_loss(self.h, target, fake) if self.h is not None else fake.new_zeros(())
        total = total_loss(self.cfg.alpha, self.cfg.beta, self.cfg.gamma, l_adv, l_g, l_h)
        return fake, l_adv, l_g, l_h, total

    def step(self, source: torch.Tensor, target: torch.Tensor) -> LossRecord:
        self.G.train()
        fake, l_adv, l_g, l_h, total = self.losses(source, target)
        if not torch.isfinite(total):
            raise TrainingDiverged(
                f"non-finite loss at step {self.steps}: adv={l_adv.item()} "
                f"g={l_g.item()} h={l_h.item()}"
            )
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()

        l_d = float("nan")
        if self.cfg.update_discriminator and self.opt_d is not None:
            cond = source if self.cfg.conditional else None
            d_obj = adv_loss(self.D, target, fake.detach(), condition=cond)
            self.opt_d.zero_grad(set_to_none=True)
            (-d_obj).backward()
            self.opt_d.step()
            l_d = d_obj.item()
        self.steps += 1
        return LossRecord(l_adv.item(), l_g.item(), l_h.item(), total.item(), l_d)


def minibatches(n: int, batch_size: int, generator: torch.Generator):
    order = torch.randperm(n, generator=generator)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def set_deterministic(seed: int) -> torch.Generator:
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


# ---------------------------------------------------------------- checkpoints


def generator_descriptor(G: nn.Module) -> dict:
    return {"variant": G.variant, "config": dict(G.config), "init_seed": getattr(G, "seed", None)}


def save_generator(G: nn.Module, path, seed_label: str = "", epoch: int = 0,
                   coefficients: dict | None = None, kind: str = "generator", **extra) -> None:
    write_checkpoint(path, kind, generator_descriptor(G), G.state_dict(),
                     seed_label=seed_label, epoch=epoch, coefficients=coefficients or {}, **extra)


def generator_from_blob(blob: dict) -> nn.Module:
    d = blob["descriptor"]
    G = GENERATORS[d["variant"]](**d["config"])
    G.load_state_dict(blob["state"])
    G.seed = d.get("init_seed")
    G.eval()
    return G


def load_generator(path, kind: str = "generator") -> tuple[nn.Module, dict]:
    blob = read_checkpoint(path, kind)
    return generator_from_blob(blob), blob
