"""Master key attack: learn one reconstruction model from pairs encrypted under
many keys, then apply it to ciphertexts made under keys it has never seen.

Training descends alpha * L_adv + beta * L1 + gamma * L_feature in the
generator and ascends L_adv in a PatchGAN discriminator, one D step per G
step, while the feature branch h stays frozen.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import read_checkpoint, write_checkpoint
from .embedders import FeatureExtractor, embed
from .gan import (GanTrainer, TrainConfig, TrainingDiverged, build_discriminator, build_generator,
                  generator_descriptor, generator_from_blob, l1_loss, minibatches)
from .imaging import ImageError, from_torch, to_torch
from .metrics import MetricReport, evaluate_pairs
from .surrogate import ManifestError, SurrogateManifest

log = logging.getLogger(__name__)

DESK_GENERATOR = {"width": 8, "layers": (1, 1, 1), "strides": (1, 1, 1), "stem": 4}
CIPHERTEXT, ATTACK = "ciphertext", "attack"


class KeyLeakError(RuntimeError):
    """A test key also appears in the model's training provenance."""


@dataclass
class MasterKeyModel:
    generator: nn.Module
    discriminator: nn.Module | None
    feature_branch: dict                 # descriptor + checksum of the frozen h
    config: dict
    provenance: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @property
    def training_keys(self) -> set[str]:
        return set(self.provenance.get("key_labels", []))

    def save(self, path) -> None:
        write_checkpoint(
            path, "master_key", generator_descriptor(self.generator), self.generator.state_dict(),
            discriminator={"config": self.discriminator.config,
                           "state": self.discriminator.state_dict()} if self.discriminator else None,
            feature_branch=self.feature_branch, train_config=self.config,
            provenance=self.provenance, history=self.history,
            epoch=self.provenance.get("epochs_completed", 0),
            coefficients={k: self.config.get(k) for k in ("alpha", "beta", "gamma")},
        )

    @classmethod
    def load(cls, path) -> "MasterKeyModel":
        blob = read_checkpoint(path, "master_key")
        G = generator_from_blob(blob)
        D = None
        if blob.get("discriminator"):
            D = build_discriminator(0, **blob["discriminator"]["config"])
            D.load_state_dict(blob["discriminator"]["state"])
        return cls(G, D, blob["feature_branch"], blob["train_config"],
                   blob["provenance"], blob.get("history", []))


def _as_arrays(data, split: str | None = None):
    if isinstance(data, SurrogateManifest):
        return data.load_arrays(split)
    orig, enc, labels, ids = data
    return np.asarray(orig), np.asarray(enc), list(labels), list(ids)


def train_master_key(S: SurrogateManifest, h: FeatureExtractor, cfg: TrainConfig,
                     generator_kwargs: dict | None = None, ndf: int = 32,
                     manifest_hash: str = "", log_fn=None) -> MasterKeyModel:
    """Fit the master key generator on the train split of ``S``.

    The generator state with the lowest validation L1 is kept.
    """
    x_orig, x_enc, labels, _ = _as_arrays(S, "train")
    if len(set(labels)) < 2:
        raise ManifestError("master key training needs pairs from at least two keys")
    try:
        v_orig, v_enc, v_labels, _ = _as_arrays(S, "val")
    except ManifestError:
        v_orig = v_enc = None
        v_labels = []
    h_sum = h.checksum()
    gkw = dict(DESK_GENERATOR if generator_kwargs is None else generator_kwargs)
    G = build_generator("resnet50_encoder", cfg.seed, **gkw)
    D = build_discriminator(cfg.seed + 1, ndf=ndf, conditional=cfg.conditional)
    trainer = GanTrainer(G, D, h, cfg)
    src, tgt = to_torch(x_enc), to_torch(x_orig)
    vsrc = to_torch(v_enc) if v_enc is not None else None
    vtgt = to_torch(v_orig) if v_orig is not None else None
    gen = torch.Generator().manual_seed(cfg.seed)

    history, best_state, best_val, best_epoch = [], None, float("inf"), -1
    for epoch in range(cfg.epochs):
        recs = [trainer.step(src[idx], tgt[idx])
                for idx in minibatches(len(src), cfg.batch_size, gen)]
        row = {
            "epoch": epoch,
            "adv": float(np.mean([r.adv for r in recs])),
            "g": float(np.mean([r.g for r in recs])),
            "h": float(np.mean([r.h for r in recs])),
            "total": float(np.mean([r.total for r in recs])),
            "d": float(np.mean([r.d for r in recs])),
        }
        if vsrc is not None:
            G.eval()
            with torch.no_grad():
                total = sum(l1_loss(vtgt[i:i + 256], G(vsrc[i:i + 256])).item() * len(vsrc[i:i + 256])
                            for i in range(0, len(vsrc), 256))
            row["val_l1"] = total / len(vsrc)
            score = row["val_l1"]
        else:
            score = row["g"]
        if score < best_val:
            best_val, best_epoch = score, epoch
            best_state = copy.deepcopy(G.state_dict())
        history.append(row)
        if log_fn:
            log_fn(f"epoch {epoch}: " + " ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "epoch"))

    if h.checksum() != h_sum:
        raise RuntimeError("feature branch parameters changed during training")
    G.load_state_dict(best_state)
    G.eval()
    provenance = {
        "manifest_hash": manifest_hash,
        "key_labels": sorted(set(labels) | set(v_labels)),
        "train_pairs": len(src),
        "val_pairs": 0 if vsrc is None else len(vsrc),
        "epochs_completed": cfg.epochs,
        "best_epoch": best_epoch,
        "best_val_l1": best_val,
        "generator": generator_descriptor(G),
    }
    fb = {"descriptor": h.descriptor(), "checksum": h_sum}
    return MasterKeyModel(G, D, fb, cfg.as_dict(), provenance, history)


def attack(M: MasterKeyModel | nn.Module, x_enc, batch_size: int = 256) -> np.ndarray:
    """Reconstruct originals from ciphertexts. One (H, W, C) image or a batch."""
    G = M.generator if isinstance(M, MasterKeyModel) else M
    arr = np.asarray(x_enc)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    G.eval()
    outs = []
    try:
        with torch.no_grad():
            for i in range(0, len(arr), batch_size):
                outs.append(from_torch(G(to_torch(arr[i:i + batch_size]))))
    except RuntimeError as exc:
        raise ImageError(f"ciphertext shape {arr.shape[1:]} incompatible with the model: {exc}") from exc
    out = np.concatenate(outs)
    if out.shape != arr.shape:
        raise ImageError(f"model maps {arr.shape[1:]} to {out.shape[1:]}")
    return out[0] if single else out


def check_key_hygiene(M: MasterKeyModel, labels) -> None:
    leaked = sorted(set(labels) & M.training_keys)
    if leaked:
        raise KeyLeakError(f"test keys present in training provenance: {leaked}")


def _key_deltas(report: MetricReport) -> dict:
    agg = report.aggregates
    out = {}
    for label in sorted({k.rsplit(":", 1)[0] for k in agg}):
        base, att = agg.get(f"{label}:{CIPHERTEXT}"), agg.get(f"{label}:{ATTACK}")
        if base and att:
            out[label] = {m: att[m] - base[m] for m in ("cosine", "ssim", "lpips")}
    return out


def evaluate_attack(M: MasterKeyModel, test, extractor: FeatureExtractor,
                    experiment: str = "evaluate_attack", recon=None) -> MetricReport:
    """Score ciphertext-vs-original (baseline) and reconstruction-vs-original per key."""
    orig, enc, labels, ids = _as_arrays(test)
    check_key_hygiene(M, labels)
    recon = attack(M, enc) if recon is None else recon
    pairs = []
    for o, e, r, lab, pid in zip(orig, enc, recon, labels, ids):
        pairs.append((o, e, pid, f"{lab}:{CIPHERTEXT}"))
        pairs.append((o, r, pid, f"{lab}:{ATTACK}"))
    report = evaluate_pairs(pairs, extractor, experiment=experiment,
                            feature_branch=M.feature_branch.get("descriptor", {}).get("name", ""))
    report.metadata["deltas"] = _key_deltas(report)
    return report


def _embedding_cosine(ex: FeatureExtractor, a: np.ndarray, b: np.ndarray) -> float:
    ea, eb = embed(ex, a), embed(ex, b)
    num = (ea * eb).sum(axis=1)
    den = np.linalg.norm(ea, axis=1) * np.linalg.norm(eb, axis=1)
    return float(np.mean(num / den))


def transferability_eval(M: MasterKeyModel, sets: dict[str, tuple], service: dict[str, FeatureExtractor],
                         extractor: FeatureExtractor, trained_against: str) -> MetricReport:
    """Evaluate M on ciphertexts that targeted other service embedders.

    ``sets`` maps embedder name -> (orig, enc, labels, ids); ``service`` maps the
    same names to the embedders, used for embedding-space cosine.
    """
    if not sets:
        raise ValueError("no ciphertext sets given")
    rows, deltas, emb_cos = [], {}, {}
    for name in sorted(sets):
        orig, enc, labels, ids = _as_arrays(sets[name])
        check_key_hygiene(M, labels)
        sub = evaluate_attack(M, (orig, enc, [f"{name}/{l}" for l in labels], ids),
                              extractor, experiment="transferability")
        rows.extend(sub.rows)
        deltas.update(sub.metadata["deltas"])
        recon = attack(M, enc)
        emb_cos[name] = {CIPHERTEXT: _embedding_cosine(service[name], orig, enc),
                         ATTACK: _embedding_cosine(service[name], orig, recon)}
    meta = {"experiment": "transferability", "extractor": extractor.name,
            "trained_against": trained_against, "embedders": sorted(sets),
            "embedding_cosine": emb_cos, "deltas": deltas}
    return MetricReport(rows, meta)


# ---------------------------------------------------------------- autoencoder baseline


class AutoencoderBaseline(nn.Module):
    """Three strided convolutions down, three transposed convolutions up."""

    def __init__(self, width: int = 32, channels: int = 3, key_label: str = ""):
        super().__init__()
        self.key_label = key_label
        self.config = {"width": width, "channels": channels}
        w = width
        self.encoder = nn.Sequential(
            nn.Conv2d(channels, w, 4, 2, 1), nn.ReLU(True),
            nn.Conv2d(w, 2 * w, 4, 2, 1), nn.ReLU(True),
            nn.Conv2d(2 * w, 4 * w, 4, 2, 1), nn.ReLU(True),
        )
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(4 * w, 2 * w, 4, 2, 1), nn.ReLU(True),
            nn.ConvTranspose2d(2 * w, w, 4, 2, 1), nn.ReLU(True),
            nn.ConvTranspose2d(w, channels, 4, 2, 1), nn.Sigmoid(),
        )

    def forward(self, x):
        return self.decoder(self.encoder(x))

    def save(self, path) -> None:
        write_checkpoint(path, "autoencoder", {"variant": "autoencoder3", "config": self.config},
                         self.state_dict(), seed_label=self.key_label)

    @classmethod
    def load(cls, path) -> "AutoencoderBaseline":
        blob = read_checkpoint(path, "autoencoder")
        ae = cls(**blob["descriptor"]["config"], key_label=blob["seed_label"])
        ae.load_state_dict(blob["state"])
        return ae.eval()


def train_autoencoder_baseline(pairs, cfg: TrainConfig, width: int = 32) -> AutoencoderBaseline:
    """Fit the autoencoder on pairs from exactly one key with a mean squared error."""
    orig, enc, labels, _ = _as_arrays(pairs, "train") if isinstance(pairs, SurrogateManifest) else _as_arrays(pairs)
    keys = set(labels)
    if len(keys) != 1:
        raise ValueError(f"autoencoder baseline trains on a single key, got {sorted(keys)}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        ae = AutoencoderBaseline(width, key_label=keys.pop())
    opt = torch.optim.Adam(ae.parameters(), lr=cfg.lr, betas=cfg.betas)
    src, tgt = to_torch(enc), to_torch(orig)
    gen = torch.Generator().manual_seed(cfg.seed)
    ae.train()
    for _ in range(cfg.epochs):
        for idx in minibatches(len(src), cfg.batch_size, gen):
            loss = F.mse_loss(ae(src[idx]), tgt[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged("autoencoder loss became non-finite")
            opt.zero_grad()
            loss.backward()
            opt.step()
    return ae.eval()
