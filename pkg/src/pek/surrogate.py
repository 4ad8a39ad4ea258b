"""Surrogate (original, encrypted) pair datasets for training attacks.

Pairs are written as PNG files and indexed by a tab-separated manifest::

    # pek-surrogate-manifest version=1
    pair_id<TAB>orig_path<TAB>enc_path<TAB>seed_label<TAB>dataset_tag<TAB>split

Paths are stored relative to the manifest's directory.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, replace

import numpy as np

from .avih import AvihConfig, SecretGan, avih_encrypt_batch
from .ciphers import etc_encrypt, etc_keygen, le_encrypt, le_keygen, per_image_seed
from .embedders import FeatureExtractor
from .gan import TrainingDiverged
from .imaging import load_image, save_image, to_uint8
from .metrics import ssim

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
HEADER = f"# pek-surrogate-manifest version={MANIFEST_VERSION}"
SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class PairRecord:
    pair_id: str
    orig_path: str
    enc_path: str
    seed_label: str
    dataset_tag: str
    split: str = ""


@dataclass
class SurrogateManifest:
    records: list[PairRecord]
    root: str = "."
    split_seed: int | None = None

    @property
    def counts(self) -> dict[str, int]:
        return dict(sorted(Counter(r.seed_label for r in self.records).items()))

    @property
    def seed_labels(self) -> list[str]:
        return sorted({r.seed_label for r in self.records})

    def split(self, name: str) -> list[PairRecord]:
        return [r for r in self.records if r.split == name]

    def resolve(self, rel: str) -> str:
        return rel if os.path.isabs(rel) else os.path.join(self.root, rel)

    def load_arrays(self, split: str | None = None, records=None):
        """Return (originals, encrypted, seed_labels, pair_ids) for a split."""
        recs = records if records is not None else (
            self.records if split is None else self.split(split))
        if not recs:
            raise ManifestError(f"no records in split {split!r}")
        orig = np.stack([load_image(self.resolve(r.orig_path)) for r in recs])
        enc = np.stack([load_image(self.resolve(r.enc_path)) for r in recs])
        return orig, enc, [r.seed_label for r in recs], [r.pair_id for r in recs]

    def validate(self) -> None:
        ids = [r.pair_id for r in self.records]
        if len(ids) != len(set(ids)):
            raise ManifestError("duplicate pair ids in manifest")
        for r in self.records:
            if r.split not in SPLITS:
                raise ManifestError(f"record {r.pair_id} has invalid split {r.split!r}")
            for p in (r.orig_path, r.enc_path):
                if not os.path.isfile(self.resolve(p)):
                    raise ManifestError(f"record {r.pair_id}: missing file {p}")

    def write(self, path) -> None:
        lines = [HEADER]
        for r in self.records:
            fields = (r.pair_id, r.orig_path, r.enc_path, r.seed_label, r.dataset_tag, r.split)
            if any("\t" in f or "\n" in f for f in fields):
                raise ManifestError(f"record {r.pair_id} contains a tab or newline")
            lines.append("\t".join(fields))
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "SurrogateManifest":
        path = os.fspath(path)
        if not os.path.isfile(path):
            raise ManifestError(f"manifest not found: {path}")
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines or not lines[0].startswith("# pek-surrogate-manifest"):
            raise ManifestError(f"{path}: missing manifest header")
        version = int(lines[0].split("version=")[1])
        if version > MANIFEST_VERSION:
            raise ManifestError(f"{path}: unsupported manifest version {version}")
        records = []
        for i, line in enumerate(lines[1:], start=2):
            parts = line.split("\t")
            if len(parts) != 6:
                raise ManifestError(f"{path}:{i}: expected 6 fields, got {len(parts)}")
            records.append(PairRecord(*parts))
        return cls(records, root=os.path.dirname(os.path.abspath(path)))


def manifest_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _write_pair(out_dir: str, pair_id: str, orig, enc) -> tuple[str, str]:
    o = os.path.join("orig", f"{pair_id}.png")
    e = os.path.join("enc", f"{pair_id}.png")
    os.makedirs(os.path.join(out_dir, "orig"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "enc"), exist_ok=True)
    save_image(orig, os.path.join(out_dir, o))
    save_image(enc, os.path.join(out_dir, e))
    return o, e


def _quantized(img) -> np.ndarray:
    return to_uint8(img).astype(np.float64) / 255.0


def _ssim_cache_path(out_dir: str) -> str:
    return os.path.join(out_dir, "ssim_cache.json")


def _update_ssim_cache(out_dir: str, values: dict[str, float]) -> None:
    path = _ssim_cache_path(out_dir)
    cache = {}
    if os.path.isfile(path):
        with open(path, encoding="utf-8") as fh:
            cache = json.load(fh)
    cache.update(values)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dict(sorted(cache.items())), fh, indent=1)
        fh.write("\n")


def read_ssim_cache(out_dir: str) -> dict[str, float]:
    with open(_ssim_cache_path(out_dir), encoding="utf-8") as fh:
        return json.load(fh)


def generate_pairs(G: SecretGan, f: FeatureExtractor, images, n: int, cfg: AvihConfig,
                   out_dir: str, dataset_tag: str = "synthetic", batch_size: int = 64,
                   max_skipped: int | None = None) -> list[PairRecord]:
    """Encrypt ``n`` source images with ``G`` acting as the secret GAN.

    Image ``i`` starts from noise seeded by ``cfg.rng_seed + i``. A batch whose
    optimisation diverges is skipped and logged; more than ``max_skipped``
    skipped images (default n // 10) is an error.
    """
    images = np.asarray(images)
    if len(images) < n:
        raise ManifestError(f"image source holds {len(images)} images, {n} requested")
    cap = n // 10 if max_skipped is None else max_skipped
    label = G.seed_label
    records, cache, skipped = [], {}, 0
    for start in range(0, n, batch_size):
        chunk = images[start:min(start + batch_size, n)]
        seeds = [cfg.rng_seed + start + j for j in range(len(chunk))]
        try:
            enc = avih_encrypt_batch(chunk, f, G, cfg, seeds=seeds).images
        except TrainingDiverged as exc:
            skipped += len(chunk)
            log.warning("seed %s: skipping images %d..%d: %s", label, start, start + len(chunk) - 1, exc)
            if skipped > cap:
                raise
            continue
        for j, (o, e) in enumerate(zip(chunk, enc)):
            pid = f"{label}-{start + j:06d}"
            op, ep = _write_pair(out_dir, pid, o, e)
            records.append(PairRecord(pid, op, ep, label, dataset_tag))
            cache[pid] = ssim(_quantized(e), _quantized(o))
    _update_ssim_cache(out_dir, cache)
    return records


def _split_group(records: list[PairRecord], fraction: float, rng) -> list[PairRecord]:
    order = rng.permutation(len(records))
    n = len(records)
    n_train = int(np.floor(fraction * n))
    if n >= 2:
        n_train = min(max(n_train, 1), n - 1)
    out = []
    for rank, idx in enumerate(order):
        out.append(replace(records[idx], split="train" if rank < n_train else "val"))
    return out


def assemble_dataset(parts: list[list[PairRecord]], fraction: float = 0.75, seed: int = 0,
                     stratify: bool = True, root: str = ".") -> SurrogateManifest:
    """Pool record lists, shuffle deterministically, split train/val per seed label."""
    if not parts or not any(parts):
        raise ManifestError("nothing to assemble")
    if not 0 < fraction < 1:
        raise ManifestError("split fraction must lie strictly between 0 and 1")
    pooled = [r for part in parts for r in part]
    ids = Counter(r.pair_id for r in pooled)
    dups = [k for k, v in ids.items() if v > 1]
    if dups:
        raise ManifestError(f"duplicate pair ids: {dups[:5]}")
    rng = np.random.default_rng(seed)
    groups: dict[str, list[PairRecord]] = defaultdict(list)
    for r in pooled:
        groups[r.seed_label if stratify else ""].append(r)
    split = []
    for key in sorted(groups):
        split.extend(_split_group(groups[key], fraction, rng))
    order = rng.permutation(len(split))
    return SurrogateManifest([split[i] for i in order], root=root, split_seed=seed)


def generate_traditional_pairs(scheme: str, keys, images, n_per_key: int, out_dir: str,
                               fraction: float = 0.8, dataset_tag: str = "synthetic",
                               block_size: int | None = None, split_seed: int = 0,
                               split: str | None = None) -> SurrogateManifest:
    """Encrypt with LE (one fixed key per entry of ``keys``, ``n_per_key`` images each)
    or EtC (``keys`` is a single base seed; every image gets its own key).

    ``split`` forces every record into one split (e.g. "test" for held-out keys).
    """
    images = np.asarray(images)
    records = []
    if scheme == "le":
        keys = list(keys)
        if len(images) < n_per_key * len(keys):
            raise ManifestError("not enough source images for the requested key budget")
        for k, seed in enumerate(keys):
            key = le_keygen(int(seed), **({"block_size": block_size} if block_size else {}))
            chunk = images[k * n_per_key:(k + 1) * n_per_key]
            enc = le_encrypt(chunk, key)
            label = f"le-{seed}"
            for i, (o, e) in enumerate(zip(chunk, enc)):
                pid = f"{label}-{i:06d}"
                op, ep = _write_pair(out_dir, pid, o, e)
                records.append(PairRecord(pid, op, ep, label, dataset_tag))
    elif scheme == "etc":
        base = int(keys if np.isscalar(keys) else list(keys)[0])
        if len(images) < n_per_key:
            raise ManifestError("not enough source images")
        b = block_size or 8
        h, w = images.shape[1:3]
        for i, o in enumerate(images[:n_per_key]):
            key = etc_keygen(per_image_seed(base, i), (h // b, w // b), b)
            label = f"etc-{base}-{i}"
            pid = f"etc-{base}-{i:06d}"
            op, ep = _write_pair(out_dir, pid, o, etc_encrypt(o, key))
            records.append(PairRecord(pid, op, ep, label, dataset_tag))
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    if split is not None:
        return SurrogateManifest([replace(r, split=split) for r in records], root=out_dir)
    return assemble_dataset([records], fraction, seed=split_seed,
                            stratify=(scheme == "le"), root=out_dir)
