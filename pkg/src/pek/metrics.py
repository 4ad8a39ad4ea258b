"""Similarity metrics between originals and reconstructions/ciphertexts.

* pixel-space cosine similarity
* SSIM (Gaussian window 11, sigma 1.5, data range 1, channel mean)
* an LPIPS-style distance over the tap layers of a :class:`FeatureExtractor`
"""

from __future__ import annotations

import csv
import json
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.ndimage import correlate1d

from .embedders import FeatureExtractor
from .imaging import ImageError, as_image, to_torch

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
REPORT_VERSION = 1


class MetricError(ValueError):
    pass


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = as_image(a, copy=False), as_image(b, copy=False)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def cosine_similarity(a, b) -> float:
    a, b = _pair(a, b)
    fa, fb = a.ravel(), b.ravel()
    na, nb = np.linalg.norm(fa), np.linalg.norm(fb)
    if na == 0.0 or nb == 0.0:
        raise MetricError("cosine similarity undefined for an all-zero image")
    return float(np.clip(fa @ fb / (na * nb), -1.0, 1.0))


def _gaussian_taps(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable correlation, keeping only fully covered positions."""
    pad = len(taps) // 2
    y = correlate1d(x, taps, axis=0, mode="constant")
    y = correlate1d(y, taps, axis=1, mode="constant")
    return y[pad:x.shape[0] - pad, pad:x.shape[1] - pad]


def ssim(a, b, data_range: float = 1.0) -> float:
    a, b = _pair(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise MetricError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}px SSIM window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    taps = _gaussian_taps()
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx, my = _filter_valid(x, taps), _filter_valid(y, taps)
        vx = _filter_valid(x * x, taps) - mx * mx
        vy = _filter_valid(y * y, taps) - my * my
        cxy = _filter_valid(x * y, taps) - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
        scores.append(s.mean())
    return float(np.mean(scores))


def _unit(f: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return f / (f.norm(dim=1, keepdim=True) + eps)


def lpips_batch(a: np.ndarray, b: np.ndarray, extractor: FeatureExtractor) -> np.ndarray:
    """Per-sample LPIPS-style distance for two (N, H, W, C) batches."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    dtype = next(extractor.parameters()).dtype
    try:
        with torch.no_grad():
            fa = extractor.taps(to_torch(a).to(dtype))
            fb = extractor.taps(to_torch(b).to(dtype))
    except ImageError as exc:
        raise MetricError(str(exc)) from exc
    per_layer = []
    for ta, tb in zip(fa, fb):
        d = (_unit(ta.double()) - _unit(tb.double())) ** 2
        per_layer.append(d.sum(dim=1).mean(dim=(1, 2)))
    return torch.stack(per_layer).mean(dim=0).numpy()


def lpips_distance(a, b, extractor: FeatureExtractor) -> float:
    a, b = _pair(a, b)
    return float(lpips_batch(a[None], b[None], extractor)[0])


# ---------------------------------------------------------------- reports


@dataclass(frozen=True)
class MetricRow:
    sample_id: str
    key_label: str
    cosine: float
    ssim: float
    lpips: float


@dataclass
class MetricReport:
    rows: list[MetricRow]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: (r.sample_id, r.key_label))
        self.metadata.setdefault("sample_count", len(self.rows))

    @property
    def aggregates(self) -> dict[str, dict[str, float]]:
        groups: dict[str, list[MetricRow]] = defaultdict(list)
        for r in self.rows:
            groups[r.key_label].append(r)
        return {
            k: {
                "cosine": float(np.mean([r.cosine for r in g])),
                "ssim": float(np.mean([r.ssim for r in g])),
                "lpips": float(np.mean([r.lpips for r in g])),
                "count": len(g),
            }
            for k, g in sorted(groups.items())
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            tag = self.metadata.get("config_hash")
            fh.write(f"# pek-metric-report version={REPORT_VERSION}"
                     + (f" config={tag}" if tag else "") + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "key_label", "cosine", "ssim", "lpips"])
            for r in self.rows:
                w.writerow([r.sample_id, r.key_label,
                            f"{r.cosine:.10f}", f"{r.ssim:.10f}", f"{r.lpips:.10f}"])

    def to_json(self, path) -> None:
        doc = {"format": "pek-metric-aggregates", "version": REPORT_VERSION,
               "metadata": self.metadata, "aggregates": self.aggregates}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_csv(cls, path, metadata: dict | None = None) -> "MetricReport":
        with open(path, encoding="utf-8") as fh:
            first = fh.readline()
            if not first.startswith("# pek-metric-report"):
                raise MetricError(f"{path}: missing report header")
            rows = [
                MetricRow(d["sample_id"], d["key_label"], float(d["cosine"]),
                          float(d["ssim"]), float(d["lpips"]))
                for d in csv.DictReader(fh)
            ]
        return cls(rows, dict(metadata or {}))

    def as_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "metadata": self.metadata,
                "aggregates": self.aggregates}


def evaluate_pairs(pairs, extractor: FeatureExtractor, experiment: str = "",
                   batch_size: int = 64, **metadata) -> MetricReport:
    """Score (original, candidate, sample_id, key_label) tuples on all three metrics."""
    pairs = list(pairs)
    if not pairs:
        raise MetricError("evaluate_pairs needs at least one pair")
    rows = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        scalar = []
        for orig, cand, sid, key in chunk:
            try:
                scalar.append((cosine_similarity(orig, cand), ssim(orig, cand)))
            except (MetricError, ImageError) as exc:
                raise MetricError(f"sample {sid}: {exc}") from exc
        try:
            lp = lpips_batch(np.stack([p[0] for p in chunk]),
                             np.stack([p[1] for p in chunk]), extractor)
        except (MetricError, ValueError) as exc:
            raise MetricError(f"samples {chunk[0][2]}..{chunk[-1][2]}: {exc}") from exc
        for (orig, cand, sid, key), (c, s), l in zip(chunk, scalar, lp):
            rows.append(MetricRow(str(sid), str(key), c, s, float(l)))
    meta = {"experiment": experiment, "extractor": extractor.name, **metadata}
    return MetricReport(rows, meta)
