"""Config-driven experiment pipeline.

A config is a flat YAML (or JSON) document listing named stages in order.
Each stage has a ``kind``, a ``params`` block and an ``inputs`` block that
names earlier stages. Every stage writes into ``<output_root>/<stage name>/``
and records a content hash of its kind, parameters, global seed and the
hashes of its inputs in ``stage.json``. A re-run whose hash matches is
skipped.

Example::

    name: desk-le
    seed: 0
    output_root: runs/desk-le
    stages:
      - {name: images, kind: synthetic, params: {n: 600, size: 32, seed: 1}}
      - name: pairs
        kind: traditional_pairs
        inputs: {images: images}
        params: {scheme: le, keys: [1, 2, 3, 4], n_per_key: 100}
      ...
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import yaml
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .attack import (AutoencoderBaseline, MasterKeyModel, attack, evaluate_attack, train_autoencoder_baseline,
                     train_master_key)
from .checkpoint import read_checkpoint
from .avih import AvihConfig, SecretGan, train_secret_gan
from .embedders import FeatureExtractor, load_extractor, make_desk_embedder
from .gan import TrainConfig
from .imaging import list_images, load_image, to_uint8
from .metrics import MetricReport
from .surrogate import (SurrogateManifest, assemble_dataset, generate_pairs,
                        generate_traditional_pairs, manifest_hash)
from .synthetic import synthetic_images

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "PEK_OUTPUT_ROOT"
STAGE_RECORD = "stage.json"


class ConfigError(ValueError):
    """The experiment config is malformed or internally inconsistent."""


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


class ReportError(ValueError):
    pass


# ---------------------------------------------------------------- config


@dataclass
class StageSpec:
    name: str
    kind: str
    params: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "params": self.params}
        if self.inputs:
            d["inputs"] = self.inputs
        return d


@dataclass
class ExperimentConfig:
    name: str
    stages: list[StageSpec]
    output_root: str = "runs"
    seed: int = 0

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageSpec) else _stage_from_dict(s) for s in self.stages]
        self.validate()

    def validate(self) -> None:
        if not self.stages:
            raise ConfigError("config declares no stages")
        seen: dict[str, str] = {}
        for s in self.stages:
            if s.kind not in STAGES:
                raise ConfigError(f"stage {s.name!r}: unknown kind {s.kind!r}; known: {sorted(STAGES)}")
            if s.name in seen:
                raise ConfigError(f"duplicate stage name {s.name!r}")
            required, _ = STAGES[s.kind][1:]
            missing = [k for k in required if k not in s.inputs]
            if missing:
                raise ConfigError(f"stage {s.name!r}: missing inputs {missing}")
            for key, ref in s.inputs.items():
                for r in ref if isinstance(ref, list) else [ref]:
                    if r not in seen:
                        raise ConfigError(f"stage {s.name!r}: input {key}={r!r} is not an earlier stage")
            seen[s.name] = s.kind

    def as_dict(self) -> dict:
        return {"name": self.name, "seed": self.seed, "output_root": self.output_root,
                "stages": [s.as_dict() for s in self.stages]}

    @property
    def config_hash(self) -> str:
        """Hash of the experiment content; the output location is left out."""
        d = self.as_dict()
        d.pop("output_root")
        return _digest(d)[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be a mapping")
        unknown = set(d) - {"name", "seed", "output_root", "stages"}
        if unknown:
            raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
        try:
            return cls(name=str(d["name"]), stages=list(d["stages"]),
                       output_root=str(d.get("output_root", "runs")), seed=int(d.get("seed", 0)))
        except KeyError as exc:
            raise ConfigError(f"config is missing {exc}") from exc
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = os.fspath(path)
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh) if path.endswith(".json") else yaml.safe_load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config not found: {path}") from exc
        except (yaml.YAMLError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        return cls.from_dict(doc)

    def save(self, path) -> None:
        path = os.fspath(path)
        with open(path, "w", encoding="utf-8") as fh:
            if path.endswith(".json"):
                json.dump(self.as_dict(), fh, indent=2)
                fh.write("\n")
            else:
                yaml.safe_dump(self.as_dict(), fh, sort_keys=False)


def _stage_from_dict(d) -> StageSpec:
    if not isinstance(d, dict) or "name" not in d or "kind" not in d:
        raise ConfigError(f"each stage needs a name and a kind, got {d!r}")
    unknown = set(d) - {"name", "kind", "params", "inputs"}
    if unknown:
        raise ConfigError(f"stage {d['name']!r}: unknown keys {sorted(unknown)}")
    return StageSpec(str(d["name"]), str(d["kind"]), dict(d.get("params") or {}), dict(d.get("inputs") or {}))


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


# ---------------------------------------------------------------- helpers


def _load_dir(path: str, offset: int = 0, n: int | None = None) -> np.ndarray:
    paths = list_images(path)[offset:]
    if n is not None:
        if len(paths) < n:
            raise ValueError(f"{path} holds {len(paths)} images past offset {offset}, {n} needed")
        paths = paths[:n]
    if not paths:
        raise ValueError(f"no images in {path}")
    return np.stack([load_image(p) for p in paths])


def _embedder(spec: dict | None, shape) -> FeatureExtractor:
    spec = dict(spec or {})
    if "checkpoint" in spec:
        return load_extractor(spec["checkpoint"])
    return make_desk_embedder(int(spec.get("seed", 0)), spec.get("arch", "conv_small"),
                              dim=int(spec.get("dim", 64)), input_shape=tuple(shape))


def _train_config(d: dict | None, seed: int) -> TrainConfig:
    d = dict(d or {})
    d.setdefault("seed", seed)
    return TrainConfig(**d)


def image_grid(columns: list[np.ndarray], pad: int = 2) -> np.ndarray:
    """Tile equally sized (N, H, W, C) batches side by side, one row per sample."""
    n, h, w, c = columns[0].shape
    out = np.ones((n * (h + pad) + pad, len(columns) * (w + pad) + pad, c))
    for j, col in enumerate(columns):
        for i, img in enumerate(col):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            out[y:y + h, x:x + w] = img
    return out


def save_grid(grid: np.ndarray, path, config_hash: str = "") -> None:
    info = PngInfo()
    info.add_text("pek-config", config_hash)
    Image.fromarray(to_uint8(grid)).save(path, pnginfo=info)


# ---------------------------------------------------------------- stages
#
# Each runner gets (spec, params, resolved inputs, ctx) and returns a dict of
# output paths relative to the stage directory.


@dataclass
class _Ctx:
    stage_dir: str
    seed: int
    config_hash: str


def _stage_synthetic(p, inp, ctx):
    imgs = synthetic_images(int(p.get("n", 100)), int(p.get("size", 32)), int(p.get("seed", ctx.seed)),
                            float(p.get("blur", 1.0)))
    os.makedirs(os.path.join(ctx.stage_dir, "images"), exist_ok=True)
    for i, img in enumerate(imgs):
        Image.fromarray(to_uint8(img)).save(os.path.join(ctx.stage_dir, "images", f"img_{i:05d}.png"))
    return {"images": "images"}


def _stage_images(p, inp, ctx):
    src = p.get("dir")
    if not src or not os.path.isdir(src):
        raise ValueError(f"image directory not found: {src!r}")
    target = tuple(p["size"]) if "size" in p else None
    os.makedirs(os.path.join(ctx.stage_dir, "images"), exist_ok=True)
    for i, path in enumerate(list_images(src)):
        img = load_image(path, target=target)
        Image.fromarray(to_uint8(img)).save(os.path.join(ctx.stage_dir, "images", f"img_{i:05d}.png"))
    return {"images": "images"}


def _stage_secret_gan(p, inp, ctx):
    imgs = _load_dir(inp["images"]["images"], int(p.get("offset", 0)), p.get("n"))
    sg = train_secret_gan(imgs, str(p["label"]), _train_config(p.get("train"), ctx.seed),
                          dataset_tag=p.get("dataset_tag", "synthetic"),
                          **{k: p[k] for k in ("ngf", "n_blocks", "ndf", "norm") if k in p})
    sg.save(os.path.join(ctx.stage_dir, "secret_gan.pt"))
    with open(os.path.join(ctx.stage_dir, "history.json"), "w") as fh:
        json.dump({"val_l1": sg.val_l1, "meets_threshold": sg.meets_threshold, "history": sg.history}, fh, indent=1)
    return {"checkpoint": "secret_gan.pt"}


def _stage_avih_pairs(p, inp, ctx):
    imgs = _load_dir(inp["images"]["images"], int(p.get("offset", 0)), int(p["n"]))
    G = SecretGan.load(inp["gan"]["checkpoint"])
    f = _embedder(p.get("embedder"), imgs.shape[1:])
    cfg = AvihConfig(**p.get("avih", {}))
    recs = generate_pairs(G, f, imgs, int(p["n"]), cfg, ctx.stage_dir,
                          dataset_tag=p.get("dataset_tag", "synthetic"),
                          batch_size=int(p.get("batch_size", 64)))
    if "split" in p:
        m = SurrogateManifest([replace(r, split=p["split"]) for r in recs],
                              root=ctx.stage_dir)
    else:
        m = assemble_dataset([recs], float(p.get("fraction", 0.8)), seed=ctx.seed, root=ctx.stage_dir)
    m.write(os.path.join(ctx.stage_dir, "manifest.tsv"))
    return {"manifest": "manifest.tsv"}


def _stage_traditional_pairs(p, inp, ctx):
    n_needed = int(p["n_per_key"]) * (len(p["keys"]) if p["scheme"] == "le" else 1)
    imgs = _load_dir(inp["images"]["images"], int(p.get("offset", 0)), n_needed)
    m = generate_traditional_pairs(p["scheme"], p["keys"], imgs, int(p["n_per_key"]), ctx.stage_dir,
                                   fraction=float(p.get("fraction", 0.8)),
                                   block_size=p.get("block_size"), split_seed=ctx.seed,
                                   split=p.get("split"))
    m.write(os.path.join(ctx.stage_dir, "manifest.tsv"))
    return {"manifest": "manifest.tsv"}


def _stage_assemble(p, inp, ctx):
    parts = []
    for up in inp["manifests"]:
        m = SurrogateManifest.read(up["manifest"])
        parts.append([replace(r, orig_path=os.path.relpath(m.resolve(r.orig_path), ctx.stage_dir),
                              enc_path=os.path.relpath(m.resolve(r.enc_path), ctx.stage_dir), split="")
                      for r in m.records])
    m = assemble_dataset(parts, float(p.get("fraction", 0.8)), seed=int(p.get("seed", ctx.seed)),
                         root=ctx.stage_dir)
    m.write(os.path.join(ctx.stage_dir, "manifest.tsv"))
    return {"manifest": "manifest.tsv"}


def _stage_train_master_key(p, inp, ctx):
    mpath = inp["manifest"]["manifest"]
    S = SurrogateManifest.read(mpath)
    shape = load_image(S.resolve(S.records[0].orig_path)).shape
    h = _embedder(p.get("feature_branch", {"arch": "residual", "seed": 100}), shape)
    gkw = p.get("generator")
    if gkw:
        gkw = {k: tuple(v) if isinstance(v, list) else v for k, v in gkw.items()}
    M = train_master_key(S, h, _train_config(p.get("train"), ctx.seed), generator_kwargs=gkw,
                         ndf=int(p.get("ndf", 32)), manifest_hash=manifest_hash(mpath),
                         log_fn=log.info)
    M.provenance["config_hash"] = ctx.config_hash
    M.save(os.path.join(ctx.stage_dir, "master_key.pt"))
    with open(os.path.join(ctx.stage_dir, "history.json"), "w") as fh:
        json.dump({"provenance": M.provenance, "history": M.history}, fh, indent=1)
    return {"checkpoint": "master_key.pt"}


def _stage_train_autoencoder(p, inp, ctx):
    S = SurrogateManifest.read(inp["manifest"]["manifest"])
    label = p.get("key_label") or S.seed_labels[0]
    recs = [r for r in S.records if r.seed_label == label and r.split in ("train", "")]
    ae = train_autoencoder_baseline(S.load_arrays(records=recs), _train_config(p.get("train"), ctx.seed),
                                    width=int(p.get("width", 32)))
    ae.save(os.path.join(ctx.stage_dir, "autoencoder.pt"))
    return {"checkpoint": "autoencoder.pt"}


def _load_model(path: str):
    kind = read_checkpoint(path)["kind"]
    if kind == "master_key":
        return MasterKeyModel.load(path)
    if kind == "autoencoder":
        return AutoencoderBaseline.load(path)
    raise ValueError(f"{path} holds a {kind!r}, not an attack model")


def _stage_evaluate(p, inp, ctx):
    if "model" in inp:
        model_path = inp["model"]["checkpoint"]
    elif "checkpoint" in p:
        model_path = p["checkpoint"]
    else:
        raise ValueError("evaluate needs a model input or a checkpoint parameter")
    if not os.path.isfile(model_path):
        raise FileNotFoundError(f"checkpoint not found: {model_path}")
    model = _load_model(model_path)
    S = SurrogateManifest.read(inp["test"]["manifest"])
    split = p.get("split", "test")
    orig, enc, labels, ids = S.load_arrays(split if S.split(split) else None)
    ex = _embedder(p.get("extractor"), orig.shape[1:])
    if isinstance(model, MasterKeyModel):
        report = evaluate_attack(model, (orig, enc, labels, ids), ex, experiment=p.get("experiment", ""))
        recon = attack(model, enc)
    else:
        recon = attack(model, enc)
        wrapper = MasterKeyModel(model, None, {}, {}, {})
        report = evaluate_attack(wrapper, (orig, enc, labels, ids), ex,
                                 experiment=p.get("experiment", ""), recon=recon)
    report.metadata.update({"method": p.get("method", "master key"), "scheme": p.get("scheme", ""),
                            "config_hash": ctx.config_hash, "model": model_path})
    report.to_csv(os.path.join(ctx.stage_dir, "report.csv"))
    report.to_json(os.path.join(ctx.stage_dir, "report.json"))
    k = min(int(p.get("grid_rows", 8)), len(orig))
    save_grid(image_grid([orig[:k], enc[:k], recon[:k]]), os.path.join(ctx.stage_dir, "grid.png"),
              ctx.config_hash)
    return {"report": "report.csv", "aggregates": "report.json", "grid": "grid.png"}


def _stage_report(p, inp, ctx):
    reports = [load_report(up["report"]) for up in inp["reports"]]
    paths = emit_report(reports, p.get("layout", "table1"), ctx.stage_dir, config_hash=ctx.config_hash)
    return {"tables": [os.path.relpath(x, ctx.stage_dir) for x in paths]}


# kind -> (runner, required inputs, optional inputs)
STAGES = {
    "synthetic": (_stage_synthetic, (), ()),
    "images": (_stage_images, (), ()),
    "secret_gan": (_stage_secret_gan, ("images",), ()),
    "avih_pairs": (_stage_avih_pairs, ("images", "gan"), ()),
    "traditional_pairs": (_stage_traditional_pairs, ("images",), ()),
    "assemble": (_stage_assemble, ("manifests",), ()),
    "train_master_key": (_stage_train_master_key, ("manifest",), ()),
    "train_autoencoder": (_stage_train_autoencoder, ("manifest",), ()),
    "evaluate": (_stage_evaluate, ("test",), ("model",)),
    "report": (_stage_report, ("reports",), ()),
}


# ---------------------------------------------------------------- runner


@dataclass
class RunResult:
    status: int
    output_root: str
    ran: list[str]
    skipped: list[str]
    outputs: dict


def _stage_hash(spec: StageSpec, seed: int, upstream: dict[str, str]) -> str:
    deps = {k: ([upstream[r] for r in v] if isinstance(v, list) else upstream[v])
            for k, v in sorted(spec.inputs.items())}
    return _digest({"kind": spec.kind, "params": spec.params, "seed": seed, "inputs": deps})


def _absolute(outputs: dict, stage_dir: str) -> dict:
    out = {}
    for k, v in outputs.items():
        out[k] = [os.path.join(stage_dir, x) for x in v] if isinstance(v, list) else os.path.join(stage_dir, v)
    return out


def _complete(record_path: str, stage_hash: str) -> dict | None:
    if not os.path.isfile(record_path):
        return None
    with open(record_path, encoding="utf-8") as fh:
        rec = json.load(fh)
    if rec.get("hash") != stage_hash:
        return None
    stage_dir = os.path.dirname(record_path)
    outs = _absolute(rec["outputs"], stage_dir)
    for v in outs.values():
        for path in v if isinstance(v, list) else [v]:
            if not os.path.exists(path):
                return None
    return outs


def run_experiment(cfg: ExperimentConfig, output_root: str | None = None) -> RunResult:
    """Run the stages in order, skipping those whose content hash is unchanged.

    The output root is, in order of precedence, the ``output_root`` argument,
    the ``PEK_OUTPUT_ROOT`` environment variable, then the config field.
    """
    root = output_root or os.environ.get(OUTPUT_ROOT_ENV) or cfg.output_root
    os.makedirs(root, exist_ok=True)
    cfg_hash = cfg.config_hash
    cfg.save(os.path.join(root, "config.yaml"))
    hashes: dict[str, str] = {}
    outputs: dict[str, dict] = {}
    ran, skipped = [], []
    for spec in cfg.stages:
        stage_dir = os.path.join(root, spec.name)
        h = _stage_hash(spec, cfg.seed, hashes)
        record_path = os.path.join(stage_dir, STAGE_RECORD)
        done = _complete(record_path, h)
        if done is not None:
            log.info("stage %s: unchanged, skipping", spec.name)
            hashes[spec.name], outputs[spec.name] = h, done
            skipped.append(spec.name)
            continue
        if os.path.isdir(stage_dir):
            shutil.rmtree(stage_dir)
        os.makedirs(stage_dir)
        inputs = {k: ([outputs[r] for r in v] if isinstance(v, list) else outputs[v])
                  for k, v in spec.inputs.items()}
        runner = STAGES[spec.kind][0]
        log.info("stage %s (%s): running", spec.name, spec.kind)
        torch.manual_seed(cfg.seed)
        try:
            rel = runner(spec.params, inputs, _Ctx(stage_dir, cfg.seed, cfg_hash))
        except Exception as exc:
            raise StageError(spec.name, f"{type(exc).__name__}: {exc}") from exc
        with open(record_path, "w", encoding="utf-8") as fh:
            json.dump({"stage": spec.name, "kind": spec.kind, "hash": h, "config_hash": cfg_hash,
                       "outputs": rel}, fh, indent=1, sort_keys=True)
            fh.write("\n")
        hashes[spec.name], outputs[spec.name] = h, _absolute(rel, stage_dir)
        ran.append(spec.name)
    return RunResult(0, root, ran, skipped, outputs)


# ---------------------------------------------------------------- reports


# Published LPIPS scores of earlier attacks, shown as fixed reference cells.
REFERENCE_LPIPS = {
    "SIA-GAN (reported)": {"LE": 0.156, "EtC": 0.211},
    "GAN-based (reported)": {"EtC": 0.4},
    "master key full scale (reported)": {"LE": 0.138, "EtC": 0.204},
}
SCHEMES = ("LE", "EtC")
_SCHEME_NAMES = {"le": "LE", "etc": "EtC", "avih": "AVIH"}


def load_report(csv_path) -> MetricReport:
    """Read a report CSV plus the metadata in its ``.json`` sibling, if present."""
    csv_path = os.fspath(csv_path)
    meta = {}
    side = os.path.splitext(csv_path)[0] + ".json"
    if os.path.isfile(side):
        with open(side, encoding="utf-8") as fh:
            meta = json.load(fh).get("metadata", {})
    return MetricReport.from_csv(csv_path, meta)


def _attack_rows(report: MetricReport) -> dict[str, dict]:
    agg = report.aggregates
    attacked = {k.rsplit(":", 1)[0]: v for k, v in agg.items() if k.endswith(":attack")}
    return attacked or agg


def _fmt(v) -> str:
    return "" if v is None else f"{v:.3f}"


def _write_table(base: str, header: list[str], rows: list[list], config_hash: str) -> list[str]:
    csv_path, md_path = base + ".csv", base + ".md"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(f"# pek-table config={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    with open(md_path, "w", encoding="utf-8") as fh:
        fh.write("| " + " | ".join(header) + " |\n")
        fh.write("|" + "---|" * len(header) + "\n")
        for r in rows:
            fh.write("| " + " | ".join(r) + " |\n")
        fh.write(f"\nconfig: {config_hash}\n")
    return [csv_path, md_path]


def emit_report(reports: list[MetricReport], layout: str, out_dir, config_hash: str = "") -> list[str]:
    """Write a table1 layout (one row per key label with the three metrics of the
    reconstruction) or a table2 layout (LPIPS, methods by schemes, with fixed
    reference cells). Returns the written CSV and Markdown paths."""
    if not reports:
        raise ReportError("no reports given")
    os.makedirs(out_dir, exist_ok=True)
    if layout == "table1":
        rows = []
        for rep in reports:
            for label, agg in _attack_rows(rep).items():
                rows.append([label, _fmt(agg["cosine"]), _fmt(agg["ssim"]), _fmt(agg["lpips"]),
                             str(agg["count"])])
        return _write_table(os.path.join(out_dir, "table1"),
                            ["key_label", "cosine", "ssim", "lpips", "count"], rows, config_hash)
    if layout == "table2":
        measured: dict[str, dict[str, float]] = {}
        schemes = list(SCHEMES)
        for rep in reports:
            scheme = _SCHEME_NAMES.get(str(rep.metadata.get("scheme", "")).lower())
            method = rep.metadata.get("method")
            if not scheme or not method:
                raise ReportError("table2 needs reports whose metadata names a method and a scheme")
            if scheme not in schemes:
                schemes.append(scheme)
            atk = _attack_rows(rep)
            n = sum(a["count"] for a in atk.values())
            measured.setdefault(f"{method} (measured)", {})[scheme] = (
                sum(a["lpips"] * a["count"] for a in atk.values()) / n)
            base = {k: v for k, v in rep.aggregates.items() if k.endswith(":ciphertext")}
            if base:
                nb = sum(a["count"] for a in base.values())
                measured.setdefault("ciphertext (measured)", {})[scheme] = (
                    sum(a["lpips"] * a["count"] for a in base.values()) / nb)
        rows = [[m] + [_fmt(cells.get(s)) for s in schemes] for m, cells in REFERENCE_LPIPS.items()]
        rows += [[m] + [_fmt(cells.get(s)) for s in schemes] for m, cells in sorted(measured.items())]
        return _write_table(os.path.join(out_dir, "table2"), ["method"] + schemes, rows, config_hash)
    raise ReportError(f"unknown layout {layout!r}; expected table1 or table2")
