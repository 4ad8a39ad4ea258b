"""Command line entry points: ``pe``, ``gan``, ``avih``, ``agan`` and ``pek``.

Exit codes: 0 on success, 2 for bad arguments or configuration, 3 when a
run fails part way.
"""

from __future__ import annotations

import json
import logging
import os
import sys
import time
from functools import wraps

import click
import numpy as np

from . import __version__
from .checkpoint import CheckpointError, read_checkpoint
from .imaging import ImageError, list_images, load_image, save_image
from .metrics import MetricError

EXIT_CONFIG = 2
EXIT_FAILURE = 3


def _guard(fn):
    """Translate library errors into exit codes instead of tracebacks."""
    from .harness import ConfigError, ReportError, StageError
    from .surrogate import ManifestError

    @wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, ReportError, CheckpointError, ManifestError, FileNotFoundError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except (StageError, ImageError, MetricError, RuntimeError, ValueError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_FAILURE)
    return wrapper


def _read_dir(path: str):
    paths = list_images(path)
    if not paths:
        raise FileNotFoundError(f"no images in {path}")
    return paths, np.stack([load_image(p) for p in paths])


def _sidecar(path: str, command: str, **fields) -> None:
    doc = {"command": command, "version": __version__,
           "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()), **fields}
    with open(os.fspath(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _pair_manifest(manifest: str, in_paths, out_paths, labels, split: str, tag: str) -> None:
    from .surrogate import PairRecord, SurrogateManifest
    root = os.path.dirname(os.path.abspath(manifest))
    recs = []
    for src, dst, lab in zip(in_paths, out_paths, labels):
        pid = os.path.splitext(os.path.basename(src))[0]
        recs.append(PairRecord(pid, os.path.relpath(src, root), os.path.relpath(dst, root), lab, tag, split))
    SurrogateManifest(recs, root=root).write(manifest)


def _logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")


# ---------------------------------------------------------------- pe


@click.group(help="Block-based perceptual encryption (LE, EtC).")
def pe():
    pass


def _pe_run(scheme, seed, block_size, in_dir, out_dir, manifest, split, decrypt):
    from .ciphers import etc_decrypt, etc_encrypt, etc_keygen, le_decrypt, le_encrypt, le_keygen, per_image_seed
    paths, imgs = _read_dir(in_dir)
    os.makedirs(out_dir, exist_ok=True)
    outs, labels = [], []
    if scheme == "le":
        key = le_keygen(seed, block_size or 4)
        res = (le_decrypt if decrypt else le_encrypt)(imgs, key)
        labels = [f"le-{seed}"] * len(paths)
    else:
        b = block_size or 8
        h, w = imgs.shape[1:3]
        res = []
        for i, img in enumerate(imgs):
            key = etc_keygen(per_image_seed(seed, i), (h // b, w // b), b)
            res.append((etc_decrypt if decrypt else etc_encrypt)(img, key))
            labels.append(f"etc-{seed}-{i}")
    for p, img in zip(paths, res):
        dst = os.path.join(out_dir, os.path.splitext(os.path.basename(p))[0] + ".png")
        save_image(img, dst)
        outs.append(dst)
    if manifest:
        _pair_manifest(manifest, paths, outs, labels, split, "cli")
    click.echo(f"{'decrypted' if decrypt else 'encrypted'} {len(outs)} images -> {out_dir}")


_pe_options = [
    click.option("--scheme", type=click.Choice(["le", "etc"]), required=True),
    click.option("--seed", type=int, required=True, help="key seed; EtC derives one key per image"),
    click.option("--block-size", type=int, default=None),
    click.option("--in", "in_dir", type=click.Path(exists=True, file_okay=False), required=True),
    click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True),
]


def _apply(opts):
    def deco(fn):
        for o in reversed(opts):
            fn = o(fn)
        return fn
    return deco


@pe.command("encrypt")
@_apply(_pe_options)
@click.option("--manifest", type=click.Path(dir_okay=False), default=None,
              help="write a pair manifest (seed labels only, never keys)")
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test")
@_guard
def pe_encrypt(scheme, seed, block_size, in_dir, out_dir, manifest, split):
    """Encrypt every image in a directory."""
    _pe_run(scheme, seed, block_size, in_dir, out_dir, manifest, split, decrypt=False)


@pe.command("decrypt")
@_apply(_pe_options)
@_guard
def pe_decrypt(scheme, seed, block_size, in_dir, out_dir):
    """Decrypt a directory encrypted with the same scheme and seed."""
    _pe_run(scheme, seed, block_size, in_dir, out_dir, None, "", decrypt=True)


# ---------------------------------------------------------------- gan


@click.group(help="Generator and discriminator checkpoints.")
def gan():
    pass


@gan.command("inspect")
@click.argument("ckpt", type=click.Path())
@_guard
def gan_inspect(ckpt):
    """Print the descriptor and metadata stored in a checkpoint."""
    blob = read_checkpoint(ckpt)
    info = {k: v for k, v in blob.items() if k not in ("state", "discriminator", "history", "magic")}
    info["parameters"] = int(sum(t.numel() for t in blob["state"].values()))
    click.echo(json.dumps(info, indent=2, sort_keys=True, default=str))


# ---------------------------------------------------------------- avih


@click.group(help="Adversarial visual information hiding.")
def avih():
    pass


@avih.command("encrypt")
@click.option("--secret-gan", "gan_path", type=click.Path(), required=True)
@click.option("--embedder", "embedder_path", type=click.Path(), required=True)
@click.option("--in", "in_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--manifest", type=click.Path(dir_okay=False), default=None)
@click.option("--steps", type=int, default=500, show_default=True)
@click.option("--step-size", type=float, default=0.01, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True, help="noise seed of the first image")
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test")
@_guard
def avih_encrypt_cmd(gan_path, embedder_path, in_dir, out_dir, manifest, steps, step_size, seed, split):
    """Encrypt a directory under a secret GAN."""
    from .avih import AvihConfig, SecretGan, avih_encrypt_batch
    from .embedders import load_extractor
    G = SecretGan.load(gan_path)
    f = load_extractor(embedder_path)
    paths, imgs = _read_dir(in_dir)
    res = avih_encrypt_batch(imgs, f, G, AvihConfig(steps=steps, step_size=step_size, rng_seed=seed))
    os.makedirs(out_dir, exist_ok=True)
    outs = []
    for p, img in zip(paths, res.images):
        dst = os.path.join(out_dir, os.path.splitext(os.path.basename(p))[0] + ".png")
        save_image(img, dst)
        outs.append(dst)
    if manifest:
        _pair_manifest(manifest, paths, outs, [G.seed_label] * len(paths), split, G.dataset_tag)
    click.echo(f"encrypted {len(outs)} images under secret GAN {G.seed_label} -> {out_dir}")


# ---------------------------------------------------------------- agan


@click.group(help="Master key attack.")
def agan():
    pass


@agan.command("train")
@click.option("--manifest", type=click.Path(), required=True)
@click.option("--embedder", "embedder_path", type=click.Path(), required=True, help="frozen feature branch")
@click.option("--epochs", type=int, required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.option("--batch-size", type=int, default=32, show_default=True)
@click.option("--lr", type=float, default=2e-4, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--full-width", is_flag=True, help="use the full ResNet-50 stage layout")
@click.option("-v", "--verbose", is_flag=True)
@_guard
def agan_train(manifest, embedder_path, epochs, out_path, batch_size, lr, seed, full_width, verbose):
    """Train a master key model on a surrogate manifest."""
    from .attack import train_master_key
    from .embedders import load_extractor
    from .gan import TrainConfig
    from .surrogate import SurrogateManifest, manifest_hash
    _logging(verbose)
    S = SurrogateManifest.read(manifest)
    h = load_extractor(embedder_path)
    cfg = TrainConfig(epochs=epochs, batch_size=batch_size, lr=lr, seed=seed)
    gkw = {"width": 64, "layers": (3, 4, 6, 3), "strides": (1, 2, 2, 2), "stem": 4} if full_width else None
    M = train_master_key(S, h, cfg, generator_kwargs=gkw, manifest_hash=manifest_hash(manifest),
                         log_fn=logging.getLogger("pek.agan").info)
    M.save(out_path)
    _sidecar(out_path, "agan train", manifest=os.path.abspath(manifest), embedder=os.path.abspath(embedder_path),
             train_config=cfg.as_dict(), provenance=M.provenance, history=M.history)
    click.echo(f"trained on {M.provenance['train_pairs']} pairs from {len(M.training_keys)} keys -> {out_path}")


@agan.command("attack")
@click.option("--model", "model_path", type=click.Path(), required=True)
@click.option("--in", "in_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@_guard
def agan_attack(model_path, in_dir, out_dir):
    """Reconstruct a directory of ciphertexts."""
    from .attack import attack
    from .harness import _load_model
    M = _load_model(model_path)
    paths, imgs = _read_dir(in_dir)
    rec = attack(M, imgs)
    os.makedirs(out_dir, exist_ok=True)
    for p, img in zip(paths, rec):
        save_image(img, os.path.join(out_dir, os.path.splitext(os.path.basename(p))[0] + ".png"))
    _sidecar(os.path.join(out_dir, "provenance"), "agan attack", model=os.path.abspath(model_path),
             input=os.path.abspath(in_dir), count=len(paths))
    click.echo(f"reconstructed {len(paths)} images -> {out_dir}")


@agan.command("eval")
@click.option("--model", "model_path", type=click.Path(), required=True)
@click.option("--manifest", type=click.Path(), required=True)
@click.option("--report", "report_path", type=click.Path(dir_okay=False), required=True)
@click.option("--extractor", "extractor_path", type=click.Path(), default=None,
              help="LPIPS extractor checkpoint (default: conv_small, seed 0)")
@click.option("--split", default="test", show_default=True, help="falls back to all records if empty")
@click.option("--scheme", default="", help="scheme name recorded for table2 reports")
@_guard
def agan_eval(model_path, manifest, report_path, extractor_path, split, scheme):
    """Score reconstructions and ciphertexts against the originals of a test manifest."""
    from .attack import MasterKeyModel, attack, evaluate_attack
    from .embedders import load_extractor, make_desk_embedder
    from .harness import _load_model
    from .surrogate import SurrogateManifest
    M = _load_model(model_path)
    S = SurrogateManifest.read(manifest)
    data = S.load_arrays(split if S.split(split) else None)
    ex = load_extractor(extractor_path) if extractor_path else make_desk_embedder(0, input_shape=data[0].shape[1:])
    if not isinstance(M, MasterKeyModel):
        M = MasterKeyModel(M, None, {}, {}, {})
    rep = evaluate_attack(M, data, ex, experiment="agan eval", recon=attack(M, data[1]))
    rep.metadata.update({"method": "master key", "scheme": scheme, "model": os.path.abspath(model_path)})
    rep.to_csv(report_path)
    rep.to_json(os.path.splitext(report_path)[0] + ".json")
    _sidecar(report_path, "agan eval", model=os.path.abspath(model_path), manifest=os.path.abspath(manifest),
             extractor=ex.descriptor(), deltas=rep.metadata["deltas"])
    for label, d in sorted(rep.metadata["deltas"].items()):
        click.echo(f"{label}: " + " ".join(f"d_{k}={v:+.4f}" for k, v in d.items()))


# ---------------------------------------------------------------- pek


@click.group(help="Experiment pipeline.")
@click.version_option(__version__)
def pek():
    pass


@pek.command("run")
@click.argument("config", type=click.Path())
@click.option("--output-root", default=None, help="overrides the config and $PEK_OUTPUT_ROOT")
@click.option("-v", "--verbose", is_flag=True)
@_guard
def pek_run(config, output_root, verbose):
    """Run an experiment config, skipping unchanged stages."""
    from .harness import ExperimentConfig, run_experiment
    _logging(verbose)
    cfg = ExperimentConfig.load(config)
    res = run_experiment(cfg, output_root=output_root)
    click.echo(f"{cfg.name}: ran {len(res.ran)} stages, skipped {len(res.skipped)} -> {res.output_root}")


@pek.command("report")
@click.argument("reports", nargs=-1, type=click.Path())
@click.option("--layout", type=click.Choice(["table1", "table2"]), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=".", show_default=True)
@_guard
def pek_report(reports, layout, out_dir):
    """Build a table1 or table2 layout from report CSVs."""
    from .harness import ReportError, emit_report, load_report
    if not reports:
        raise ReportError("no report CSVs given")
    for path in reports:
        if not os.path.isfile(path):
            raise FileNotFoundError(f"report not found: {path}")
    written = emit_report([load_report(p) for p in reports], layout, out_dir)
    md = [p for p in written if p.endswith(".md")][0]
    with open(md, encoding="utf-8") as fh:
        click.echo(fh.read().rstrip())
