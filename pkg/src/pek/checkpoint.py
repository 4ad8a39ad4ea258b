"""Versioned binary checkpoints with an embedded architecture descriptor."""

from __future__ import annotations

import hashlib
import io
import os
from typing import Any

import torch

FORMAT_VERSION = 1
MAGIC = "pek-checkpoint"


class CheckpointError(ValueError):
    pass


def write_checkpoint(path: str | os.PathLike, kind: str, descriptor: dict,
                     state: dict[str, Any], **extra) -> None:
    blob = {
        "magic": MAGIC,
        "version": FORMAT_VERSION,
        "kind": kind,
        "descriptor": descriptor,
        "state": state,
        **extra,
    }
    buf = io.BytesIO()
    torch.save(blob, buf)
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def read_checkpoint(path: str | os.PathLike, kind: str | None = None) -> dict:
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises a zoo of exception types here
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("magic") != MAGIC:
        raise CheckpointError(f"{path} is not a pek checkpoint")
    if blob["version"] > FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {blob['version']}")
    if kind is not None and blob["kind"] != kind:
        raise CheckpointError(f"{path} holds a {blob['kind']!r}, expected {kind!r}")
    return blob


def state_checksum(module: torch.nn.Module) -> str:
    """SHA-256 over parameters and buffers in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def seed_from_label(label: str) -> int:
    """Map an opaque seed label (e.g. "0.02") to a 63-bit RNG seed.

    First 8 bytes of SHA-256 of the UTF-8 label, big-endian, top bit cleared.
    """
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & (2 ** 63 - 1)
