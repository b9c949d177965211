"""Versioned, byte-deterministic checkpoint files and content hashing."""

from __future__ import annotations

import hashlib
import io
from pathlib import Path

import numpy as np
import torch

from ..errors import ValidationError

VERSION = 1
KINDS = ("embedder", "extractor", "field")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def image_digest(img: np.ndarray) -> str:
    """Hash of an image's 8-bit quantization (stable across PNG round trips)."""
    q = np.round(np.asarray(img, dtype=np.float64) * 255.0).astype(np.uint8)
    return sha256_bytes(repr(q.shape).encode() + q.tobytes())


def save_checkpoint(path, kind: str, model: torch.nn.Module, extra: dict | None = None) -> str:
    """Write ``model`` under a versioned header; returns the file's SHA-256.

    Serialization goes through an in-memory buffer so the bytes depend only
    on the content, never on the destination file name.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    payload = {
        "format": f"marknerf/{kind}",
        "version": VERSION,
        "config": model.config(),
        "extra": extra or {},
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    data = buf.getvalue()
    Path(path).write_bytes(data)
    return sha256_bytes(data)


def load_checkpoint(path, kind: str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    try:
        payload = torch.load(io.BytesIO(path.read_bytes()), map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ValidationError(f"{path}: unreadable checkpoint ({exc})") from exc
    if payload.get("format") != f"marknerf/{kind}":
        raise ValidationError(f"{path}: expected a {kind} checkpoint, found {payload.get('format')!r}")
    if payload.get("version") != VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def load_embedder(path):
    from ..embedder import Embedder

    payload = load_checkpoint(path, "embedder")
    model = Embedder(**payload["config"])
    model.load_state_dict(payload["state_dict"])
    return model.eval()


def load_extractor(path):
    from ..extractor import Extractor

    payload = load_checkpoint(path, "extractor")
    model = Extractor(**payload["config"])
    model.load_state_dict(payload["state_dict"])
    return model.eval()


def load_field(path):
    """Returns ``(field, extra)``; ``extra`` carries the sampling defaults."""
    from ..nerf import RadianceField

    payload = load_checkpoint(path, "field")
    field = RadianceField.from_config(payload["config"])
    field.load_state_dict(payload["state_dict"])
    return field.eval(), payload["extra"]
