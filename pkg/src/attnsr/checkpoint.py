"""Checksummed checkpoint container.

Layout: one ASCII header line ``ATTNSR-CKPT <format_version> <sha256 of payload>``
followed by a ``torch.save`` payload (a dict of named tensors and scalar
metadata). Reading verifies the digest before deserializing anything.
"""
from __future__ import annotations

import hashlib
import io
import os
from pathlib import Path

import torch

MAGIC = "ATTNSR-CKPT"
FORMAT_VERSION = 1


class CheckpointIntegrityError(RuntimeError):
    """Checkpoint header, checksum or format version is invalid."""


class CheckpointKindError(ValueError):
    """Valid checkpoint of the wrong kind for the requested use."""


def write_payload(payload: dict, path: str | os.PathLike) -> None:
    buf = io.BytesIO()
    torch.save(payload, buf)
    body = buf.getvalue()
    header = f"{MAGIC} {FORMAT_VERSION} {hashlib.sha256(body).hexdigest()}\n".encode("ascii")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + body)
    os.replace(tmp, path)


def read_payload(path: str | os.PathLike) -> dict:
    data = Path(path).read_bytes()
    newline = data.find(b"\n")
    if newline < 0:
        raise CheckpointIntegrityError(f"{path}: missing checkpoint header")
    try:
        magic, version, digest = data[:newline].decode("ascii").split(" ")
        version = int(version)
    except ValueError:
        raise CheckpointIntegrityError(f"{path}: malformed checkpoint header") from None
    if magic != MAGIC:
        raise CheckpointIntegrityError(f"{path}: not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointIntegrityError(f"{path}: unsupported format version {version}")
    body = data[newline + 1:]
    if hashlib.sha256(body).hexdigest() != digest:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch, file is corrupt")
    return torch.load(io.BytesIO(body), map_location="cpu", weights_only=True)
