"""Versioned binary checkpoints.

Layout: 8-byte magic, little-endian uint64 header length, a canonical JSON
header (config, epoch, seed, optimizer scalars, array manifest, blob sha256),
then the raw value blob. Arrays round-trip bit-exactly; re-saving a loaded
checkpoint reproduces the same bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, IntegrityError
from .model import ModelConfig, Summarizer
from .optim import AdamOptimizer

MAGIC = b"ALNSUM01"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    epoch: int
    seed: int
    params: dict
    optimizer: dict | None
    moments_m: dict
    moments_v: dict
    format_version: int = FORMAT_VERSION


def _manifest_and_blob(arrays: dict[str, np.ndarray]) -> tuple[list, bytes]:
    manifest = []
    chunks = []
    offset = 0
    for name in arrays:
        arr = np.ascontiguousarray(arrays[name])
        dt = arr.dtype.newbyteorder("<")
        raw = arr.astype(dt, copy=False).tobytes()
        manifest.append([name, list(arr.shape), dt.str, offset, len(raw)])
        chunks.append(raw)
        offset += len(raw)
    return manifest, b"".join(chunks)


def save_checkpoint(
    path,
    model: Summarizer,
    optimizer: AdamOptimizer | None = None,
    epoch: int = 0,
    seed: int = 0,
) -> None:
    arrays: dict[str, np.ndarray] = {}
    for p in model.parameters():
        arrays[f"param/{p.name}"] = p.data
    if optimizer is not None:
        for name, m in optimizer.m.items():
            arrays[f"adam_m/{name}"] = m
        for name, v in optimizer.v.items():
            arrays[f"adam_v/{name}"] = v
    manifest, blob = _manifest_and_blob(arrays)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "epoch": int(epoch),
        "seed": int(seed),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "manifest": manifest,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(payload).to_bytes(8, "little"))
        fh.write(payload)
        fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise FormatError(f"not a checkpoint file: bad magic {magic!r}")
        raw_len = fh.read(8)
        if len(raw_len) != 8:
            raise IntegrityError("truncated checkpoint header")
        header_len = int.from_bytes(raw_len, "little")
        payload = fh.read(header_len)
        if len(payload) != header_len:
            raise IntegrityError("truncated checkpoint header")
        try:
            header = json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise IntegrityError(f"unreadable checkpoint header: {exc}") from exc
        if header.get("format_version") != FORMAT_VERSION:
            raise FormatError(
                f"checkpoint format version {header.get('format_version')} "
                f"unsupported (expected {FORMAT_VERSION})"
            )
        blob = fh.read()
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise IntegrityError("checkpoint blob failed its checksum")
    arrays: dict[str, np.ndarray] = {}
    for name, shape, dtype_str, offset, nbytes in header["manifest"]:
        raw = blob[offset : offset + nbytes]
        if len(raw) != nbytes:
            raise IntegrityError(f"checkpoint blob truncated at entry {name}")
        arrays[name] = np.frombuffer(raw, dtype=np.dtype(dtype_str)).reshape(shape).copy()
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    moments_m = {k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")}
    moments_v = {k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")}
    return Checkpoint(
        config=ModelConfig.from_dict(header["config"]),
        epoch=int(header["epoch"]),
        seed=int(header["seed"]),
        params=params,
        optimizer=header["optimizer"],
        moments_m=moments_m,
        moments_v=moments_v,
    )


def restore_model(ckpt: Checkpoint) -> Summarizer:
    """Build a model from a checkpoint, loading every value bit-exactly."""
    model = Summarizer(ckpt.config, np.random.default_rng(0))
    load_values(model, ckpt.params)
    return model


def load_values(model: Summarizer, values: dict) -> None:
    for p in model.parameters():
        if p.name not in values:
            raise IntegrityError(f"checkpoint is missing parameter {p.name}")
        arr = values[p.name]
        if tuple(arr.shape) != p.shape:
            raise IntegrityError(
                f"parameter {p.name} shape {tuple(arr.shape)} != model {p.shape}"
            )
        p.data = arr.copy()
        p.grad = np.zeros_like(p.data)
