"""Model checkpoints: a JSON header next to a tensor blob.

The header records the format version, model kind, a config snapshot, the
training step, the RNG state and the SHA-256 of the blob; loading refuses a
blob whose digest does not match.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import ModelParams
from .tensorio import ChecksumError, FormatError, decode_tensors, sha256, write_blob, write_json

CHECKPOINT_FORMAT = 1


@dataclass
class Checkpoint:
    kind: str
    config: dict
    params: ModelParams
    step: int = 0
    rng_state: dict | None = None
    extra: dict | None = None


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    """Write ``<path>.json`` and ``<path>.bin``; returns the blob digest."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    digest = write_blob(blob_path, {k: ckpt.params.tensors[k] for k in sorted(ckpt.params.tensors)})
    header = {
        "format_version": CHECKPOINT_FORMAT,
        "kind": ckpt.kind,
        "config": ckpt.config,
        "step": int(ckpt.step),
        "rng_state": ckpt.rng_state,
        "buffers": sorted(ckpt.params.buffers),
        "blob": {"file": blob_path.name, "sha256": digest},
        "extra": ckpt.extra or {},
    }
    write_json(path.with_suffix(".json"), header)
    return digest


def load_checkpoint(path, kind: str | None = None) -> Checkpoint:
    path = Path(path)
    header_path = path if path.suffix == ".json" else path.with_suffix(".json")
    try:
        header = json.loads(header_path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"unreadable checkpoint header {header_path}: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_FORMAT:
        raise FormatError(f"unsupported checkpoint format {header.get('format_version')}")
    if kind is not None and header.get("kind") != kind:
        raise FormatError(f"expected a {kind!r} checkpoint, found {header.get('kind')!r}")
    blob_path = header_path.parent / header["blob"]["file"]
    data = blob_path.read_bytes()
    if sha256(data) != header["blob"]["sha256"]:
        raise ChecksumError(f"checkpoint blob {blob_path} does not match its recorded digest")
    tensors = decode_tensors(data)
    params = ModelParams(tensors, header.get("buffers", ()), {"kind": header["kind"],
                                                              "config": header["config"]})
    return Checkpoint(header["kind"], header["config"], params, header.get("step", 0),
                      header.get("rng_state"), header.get("extra"))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)
