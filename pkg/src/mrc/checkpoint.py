"""Binary model checkpoints: a JSON header plus raw float32 tensors.

Layout: 4-byte little-endian unsigned header length, the UTF-8 JSON header
{format_version, config, manifest, vocab, meta}, then each parameter as raw
little-endian float32 in manifest order. The manifest must match the config's
canonical parameter list exactly, so a loaded checkpoint always materializes
a complete, correctly shaped parameter dict.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, param_shapes
from .text import Vocab

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for malformed, truncated, or incompatible checkpoint data."""


@dataclass(eq=False)
class Checkpoint:
    """A frozen model snapshot: config, parameters, vocabulary, metadata.

    meta records how the model was trained — at least "scheme", "head" and
    "highlight" — so evaluation and ensembling can validate pairings.
    """

    config: ModelConfig
    params: dict[str, np.ndarray]
    vocab: Vocab
    meta: dict = field(default_factory=dict)


def to_bytes(ckpt: Checkpoint) -> bytes:
    expected = param_shapes(ckpt.config)
    manifest = []
    for name, shape in expected:
        arr = ckpt.params.get(name)
        if arr is None:
            raise CheckpointError(f"missing parameter {name!r}")
        if tuple(arr.shape) != shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {tuple(arr.shape)}, expected {shape}")
        manifest.append([name, list(shape)])
    header = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_json(),
        "manifest": manifest,
        "vocab": ckpt.vocab.to_list(),
        "meta": ckpt.meta,
    }
    head = json.dumps(header, ensure_ascii=False).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(ckpt.params[name], dtype="<f4").tobytes()
        for name, _ in expected)
    return struct.pack("<I", len(head)) + head + payload


def from_bytes(data: bytes) -> Checkpoint:
    """Parse checkpoint bytes; parameters come back as float64 arrays."""
    if len(data) < 4:
        raise CheckpointError("truncated checkpoint: missing header length")
    (head_len,) = struct.unpack_from("<I", data)
    if len(data) < 4 + head_len:
        raise CheckpointError("truncated checkpoint: header shorter than declared")
    try:
        header = json.loads(data[4:4 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from None
    if not isinstance(header, dict):
        raise CheckpointError("checkpoint header is not a JSON object")
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format_version {version!r} (expected {FORMAT_VERSION})")
    for key in ("config", "manifest", "vocab"):
        if key not in header:
            raise CheckpointError(f"checkpoint header missing {key!r}")

    try:
        config = ModelConfig.from_json(header["config"])
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    expected = param_shapes(config)
    try:
        listed = [(n, tuple(s)) for n, s in header["manifest"]]
    except (TypeError, ValueError):
        raise CheckpointError("malformed manifest") from None
    if listed != expected:
        raise CheckpointError("manifest does not match the model config's parameters")

    vocab = Vocab.from_list(header["vocab"])
    if len(vocab) != config.vocab_size:
        raise CheckpointError(
            f"vocab has {len(vocab)} entries but config.vocab_size is {config.vocab_size}")

    meta = header.get("meta", {})
    if not isinstance(meta, dict):
        raise CheckpointError("checkpoint meta is not a JSON object")

    total = sum(int(np.prod(shape)) for _, shape in expected)
    payload = data[4 + head_len:]
    if len(payload) != 4 * total:
        raise CheckpointError(
            f"payload holds {len(payload)} bytes, expected {4 * total}")

    params: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in expected:
        n = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=4 * offset)
        params[name] = arr.astype(np.float64).reshape(shape)
        offset += n
    return Checkpoint(config=config, params=params, vocab=vocab, meta=meta)


def save(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
