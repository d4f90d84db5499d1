"""Deterministic checkpoint container.

Layout: 8-byte magic, little-endian u32 header length, UTF-8 JSON header
with sorted keys (model configuration, vocabulary, tensor manifest, caller
metadata), then each tensor's raw little-endian bytes in manifest order.
Identical model state serializes to identical bytes, which the determinism
guarantees lean on; torch's own pickle-based files do not promise that.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .data import CategoryClassPartition
from .encoder import ToyEncoderConfig, Vocab
from .model import ModelConfig, NestedTagger

MAGIC = b"NESTCKP1"

_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64}


class CheckpointError(ValueError):
    """Raised for unreadable or inconsistent checkpoint files."""


def _config_payload(config: ModelConfig) -> dict[str, Any]:
    enc = config.encoder
    return {
        "encoder": {
            "n_layers": enc.n_layers,
            "d_model": enc.d_model,
            "n_heads": enc.n_heads,
            "d_ff": enc.d_ff,
            "vocab_size": enc.vocab_size,
            "max_len": enc.max_len,
            "dropout": enc.dropout,
        },
        "partition": config.partition.serialize(),
        "lstm_hidden": config.lstm_hidden,
        "use_adaptive": config.use_adaptive,
        "use_acrf": config.use_acrf,
        "use_recurrent_head": config.use_recurrent_head,
        "include_embedding_layer": config.include_embedding_layer,
    }


def _config_from_payload(payload: dict[str, Any]) -> ModelConfig:
    return ModelConfig(
        encoder=ToyEncoderConfig(**payload["encoder"]),
        partition=CategoryClassPartition.parse(payload["partition"]),
        lstm_hidden=payload["lstm_hidden"],
        use_adaptive=payload["use_adaptive"],
        use_acrf=payload["use_acrf"],
        use_recurrent_head=payload["use_recurrent_head"],
        include_embedding_layer=payload["include_embedding_layer"],
    )


def save_checkpoint(
    path: str | Path,
    model: NestedTagger,
    extra: dict[str, Any] | None = None,
) -> None:
    state = model.state_dict()
    manifest = []
    blobs = []
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        dtype = str(tensor.dtype).removeprefix("torch.")
        if dtype not in _DTYPES:
            raise CheckpointError(f"tensor {name} has unsupported dtype {dtype}")
        arr = tensor.numpy()
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        blob = arr.tobytes()
        manifest.append(
            {"name": name, "dtype": dtype, "shape": list(tensor.shape), "nbytes": len(blob)}
        )
        blobs.append(blob)
    header = {
        "format": "nestcrf-checkpoint",
        "version": 1,
        "config": _config_payload(model.config),
        "vocab": "".join(model.vocab.chars),
        "tensors": manifest,
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[NestedTagger, dict[str, Any]]:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        raw_len = fh.read(4)
        if len(raw_len) != 4:
            raise CheckpointError(f"{path}: truncated header length")
        (header_len,) = struct.unpack("<I", raw_len)
        raw = fh.read(header_len)
        if len(raw) != header_len:
            raise CheckpointError(f"{path}: truncated header")
        try:
            header = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
        if header.get("format") != "nestcrf-checkpoint":
            raise CheckpointError(f"{path}: unknown container format")
        config = _config_from_payload(header["config"])
        vocab = Vocab(tuple(header["vocab"]))
        model = NestedTagger(config, vocab)
        state = {}
        for entry in header["tensors"]:
            blob = fh.read(entry["nbytes"])
            if len(blob) != entry["nbytes"]:
                raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
            dtype = _DTYPES[entry["dtype"]]
            arr = np.frombuffer(blob, dtype=str(np.dtype(entry["dtype"]))).copy()
            state[entry["name"]] = torch.from_numpy(arr).view(entry["shape"]).to(dtype)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes")
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise CheckpointError(
            f"{path}: state mismatch (missing {sorted(missing)}, "
            f"unexpected {sorted(unexpected)})"
        )
    return model, header.get("extra", {})
