"""Export per-layer hidden states of a pretrained encoder to ASACEMB1.

The output is consumed by downstream taggers that train on frozen encoder
states. One file holds a corpus: an 8-byte magic, little-endian u32 header
(state count, feature width, sentence count), then per sentence a u32
position count followed by float32 states in (layer, position, feature)
order. The state count is the encoder's layer count plus one: the embedding
output is layer 0.

Texts are tokenized one character per position between the two marker
tokens, so character i of a sentence aligns with position i + 1. A sentence
alignment file (JSON lines) records the mapping and any truncation.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

MAGIC = b"ASACEMB1"

log = logging.getLogger(__name__)


class ExportError(RuntimeError):
    """Any failure that should abort the export with a readable message."""


@dataclasses.dataclass(frozen=True)
class ExportManifest:
    """Everything one export needs; shape fields are optional cross-checks.

    When n_states or d_model are given they must match what the loaded model
    reports (layer count + 1 and hidden size), otherwise the export aborts.
    max_positions caps the written positions per sentence: texts longer than
    max_positions - 2 characters lose their tail to the marker tokens.
    """

    model: str | Path
    corpus: str | Path
    output: str | Path
    alignment: str | Path | None = None
    n_states: int | None = None
    d_model: int | None = None
    max_positions: int = 512
    batch_size: int = 8

    def __post_init__(self):
        if self.max_positions < 3:
            raise ValueError("max_positions must fit one character plus markers")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @property
    def alignment_path(self) -> Path:
        if self.alignment is not None:
            return Path(self.alignment)
        out = Path(self.output)
        return out.with_name(out.name + ".alignment.jsonl")


@dataclasses.dataclass(frozen=True)
class ExportResult:
    n_sentences: int
    n_states: int
    d_model: int
    n_truncated: int


def read_texts(path: str | Path) -> list[str]:
    """Sentence texts from a corpus JSON file (entities are ignored here)."""
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ExportError(f"cannot read corpus {path}: {e.strerror or e}")
    try:
        records = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ExportError(f"{path}: malformed JSON at line {e.lineno}: {e.msg}")
    if not isinstance(records, list):
        raise ExportError(f"{path}: top-level value must be a list")
    texts = []
    for idx, rec in enumerate(records):
        if not isinstance(rec, dict) or not isinstance(rec.get("text"), str):
            raise ExportError(f"{path}: example {idx} has no text field")
        if not rec["text"]:
            raise ExportError(f"{path}: example {idx} has empty text")
        texts.append(rec["text"])
    return texts


def load_encoder(identifier: str | Path):
    """Model in inference mode plus its tokenizer, from a name or directory."""
    from transformers import AutoModel, AutoTokenizer

    try:
        model = AutoModel.from_pretrained(str(identifier))
        tokenizer = AutoTokenizer.from_pretrained(str(identifier))
    except Exception as e:  # transformers raises a zoo of types here
        raise ExportError(f"cannot load model {identifier}: {e}")
    model.eval()
    return model, tokenizer


def header_dims(config) -> tuple[int, int]:
    """(n_states, d_model) a model with this configuration must produce."""
    return config.num_hidden_layers + 1, config.hidden_size


def encode_chars(tokenizer, text: str, max_positions: int) -> tuple[list[int], bool]:
    """Marker-wrapped per-character token ids, truncated to the position cap."""
    keep = max_positions - 2
    truncated = len(text) > keep
    chars = list(text[:keep])
    ids = tokenizer.convert_tokens_to_ids(chars)
    return [tokenizer.cls_token_id] + ids + [tokenizer.sep_token_id], truncated


def _batches(texts: list[str], size: int) -> Iterable[list[tuple[int, str]]]:
    indexed = list(enumerate(texts))
    for i in range(0, len(indexed), size):
        yield indexed[i : i + size]


def export(manifest: ExportManifest) -> ExportResult:
    """Write the state file and the sentence alignment; returns a summary.

    Deterministic for fixed model files and corpus: inference mode, no
    dropout, one sequential writer. Re-running produces identical bytes.
    """
    model, tokenizer = load_encoder(manifest.model)
    n_states, d_model = header_dims(model.config)
    if manifest.n_states is not None and manifest.n_states != n_states:
        raise ExportError(
            f"manifest declares {manifest.n_states} states, model produces "
            f"{n_states} (layers + embedding output)"
        )
    if manifest.d_model is not None and manifest.d_model != d_model:
        raise ExportError(
            f"manifest declares d_model {manifest.d_model}, model reports "
            f"{d_model}"
        )
    # the cap is a truncation policy, not a claim about the model: a model
    # with a smaller position table lowers it rather than failing the run
    position_cap = manifest.max_positions
    model_max = getattr(model.config, "max_position_embeddings", None)
    if model_max is not None and model_max < position_cap:
        position_cap = model_max

    texts = read_texts(manifest.corpus)
    n_truncated = 0
    try:
        out = open(manifest.output, "wb")
    except OSError as e:
        raise ExportError(f"cannot write {manifest.output}: {e.strerror or e}")
    try:
        align = open(manifest.alignment_path, "w", encoding="utf-8")
    except OSError as e:
        out.close()
        raise ExportError(
            f"cannot write {manifest.alignment_path}: {e.strerror or e}"
        )

    with out, align, torch.no_grad():
        out.write(MAGIC)
        out.write(struct.pack("<III", n_states, d_model, len(texts)))
        for batch in _batches(texts, manifest.batch_size):
            encoded = [
                encode_chars(tokenizer, text, position_cap) for _, text in batch
            ]
            widest = max(len(ids) for ids, _ in encoded)
            input_ids = torch.full(
                (len(batch), widest), tokenizer.pad_token_id, dtype=torch.long
            )
            mask = torch.zeros(len(batch), widest, dtype=torch.long)
            for row, (ids, _) in enumerate(encoded):
                input_ids[row, : len(ids)] = torch.tensor(ids)
                mask[row, : len(ids)] = 1
            states = model(
                input_ids=input_ids, attention_mask=mask, output_hidden_states=True
            ).hidden_states
            for row, ((sent_id, text), (ids, truncated)) in enumerate(
                zip(batch, encoded)
            ):
                n_positions = len(ids)
                stack = torch.stack([h[row, :n_positions] for h in states])
                payload = np.ascontiguousarray(
                    stack.to(torch.float32).numpy(), dtype="<f4"
                )
                out.write(struct.pack("<I", n_positions))
                out.write(payload.tobytes())
                if truncated:
                    n_truncated += 1
                    log.warning(
                        "sentence %d truncated from %d to %d characters",
                        sent_id, len(text), manifest.max_positions - 2,
                    )
                align.write(
                    json.dumps(
                        {
                            "id": sent_id,
                            "text": text,
                            "n_positions": n_positions,
                            "truncated": truncated,
                        },
                        sort_keys=True,
                        ensure_ascii=False,
                    )
                    + "\n"
                )

    return ExportResult(len(texts), n_states, d_model, n_truncated)
