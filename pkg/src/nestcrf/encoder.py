"""Character-level transformer encoder exposing every layer's hidden states.

The downstream layer-weighting consumes the full stack h_0..h_n, so the
forward pass returns all layer outputs, not just the last.  States can come
from the trainable toy encoder here or from a precomputed state file written
by an external dumper (see ASACEMB1 below).

Token layout per sentence: [CLS] c_1 .. c_N [SEP], padded with PAD; the
token-level valid length is therefore N + 2.  Padding positions are exact
zero vectors at every layer.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import torch
from torch import nn

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
SEP_ID = 3
_SPECIALS = ("<pad>", "<unk>", "<cls>", "<sep>")

ASACEMB_MAGIC = b"ASACEMB1"


class StateFileError(ValueError):
    """Raised for malformed precomputed-state files."""


@dataclass(frozen=True)
class Vocab:
    """Deterministic character vocabulary with four reserved specials."""

    chars: tuple[str, ...]
    index: dict[str, int] = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        object.__setattr__(
            self, "index", {c: i + len(_SPECIALS) for i, c in enumerate(self.chars)}
        )

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        seen = sorted({c for t in texts for c in t})
        return cls(tuple(seen))

    @property
    def size(self) -> int:
        return len(self.chars) + len(_SPECIALS)

    def encode(self, text: str) -> list[int]:
        """[CLS] + char ids + [SEP]; unknown characters map to UNK."""
        return [CLS_ID] + [self.index.get(c, UNK_ID) for c in text] + [SEP_ID]

    def to_json(self) -> str:
        return json.dumps({"chars": "".join(self.chars)}, ensure_ascii=False)

    @classmethod
    def from_json(cls, payload: str) -> "Vocab":
        return cls(tuple(json.loads(payload)["chars"]))


@dataclass(frozen=True)
class ToyEncoderConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 64
    max_len: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def n_states(self) -> int:
        """Embedding output plus one state per encoder layer."""
        return self.n_layers + 1


@dataclass
class LayerStates:
    """Hidden-state stack for one sentence: [n_states, positions, d_model].

    valid_len counts tokens including the two markers; positions at or beyond
    it are zero vectors.
    """

    states: torch.Tensor
    valid_len: int

    def __post_init__(self):
        if self.states.dim() != 3:
            raise ValueError("states must be [n_states, positions, d_model]")
        if not 0 < self.valid_len <= self.states.size(1):
            raise ValueError(
                f"valid_len {self.valid_len} outside [1, {self.states.size(1)}]"
            )


class _Block(nn.Module):
    """Pre-norm transformer encoder block with erf-GELU feed-forward."""

    def __init__(self, cfg: ToyEncoderConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.d_model // cfg.n_heads
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.q = nn.Linear(cfg.d_model, cfg.d_model)
        self.k = nn.Linear(cfg.d_model, cfg.d_model)
        self.v = nn.Linear(cfg.d_model, cfg.d_model)
        self.out = nn.Linear(cfg.d_model, cfg.d_model)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff1 = nn.Linear(cfg.d_model, cfg.d_ff)
        self.ff2 = nn.Linear(cfg.d_ff, cfg.d_model)
        self.act = nn.GELU()
        self.drop = nn.Dropout(cfg.dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, length, _ = x.shape
        return x.view(b, length, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, key_valid: torch.Tensor, collect: list | None = None):
        y = self.ln1(x)
        q, k, v = self._split(self.q(y)), self._split(self.k(y)), self._split(self.v(y))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~key_valid[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        if collect is not None:
            collect.append(attn.detach())
        mixed = (attn @ v).transpose(1, 2).reshape(x.shape)
        x = x + self.drop(self.out(mixed))
        x = x + self.drop(self.ff2(self.act(self.ff1(self.ln2(x)))))
        return x


class ToyEncoder(nn.Module):
    """Small trainable stand-in for a deep pretrained encoder."""

    def __init__(self, cfg: ToyEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.d_model)
        self.blocks = nn.ModuleList(_Block(cfg) for _ in range(cfg.n_layers))
        self.drop = nn.Dropout(cfg.dropout)
        for p in self.parameters():
            if p.dim() > 1:
                nn.init.normal_(p, std=0.02)

    def forward(
        self,
        token_ids: torch.Tensor,
        token_lengths: torch.Tensor,
        collect_attention: list | None = None,
    ) -> torch.Tensor:
        """All layer states: [batch, n_states, length, d_model]."""
        b, length = token_ids.shape
        if length > self.cfg.max_len:
            raise ValueError(
                f"sequence of {length} tokens exceeds max_len {self.cfg.max_len}"
            )
        pos = torch.arange(length, device=token_ids.device)
        valid = pos.unsqueeze(0) < token_lengths.unsqueeze(1)
        keep = valid.unsqueeze(-1)
        h = self.tok_emb(token_ids) + self.pos_emb(pos).unsqueeze(0)
        h = self.drop(h) * keep
        states = [h]
        for block in self.blocks:
            h = block(h, valid, collect_attention) * keep
            states.append(h)
        return torch.stack(states, dim=1)

    def encode(self, text: str, vocab: Vocab) -> LayerStates:
        """Single-sentence convenience wrapper (eval-mode caller expected)."""
        n_tokens = len(text) + 2
        if n_tokens > self.cfg.max_len:
            raise ValueError(
                f"sentence of {len(text)} characters needs {n_tokens} positions, "
                f"encoder allows {self.cfg.max_len}"
            )
        ids = torch.tensor([vocab.encode(text)])
        states = self.forward(ids, torch.tensor([n_tokens]))
        return LayerStates(states[0], n_tokens)


def save_precomputed(path: str | Path, sentences: Sequence[torch.Tensor]) -> None:
    """Write per-sentence state stacks [n_states, N, d_model] as ASACEMB1.

    Layout: 8-byte magic, little-endian u32 n_states / d_model / n_sentences,
    then per sentence a u32 position count followed by the float32 payload in
    (layer, position, feature) order.
    """
    if sentences:
        n_states, _, d_model = sentences[0].shape
    else:
        n_states = d_model = 0
    with open(path, "wb") as fh:
        fh.write(ASACEMB_MAGIC)
        fh.write(struct.pack("<III", n_states, d_model, len(sentences)))
        for states in sentences:
            if states.shape[0] != n_states or states.shape[2] != d_model:
                raise ValueError("all sentences must share n_states and d_model")
            fh.write(struct.pack("<I", states.shape[1]))
            payload = states.detach().to(torch.float32).contiguous().numpy()
            if payload.dtype.byteorder not in ("<", "="):
                payload = payload.astype("<f4")
            fh.write(payload.tobytes())


def load_precomputed(path: str | Path) -> Iterator[tuple[int, LayerStates]]:
    """Stream (sentence id, LayerStates) from an ASACEMB1 file.

    The stored payload has no padding positions, so valid_len equals the
    stored position count; squaring off to a batch width happens downstream.
    """
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != ASACEMB_MAGIC:
            raise StateFileError(f"bad magic {magic!r}, expected {ASACEMB_MAGIC!r}")
        header = fh.read(12)
        if len(header) != 12:
            raise StateFileError("truncated header")
        n_states, d_model, n_sentences = struct.unpack("<III", header)
        for sent_id in range(n_sentences):
            raw_n = fh.read(4)
            if len(raw_n) != 4:
                raise StateFileError(f"truncated at sentence {sent_id}: missing length")
            (n_pos,) = struct.unpack("<I", raw_n)
            if n_pos < 1:
                raise StateFileError(f"sentence {sent_id} has zero positions")
            want = n_states * n_pos * d_model * 4
            payload = fh.read(want)
            if len(payload) != want:
                raise StateFileError(
                    f"truncated at sentence {sent_id}: expected {want} payload bytes, "
                    f"got {len(payload)}"
                )
            states = torch.frombuffer(bytearray(payload), dtype=torch.float32)
            yield sent_id, LayerStates(states.view(n_states, n_pos, d_model), n_pos)
        trailing = fh.read(1)
        if trailing:
            raise StateFileError("trailing bytes after final sentence")
