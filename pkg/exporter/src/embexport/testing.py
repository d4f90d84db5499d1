"""Fixture helpers: a miniature deterministic encoder saved to disk."""

from __future__ import annotations

from pathlib import Path

import torch

SPECIALS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
DEFAULT_CHARS = (
    "abcdefghijklmnopqrstuvwx"
    "ABCDEFGHIJKLMNOPQRST"
    "012345"
)


def tiny_model_dir(
    path: str | Path,
    n_layers: int = 2,
    hidden: int = 16,
    heads: int = 2,
    max_positions: int = 64,
    seed: int = 0,
    chars: str = DEFAULT_CHARS,
) -> Path:
    """Save a small randomly initialized encoder and char vocabulary.

    The same seed always writes the same weights, so exports from the
    returned directory are reproducible across test runs.
    """
    from transformers import BertConfig, BertModel, BertTokenizer

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    vocab = SPECIALS + sorted(set(chars))

    torch.manual_seed(seed)
    config = BertConfig(
        vocab_size=len(vocab),
        hidden_size=hidden,
        num_hidden_layers=n_layers,
        num_attention_heads=heads,
        intermediate_size=hidden * 2,
        max_position_embeddings=max_positions,
    )
    BertModel(config).save_pretrained(path)
    tokenizer = BertTokenizer(
        vocab={token: index for index, token in enumerate(vocab)},
        do_lower_case=False,
    )
    tokenizer.save_pretrained(path)
    return path
