"""Emission scoring: shared bidirectional context layer plus per-class heads.

The class encoding arrives token-aligned (marker positions at index 0 and
N+1); emission rows are character-aligned, so the head drops the marker rows
before running its context layer.  Output rows at or beyond a sentence's
character length are exactly zero; the padding-tag column on valid rows is
pinned to PAD_TAG_SCORE so decoding can never select it.
"""
from __future__ import annotations

import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .crf import PAD_TAG_SCORE


class EmissionHead(nn.Module):
    """One shared recurrent context layer, one linear projection per class.

    With use_recurrent False the context layer is bypassed and each head
    projects the class encoding directly.
    """

    def __init__(
        self,
        d_model: int,
        hidden_size: int,
        tag_counts: list[int],
        use_recurrent: bool = True,
    ):
        super().__init__()
        if not tag_counts:
            raise ValueError("at least one category-class is required")
        self.use_recurrent = use_recurrent
        self.context_width = 2 * hidden_size if use_recurrent else d_model
        self.lstm = (
            nn.LSTM(d_model, hidden_size, batch_first=True, bidirectional=True)
            if use_recurrent
            else None
        )
        # heads emit only real-tag columns; the padding column is a constant
        self.projections = nn.ModuleList(
            nn.Linear(self.context_width, d_t - 1) for d_t in tag_counts
        )
        self.tag_counts = list(tag_counts)

    @staticmethod
    def strip_markers(encoding: torch.Tensor, token_lengths: torch.Tensor):
        """Token-aligned [B, L, d] -> character-aligned [B, L-2, d] + lengths."""
        if encoding.size(1) < 3:
            raise ValueError("encoding must cover two markers plus one character")
        if (token_lengths < 3).any():
            raise ValueError("every sentence needs at least one character")
        return encoding[:, 1:-1], token_lengths - 2

    def context(self, encoding: torch.Tensor, token_lengths: torch.Tensor):
        """Recurrent (or bypass) context over character positions.

        Returns ([B, chars, context_width], char_lengths).  Rows at or beyond
        a row's character length are zero.
        """
        chars, char_lengths = self.strip_markers(encoding, token_lengths)
        if self.lstm is None:
            ctx = chars
        else:
            packed = pack_padded_sequence(
                chars, char_lengths.cpu(), batch_first=True, enforce_sorted=False
            )
            out, _ = self.lstm(packed)
            ctx, _ = pad_packed_sequence(
                out, batch_first=True, total_length=chars.size(1)
            )
        pos = torch.arange(ctx.size(1), device=ctx.device)
        valid = (pos.unsqueeze(0) < char_lengths.unsqueeze(1)).unsqueeze(-1)
        return ctx * valid, char_lengths

    def project(
        self, ctx: torch.Tensor, char_lengths: torch.Tensor, class_id: int
    ) -> torch.Tensor:
        """Per-class emissions [B, chars, d_t], masked as documented above."""
        real = self.projections[class_id](ctx)
        scores = torch.cat(
            [real, real.new_full(real.shape[:-1] + (1,), PAD_TAG_SCORE)], dim=-1
        )
        pos = torch.arange(scores.size(1), device=scores.device)
        valid = (pos.unsqueeze(0) < char_lengths.unsqueeze(1)).unsqueeze(-1)
        return scores * valid

    def forward(
        self, encoding: torch.Tensor, token_lengths: torch.Tensor, class_id: int
    ) -> tuple[torch.Tensor, torch.Tensor]:
        ctx, char_lengths = self.context(encoding, token_lengths)
        return self.project(ctx, char_lengths, class_id), char_lengths
