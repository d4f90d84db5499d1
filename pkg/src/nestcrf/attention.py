"""Second decoding pass: sibling-informed queries, attention residual, re-decode.

For each class the first-pass decodes of every *other* class are rendered as
one-hot matrices, mapped into the target tag space, and used as attention
queries against the class's own emission matrix (keys = values = emissions).
The attended result is added back onto the emissions and decoded again with
the same transition parameters.  First-pass labels enter as constants; only
the map/bias parameters and the emissions carry gradient.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import torch
from torch import nn

from .crf import PAD_TAG_SCORE, LinearChainCrf


def one_hot_decodes(decoded: torch.Tensor, num_tags: int, lengths: torch.Tensor):
    """[B, L] tag ids -> [B, L, num_tags] one-hots; rows at/after length zero."""
    oh = torch.nn.functional.one_hot(decoded.clamp(0, num_tags - 1), num_tags)
    pos = torch.arange(decoded.size(1), device=decoded.device)
    valid = (pos.unsqueeze(0) < lengths.unsqueeze(1)).unsqueeze(-1)
    return oh * valid


class SiblingQueryMaps(nn.Module):
    """One map matrix per ordered class pair, one bias per target class."""

    def __init__(self, tag_counts: list[int]):
        super().__init__()
        if len(tag_counts) < 2:
            raise ValueError("sibling queries need at least two category-classes")
        self.tag_counts = list(tag_counts)
        self.maps = nn.ParameterDict(
            {
                f"{k}to{i}": nn.Parameter(torch.zeros(tag_counts[k], tag_counts[i]))
                for i in range(len(tag_counts))
                for k in range(len(tag_counts))
                if k != i
            }
        )
        self.biases = nn.ParameterList(
            nn.Parameter(torch.zeros(d_t)) for d_t in tag_counts
        )

    def build_query(
        self,
        sibling_decodes: dict[int, torch.Tensor],
        lengths: torch.Tensor,
        target: int,
    ) -> torch.Tensor:
        """Q for the target class: [B, L, d_t(target)]."""
        expected = set(range(len(self.tag_counts))) - {target}
        if set(sibling_decodes) != expected:
            raise ValueError(
                f"sibling decodes cover classes {sorted(sibling_decodes)}, "
                f"expected {sorted(expected)}"
            )
        total = None
        for k, decoded in sorted(sibling_decodes.items()):
            oh = one_hot_decodes(decoded, self.tag_counts[k], lengths)
            term = oh.to(self.biases[target].dtype) @ self.maps[f"{k}to{target}"]
            total = term if total is None else total + term
        return total + self.biases[target]


def attend(
    query: torch.Tensor, emissions: torch.Tensor, lengths: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention of the query against the emission matrix.

    Keys and values are both the emission matrix.  Returns (residual, map):
    residual [B, L, d_t] with rows at/after length zeroed, map [B, L, L]
    row-stochastic over columns < length.
    """
    if query.shape != emissions.shape:
        raise ValueError(
            f"query {tuple(query.shape)} and emissions {tuple(emissions.shape)} differ"
        )
    if (lengths < 1).any():
        raise ValueError("every sentence needs at least one position")
    d_t = emissions.size(-1)
    scores = query @ emissions.transpose(-1, -2) / (d_t**0.5)
    pos = torch.arange(emissions.size(1), device=emissions.device)
    col_valid = pos.unsqueeze(0) < lengths.unsqueeze(1)
    scores = scores.masked_fill(~col_valid[:, None, :], float("-inf"))
    attn = torch.softmax(scores, dim=-1)
    residual = attn @ emissions
    row_valid = col_valid.unsqueeze(-1)
    return residual * row_valid, attn


def second_pass_emissions(
    emissions: list[torch.Tensor],
    pass1: list[torch.Tensor],
    lengths: torch.Tensor,
    queries: SiblingQueryMaps,
) -> list[torch.Tensor]:
    """Residual-corrected emissions per class, padding column re-pinned."""
    corrected = []
    for i, h in enumerate(emissions):
        siblings = {k: pass1[k] for k in range(len(emissions)) if k != i}
        q = queries.build_query(siblings, lengths, i)
        residual, _ = attend(q, h, lengths)
        out = residual + h
        pos = torch.arange(out.size(1), device=out.device)
        valid = pos.unsqueeze(0) < lengths.unsqueeze(1)
        real = out[..., :-1] * valid.unsqueeze(-1)
        pad_col = (out.new_full(valid.shape, PAD_TAG_SCORE) * valid).unsqueeze(-1)
        corrected.append(torch.cat([real, pad_col], dim=-1))
    return corrected


@dataclass
class TwoPassResult:
    pass1: list[torch.Tensor]
    pass2: list[torch.Tensor]
    corrected: list[torch.Tensor] | None


def two_pass_decode(
    emissions: list[torch.Tensor],
    lengths: torch.Tensor,
    crfs: list[LinearChainCrf],
    queries: SiblingQueryMaps | None,
    residual_on: bool = True,
) -> TwoPassResult:
    """Viterbi both passes; with the residual off, pass 2 is pass 1 verbatim."""
    if len(emissions) != len(crfs):
        raise ValueError("one emission matrix per class is required")
    pass1 = [crf.viterbi(h, lengths) for crf, h in zip(crfs, emissions)]
    if not residual_on or queries is None:
        return TwoPassResult(pass1, [p.clone() for p in pass1], None)
    corrected = second_pass_emissions(emissions, pass1, lengths, queries)
    pass2 = [crf.viterbi(h, lengths) for crf, h in zip(crfs, corrected)]
    return TwoPassResult(pass1, pass2, corrected)


@dataclass
class ChangeStats:
    """Label-change accounting between the two passes, per class."""

    changed: int
    positive: int

    @property
    def ratio(self) -> float | None:
        return self.positive / self.changed if self.changed else None

    def __add__(self, other: "ChangeStats") -> "ChangeStats":
        return ChangeStats(self.changed + other.changed, self.positive + other.positive)


def change_stats(
    pass1: torch.Tensor,
    pass2: torch.Tensor,
    gold: torch.Tensor,
    lengths: torch.Tensor,
) -> ChangeStats:
    """Counts over positions before each row's length."""
    if not (pass1.shape == pass2.shape == gold.shape):
        raise ValueError("pass1, pass2 and gold must share shape")
    pos = torch.arange(pass1.size(1), device=pass1.device)
    valid = pos.unsqueeze(0) < lengths.unsqueeze(1)
    changed = (pass1 != pass2) & valid
    positive = changed & (pass2 == gold) & (pass1 != gold)
    return ChangeStats(int(changed.sum()), int(positive.sum()))


def change_stats_csv(per_class: list[ChangeStats]) -> str:
    out = io.StringIO()
    out.write("class,changed,positive,ratio\n")
    for i, st in enumerate(per_class):
        ratio = "" if st.ratio is None else f"{st.ratio:.4f}"
        out.write(f"{i},{st.changed},{st.positive},{ratio}\n")
    return out.getvalue()
