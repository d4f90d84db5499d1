"""Exact linear-chain conditional random field for one category-class.

The public tag inventory has ``num_tags`` entries of which the last is a
structural padding tag.  Learnable parameters cover only the ``num_tags - 1``
real tags; the padding row and column of the full transition view are held at
``PAD_TAG_SCORE`` so no mass ever flows through padding positions.  All
dynamic programs run in log space; sequence scores follow

    s(x, y) = start[y_1] + sum_i T[y_i][y_{i+1}] + sum_i H[i][y_i] + stop[y_N]
"""
from __future__ import annotations

import torch
from torch import nn

# Score pinned on the padding tag wherever a full-width tensor is needed.
# Large enough to zero out padding paths at float32, small enough to keep
# exp() finite and gradients benign.
PAD_TAG_SCORE = -100.0


def _check_batch(emissions: torch.Tensor, lengths: torch.Tensor, num_tags: int) -> None:
    if emissions.dim() != 3:
        raise ValueError(f"emissions must be [batch, steps, tags], got {tuple(emissions.shape)}")
    if emissions.size(-1) != num_tags:
        raise ValueError(
            f"emissions carry {emissions.size(-1)} tag columns, CRF expects {num_tags}"
        )
    if lengths.dim() != 1 or lengths.size(0) != emissions.size(0):
        raise ValueError("lengths must be a vector with one entry per batch row")
    if lengths.numel() and (lengths.min() < 1 or lengths.max() > emissions.size(1)):
        raise ValueError(
            f"lengths must lie in [1, {emissions.size(1)}], got "
            f"[{int(lengths.min())}, {int(lengths.max())}]"
        )


def _argmax_smallest(scores: torch.Tensor, dim: int) -> torch.Tensor:
    """Argmax along dim; exact ties resolve to the smallest index."""
    top = scores.max(dim=dim, keepdim=True).values
    idx = torch.arange(scores.size(dim), device=scores.device)
    shape = [1] * scores.dim()
    shape[dim] = scores.size(dim)
    candidates = torch.where(scores == top, idx.view(shape), scores.size(dim))
    return candidates.min(dim=dim).values


class LinearChainCrf(nn.Module):
    """Batched path scoring, log-partition, NLL and Viterbi decoding.

    Emission inputs are [batch, steps, num_tags] with the padding column
    included; every operation slices to the real tags internally.  ``lengths``
    gives the number of valid steps per row; entries beyond a row's length are
    never read.
    """

    def __init__(self, num_tags: int):
        super().__init__()
        if num_tags < 2:
            raise ValueError("num_tags must cover at least one real tag plus padding")
        self.num_tags = num_tags
        self.num_real = num_tags - 1
        self.pad_id = num_tags - 1
        self.transitions = nn.Parameter(torch.zeros(self.num_real, self.num_real))
        self.start_scores = nn.Parameter(torch.zeros(self.num_real))
        self.stop_scores = nn.Parameter(torch.zeros(self.num_real))

    def full_transitions(self) -> torch.Tensor:
        """num_tags × num_tags view with padding row/column at PAD_TAG_SCORE."""
        full = self.transitions.new_full((self.num_tags, self.num_tags), PAD_TAG_SCORE)
        full[: self.num_real, : self.num_real] = self.transitions
        return full

    def path_score(
        self, emissions: torch.Tensor, tags: torch.Tensor, lengths: torch.Tensor
    ) -> torch.Tensor:
        """Score of the given tag paths; [batch] vector."""
        _check_batch(emissions, lengths, self.num_tags)
        if tags.shape != emissions.shape[:2]:
            raise ValueError(
                f"tags shape {tuple(tags.shape)} does not match emissions "
                f"{tuple(emissions.shape[:2])}"
            )
        real = emissions[..., : self.num_real]
        steps = real.size(1)
        pos = torch.arange(steps, device=real.device)
        valid = pos.unsqueeze(0) < lengths.unsqueeze(1)
        safe = torch.where(valid, tags, torch.zeros_like(tags))
        if int(safe.max()) >= self.num_real or int(safe.min()) < 0:
            raise ValueError("tags contain ids outside the real-tag range within lengths")
        emit = real.gather(2, safe.unsqueeze(-1)).squeeze(-1)
        score = emit.masked_fill(~valid, 0.0).sum(dim=1)
        score = score + self.start_scores[safe[:, 0]]
        if steps > 1:
            trans = self.transitions[safe[:, :-1], safe[:, 1:]]
            score = score + trans.masked_fill(~valid[:, 1:], 0.0).sum(dim=1)
        last = (lengths - 1).unsqueeze(1)
        last_tags = safe.gather(1, last).squeeze(1)
        return score + self.stop_scores[last_tags]

    def log_partition(self, emissions: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """log Σ_paths exp(s); forward algorithm with per-step log-sum-exp."""
        _check_batch(emissions, lengths, self.num_tags)
        real = emissions[..., : self.num_real]
        alpha = self.start_scores.unsqueeze(0) + real[:, 0]
        for i in range(1, real.size(1)):
            inner = alpha.unsqueeze(2) + self.transitions.unsqueeze(0)
            nxt = torch.logsumexp(inner, dim=1) + real[:, i]
            active = (lengths > i).unsqueeze(1)
            alpha = torch.where(active, nxt, alpha)
        return torch.logsumexp(alpha + self.stop_scores, dim=1)

    def nll(
        self,
        emissions: torch.Tensor,
        tags: torch.Tensor,
        lengths: torch.Tensor,
        reduction: str = "mean",
    ) -> torch.Tensor:
        """Negative log-likelihood of the gold paths."""
        vec = self.log_partition(emissions, lengths) - self.path_score(emissions, tags, lengths)
        if reduction == "none":
            return vec
        if reduction == "sum":
            return vec.sum()
        if reduction == "mean":
            return vec.mean()
        raise ValueError(f"unknown reduction {reduction!r}")

    @torch.no_grad()
    def viterbi(self, emissions: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """Best real-tag path per row; [batch, steps] with padding ids beyond lengths.

        Exact score ties resolve to the smallest tag id at every backtrack
        step, so equal inputs always decode identically.
        """
        _check_batch(emissions, lengths, self.num_tags)
        real = emissions[..., : self.num_real]
        if not bool(torch.isfinite(real).all()):
            raise ValueError("non-finite emission scores cannot be decoded")
        batch, steps, _ = real.shape
        value = self.start_scores.unsqueeze(0) + real[:, 0]
        pointers = []
        for i in range(1, steps):
            cand = value.unsqueeze(2) + self.transitions.unsqueeze(0)
            best = cand.max(dim=1).values
            pointers.append(_argmax_smallest(cand, dim=1))
            nxt = best + real[:, i]
            active = (lengths > i).unsqueeze(1)
            value = torch.where(active, nxt, value)
        final = value + self.stop_scores
        last_tag = _argmax_smallest(final, dim=1)
        out = torch.full((batch, steps), self.pad_id, dtype=torch.long, device=real.device)
        for b in range(batch):
            n = int(lengths[b])
            tag = int(last_tag[b])
            out[b, n - 1] = tag
            for i in range(n - 1, 0, -1):
                tag = int(pointers[i - 1][b, tag])
                out[b, i - 1] = tag
        return out
