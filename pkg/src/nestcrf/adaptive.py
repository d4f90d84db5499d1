"""Per-class learnable layer weights and the weighted layer combination.

Each category-class holds one unconstrained logit per encoder state; the
forward pass softmax-normalizes a class's row and mixes the state stack into
that class's encoding.  Logits start at zero, i.e. uniform attention over
layers, and stay unconstrained during optimization.
"""
from __future__ import annotations

import io

import torch
from torch import nn


def normalize_weights(raw_row: torch.Tensor) -> torch.Tensor:
    """Softmax with max-subtraction; strictly positive, sums to one.

    Computed at 64-bit regardless of the parameter dtype so the sum-to-one
    guarantee holds to 1e-9 even while training runs in float32; callers cast
    to their working dtype when mixing states.
    """
    if not torch.isfinite(raw_row).all():
        raise ValueError("layer-weight logits contain non-finite values")
    return torch.softmax(raw_row.double(), dim=-1)


def combine_states(states: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Weighted sum over the state axis.

    states: [batch, n_states, length, d_model]; weights: [n_states].
    """
    if states.dim() != 4:
        raise ValueError("states must be [batch, n_states, length, d_model]")
    if weights.dim() != 1 or weights.size(0) != states.size(1):
        raise ValueError(
            f"got {weights.numel()} weights for {states.size(1)} encoder states"
        )
    return torch.einsum("s,bsld->bld", weights, states)


class AdaptiveLayerWeights(nn.Module):
    """m × n_states logit table, one row per category-class."""

    def __init__(self, num_classes: int, n_states: int):
        super().__init__()
        if num_classes < 1 or n_states < 1:
            raise ValueError("num_classes and n_states must be positive")
        self.num_classes = num_classes
        self.n_states = n_states
        self.raw = nn.Parameter(torch.zeros(num_classes, n_states))

    def normalized(self) -> torch.Tensor:
        return normalize_weights(self.raw)

    def class_encoding(self, states: torch.Tensor, class_id: int) -> torch.Tensor:
        weights = self.normalized()[class_id].to(states.dtype)
        return combine_states(states, weights)

    def dump_csv(self) -> str:
        """Rows `class,layer,weight` with normalized values, for plotting."""
        with torch.no_grad():
            table = self.normalized().double()
        out = io.StringIO()
        out.write("class,layer,weight\n")
        for i in range(self.num_classes):
            for j in range(self.n_states):
                out.write(f"{i},{j},{table[i, j].item():.12g}\n")
        return out.getvalue()
