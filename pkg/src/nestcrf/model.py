"""Full tagging model: encoder, layer weighting, heads, CRFs, second pass.

One forward pipeline per category-class: encoder states -> weighted class
encoding -> shared context layer -> class projection -> CRF.  The second
decoding pass corrects each class's emissions with an attention residual
built from the other classes' first-pass decodes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .adaptive import AdaptiveLayerWeights
from .attention import SiblingQueryMaps, TwoPassResult, second_pass_emissions, two_pass_decode
from .crf import LinearChainCrf
from .data import (
    CategoryClassPartition,
    EntitySpan,
    LabeledExample,
    TagScheme,
    TagSequence,
    default_partition,
    extract_spans,
    project_to_class_tags,
)
from .emission import EmissionHead
from .encoder import ToyEncoder, ToyEncoderConfig, Vocab


@dataclass(frozen=True)
class ModelConfig:
    encoder: ToyEncoderConfig = field(default_factory=ToyEncoderConfig)
    partition: CategoryClassPartition = field(default_factory=default_partition)
    lstm_hidden: int = 32
    use_adaptive: bool = True
    use_acrf: bool = True
    use_recurrent_head: bool = True
    include_embedding_layer: bool = True

    def __post_init__(self):
        if self.lstm_hidden < 1:
            raise ValueError("lstm_hidden must be positive")

    @property
    def n_states_used(self) -> int:
        if self.include_embedding_layer:
            return self.encoder.n_states
        return self.encoder.n_layers


class NestedTagger(nn.Module):
    def __init__(self, config: ModelConfig, vocab: Vocab):
        super().__init__()
        if vocab.size > config.encoder.vocab_size:
            raise ValueError(
                f"vocabulary of {vocab.size} ids exceeds encoder table "
                f"{config.encoder.vocab_size}"
            )
        self.config = config
        self.vocab = vocab
        self.schemes = [
            TagScheme.for_class(config.partition, i)
            for i in range(config.partition.num_classes)
        ]
        tag_counts = [s.num_tags for s in self.schemes]
        self.encoder = ToyEncoder(config.encoder)
        self.adaptive = AdaptiveLayerWeights(len(tag_counts), config.n_states_used)
        self.head = EmissionHead(
            config.encoder.d_model,
            config.lstm_hidden,
            tag_counts,
            use_recurrent=config.use_recurrent_head,
        )
        self.crfs = nn.ModuleList(LinearChainCrf(d_t) for d_t in tag_counts)
        # query parameters exist regardless of the acrf switch so checkpoints
        # keep one shape across ablation configurations
        self.queries = SiblingQueryMaps(tag_counts)

    @property
    def num_classes(self) -> int:
        return len(self.schemes)

    def batch_tokens(self, texts: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        """Pad [CLS] text [SEP] rows to the batch maximum."""
        if not texts:
            raise ValueError("empty batch")
        encoded = [self.vocab.encode(t) for t in texts]
        longest = max(len(e) for e in encoded)
        if longest > self.config.encoder.max_len:
            raise ValueError(
                f"batch needs {longest} token positions, encoder allows "
                f"{self.config.encoder.max_len}"
            )
        ids = torch.zeros(len(encoded), longest, dtype=torch.long)
        lengths = torch.zeros(len(encoded), dtype=torch.long)
        for row, e in enumerate(encoded):
            ids[row, : len(e)] = torch.tensor(e)
            lengths[row] = len(e)
        return ids, lengths

    def emissions_for(
        self, texts: list[str]
    ) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Per-class emission matrices [B, chars, d_t] and char lengths."""
        ids, token_lengths = self.batch_tokens(texts)
        states = self.encoder(ids, token_lengths)
        if not self.config.include_embedding_layer:
            states = states[:, 1:]
        emissions = []
        char_lengths = None
        for i in range(self.num_classes):
            if self.config.use_adaptive:
                encoding = self.adaptive.class_encoding(states, i)
            else:
                encoding = states[:, -1]
            scores, char_lengths = self.head(encoding, token_lengths, i)
            emissions.append(scores)
        return emissions, char_lengths

    def gold_tensors(
        self, examples: list[LabeledExample], max_chars: int
    ) -> list[torch.Tensor]:
        """Per-class [B, max_chars] gold tag ids, padded with each pad id."""
        out = []
        for i in range(self.num_classes):
            rows = [
                project_to_class_tags(ex, self.config.partition, i, max_len=max_chars).ids
                for ex in examples
            ]
            out.append(torch.tensor(rows, dtype=torch.long))
        return out

    def loss(
        self, examples: list[LabeledExample], loss_mode: str = "joint"
    ) -> tuple[torch.Tensor, dict[str, float]]:
        """Mean per-sentence loss; second-pass term included in joint mode."""
        if loss_mode not in ("pass1_only", "joint"):
            raise ValueError(f"unknown loss_mode {loss_mode!r}")
        emissions, char_lengths = self.emissions_for([ex.sentence.text for ex in examples])
        gold = self.gold_tensors(examples, emissions[0].size(1))
        per_sentence = emissions[0].new_zeros(len(examples))
        parts: dict[str, float] = {}
        for i, crf in enumerate(self.crfs):
            nll1 = crf.nll(emissions[i], gold[i], char_lengths, reduction="none")
            per_sentence = per_sentence + nll1
            parts[f"pass1_class{i}"] = float(nll1.detach().mean())
        if (
            self.config.use_acrf
            and loss_mode == "joint"
            # a diverged first pass cannot be decoded; surface the
            # non-finite loss so the caller can abort
            and bool(per_sentence.detach().isfinite().all())
        ):
            with torch.no_grad():
                pass1 = [
                    crf.viterbi(e.detach(), char_lengths)
                    for crf, e in zip(self.crfs, emissions)
                ]
            corrected = second_pass_emissions(emissions, pass1, char_lengths, self.queries)
            for i, crf in enumerate(self.crfs):
                nll2 = crf.nll(corrected[i], gold[i], char_lengths, reduction="none")
                per_sentence = per_sentence + nll2
                parts[f"pass2_class{i}"] = float(nll2.detach().mean())
        return per_sentence.mean(), parts

    @torch.no_grad()
    def decode(self, texts: list[str]) -> tuple[TwoPassResult, torch.Tensor]:
        emissions, char_lengths = self.emissions_for(texts)
        result = two_pass_decode(
            emissions,
            char_lengths,
            list(self.crfs),
            self.queries,
            residual_on=self.config.use_acrf,
        )
        return result, char_lengths

    def decoded_spans(
        self, decoded: list[torch.Tensor], char_lengths: torch.Tensor
    ) -> list[frozenset[EntitySpan]]:
        """Union of spans over classes, per example; duplicates collapse."""
        batch = decoded[0].size(0)
        out = []
        for b in range(batch):
            n = int(char_lengths[b])
            spans: set[EntitySpan] = set()
            for i, scheme in enumerate(self.schemes):
                tags = TagSequence(i, tuple(decoded[i][b].tolist()), n)
                spans |= extract_spans(tags, scheme)
            out.append(frozenset(spans))
        return out

    @torch.no_grad()
    def predict(
        self, texts: list[str]
    ) -> tuple[list[frozenset[EntitySpan]], list[frozenset[EntitySpan]]]:
        """(pass-1 span sets, pass-2 span sets) per input text."""
        result, char_lengths = self.decode(texts)
        return (
            self.decoded_spans(result.pass1, char_lengths),
            self.decoded_spans(result.pass2, char_lengths),
        )
