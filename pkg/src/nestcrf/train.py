"""Deterministic joint training of the full tagging model.

Optimization is adaptive-moment with decoupled weight decay in two parameter
groups: the encoder stack at one learning rate, everything downstream
(heads, CRFs, layer weights, query maps) at another.  All randomness derives
from the seed: parameter init through the torch generator, the per-epoch
data order through a dedicated stream, so rerunning a config reproduces the
metrics log and checkpoint byte-for-byte on one thread.
"""
from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch

from .data import CategoryClassPartition, LabeledExample, default_partition
from .encoder import ToyEncoderConfig, Vocab
from .model import ModelConfig, NestedTagger

DESK_ENCODER = ToyEncoderConfig()  # 4 layers, 64 wide, 4 heads, ff 128


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    max_seq_len: int = 128
    dropout: float = 0.1
    encoder_lr: float = 4e-5
    acrf_lr: float = 2e-4
    weight_decay: float = 1e-5
    epochs: int = 30
    seed: int = 7
    loss_mode: str = "joint"
    use_adaptive: bool = True
    use_acrf: bool = True
    use_recurrent_head: bool = True
    include_embedding_layer: bool = True
    lstm_hidden: int = 32
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.encoder_lr < 0 or self.acrf_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.loss_mode not in ("pass1_only", "joint"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class TrainResult:
    model: NestedTagger
    metrics: list[dict] = field(default_factory=list)

    def metrics_jsonl(self) -> str:
        return "".join(json.dumps(m, sort_keys=True) + "\n" for m in self.metrics)


def epoch_order(n: int, seed: int, epoch: int) -> list[int]:
    """Deterministic permutation for one epoch, independent of torch RNG."""
    order = list(range(n))
    random.Random(seed * 100003 + epoch).shuffle(order)
    return order


def build_model(
    config: TrainConfig,
    vocab: Vocab,
    encoder_config: ToyEncoderConfig | None = None,
    partition: CategoryClassPartition | None = None,
) -> NestedTagger:
    enc = encoder_config or DESK_ENCODER
    enc = replace(enc, dropout=config.dropout, vocab_size=max(enc.vocab_size, vocab.size))
    model_config = ModelConfig(
        encoder=enc,
        partition=partition or default_partition(),
        lstm_hidden=config.lstm_hidden,
        use_adaptive=config.use_adaptive,
        use_acrf=config.use_acrf,
        use_recurrent_head=config.use_recurrent_head,
        include_embedding_layer=config.include_embedding_layer,
    )
    return NestedTagger(model_config, vocab)


def parameter_groups(model: NestedTagger, config: TrainConfig) -> list[dict]:
    encoder_params = list(model.encoder.parameters())
    encoder_ids = {id(p) for p in encoder_params}
    downstream = [p for p in model.parameters() if id(p) not in encoder_ids]
    return [
        {"params": encoder_params, "lr": config.encoder_lr},
        {"params": downstream, "lr": config.acrf_lr},
    ]


def train(
    train_corpus: list[LabeledExample],
    config: TrainConfig,
    encoder_config: ToyEncoderConfig | None = None,
    partition: CategoryClassPartition | None = None,
    dev_corpus: list[LabeledExample] | None = None,
) -> TrainResult:
    from .evaluate import evaluate_model

    if not train_corpus:
        raise ValueError("training corpus is empty")
    longest = max(len(ex.sentence) for ex in train_corpus)
    if longest > config.max_seq_len:
        raise ValueError(
            f"corpus sentence of {longest} characters exceeds max_seq_len "
            f"{config.max_seq_len}"
        )
    torch.set_num_threads(1)  # reproducible reductions
    torch.manual_seed(config.seed)
    vocab = Vocab.build(ex.sentence.text for ex in train_corpus)
    model = build_model(config, vocab, encoder_config, partition)
    optimizer = torch.optim.AdamW(
        parameter_groups(model, config), weight_decay=config.weight_decay
    )
    result = TrainResult(model)
    for epoch in range(config.epochs):
        model.train()
        order = epoch_order(len(train_corpus), config.seed, epoch)
        total_loss = 0.0
        n_batches = 0
        for batch_idx, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [train_corpus[j] for j in order[start : start + config.batch_size]]
            optimizer.zero_grad()
            loss, _ = model.loss(batch, loss_mode=config.loss_mode)
            loss_value = float(loss.detach())
            if not math.isfinite(loss_value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} batch {batch_idx}"
                )
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            total_loss += loss_value
            n_batches += 1
        entry = {"epoch": epoch, "train_loss": total_loss / n_batches}
        if dev_corpus:
            scored = evaluate_model(model, dev_corpus)
            entry["dev_f1"] = scored["pass2"].overall.f1
            entry["per_class_f1"] = {
                name: m.f1 for name, m in scored["pass2"].per_category.items()
            }
            model.train()
        result.metrics.append(entry)
    model.eval()
    return result


def write_metrics_log(path: str | Path, result: TrainResult) -> None:
    Path(path).write_text(result.metrics_jsonl())
