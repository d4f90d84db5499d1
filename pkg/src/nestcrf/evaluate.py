"""Exact-match span scoring and the four-configuration ablation matrix.

A predicted span counts only when its (start, end, category) triple appears
in the gold set of the same example.  Precision falls back to 0 when nothing
was predicted; micro-averaging sums TP/FP/FN over the corpus.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import torch

from .attention import ChangeStats, change_stats
from .data import CATEGORY_ORDER, EntitySpan, LabeledExample
from .model import NestedTagger


@dataclass(frozen=True)
class CategoryMetrics:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    @property
    def support(self) -> int:
        return self.tp + self.fn

    def as_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "support": self.support,
        }


@dataclass(frozen=True)
class Metrics:
    overall: CategoryMetrics
    per_category: dict[str, CategoryMetrics]

    def as_dict(self) -> dict:
        return {
            "overall": self.overall.as_dict(),
            "per_category": {k: v.as_dict() for k, v in self.per_category.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=1) + "\n"


def score(
    predictions: Sequence[Iterable[EntitySpan]],
    gold: Sequence[Iterable[EntitySpan]],
) -> Metrics:
    if len(predictions) != len(gold):
        raise ValueError(
            f"{len(predictions)} prediction sets vs {len(gold)} gold sets"
        )
    tp = {c.value: 0 for c in CATEGORY_ORDER}
    fp = {c.value: 0 for c in CATEGORY_ORDER}
    fn = {c.value: 0 for c in CATEGORY_ORDER}
    for pred, ref in zip(predictions, gold):
        pred_set, ref_set = set(pred), set(ref)
        for span in pred_set:
            if span in ref_set:
                tp[span.category.value] += 1
            else:
                fp[span.category.value] += 1
        for span in ref_set - pred_set:
            fn[span.category.value] += 1
    per_category = {
        name: CategoryMetrics(tp[name], fp[name], fn[name]) for name in tp
    }
    overall = CategoryMetrics(sum(tp.values()), sum(fp.values()), sum(fn.values()))
    return Metrics(overall, per_category)


def batched(texts: Sequence, size: int) -> Iterable[list]:
    for i in range(0, len(texts), size):
        yield list(texts[i : i + size])


@torch.no_grad()
def predict_corpus(
    model: NestedTagger, examples: Sequence[LabeledExample], batch_size: int = 32
) -> tuple[list[frozenset[EntitySpan]], list[frozenset[EntitySpan]]]:
    """Pass-1 and pass-2 span sets for every example, in order."""
    model.eval()
    pass1: list[frozenset[EntitySpan]] = []
    pass2: list[frozenset[EntitySpan]] = []
    for chunk in batched(examples, batch_size):
        p1, p2 = model.predict([ex.sentence.text for ex in chunk])
        pass1.extend(p1)
        pass2.extend(p2)
    return pass1, pass2


def evaluate_model(
    model: NestedTagger, examples: Sequence[LabeledExample], batch_size: int = 32
) -> dict[str, Metrics]:
    gold = [ex.spans for ex in examples]
    pass1, pass2 = predict_corpus(model, examples, batch_size)
    return {"pass1": score(pass1, gold), "pass2": score(pass2, gold)}


@torch.no_grad()
def corpus_change_stats(
    model: NestedTagger, examples: Sequence[LabeledExample], batch_size: int = 32
) -> list[ChangeStats]:
    """Table-5-style label-change accounting summed over a corpus."""
    model.eval()
    totals = [ChangeStats(0, 0) for _ in range(model.num_classes)]
    for chunk in batched(examples, batch_size):
        result, char_lengths = model.decode([ex.sentence.text for ex in chunk])
        gold = model.gold_tensors(list(chunk), result.pass1[0].size(1))
        for i in range(model.num_classes):
            totals[i] = totals[i] + change_stats(
                result.pass1[i], result.pass2[i], gold[i], char_lengths
            )
    return totals


ABLATION_CONFIGS = (
    ("full", True, True),
    ("no_as", False, True),
    ("no_acrf", True, False),
    ("no_both", False, False),
)


def run_ablation_matrix(
    train_corpus: list[LabeledExample],
    test_corpus: list[LabeledExample],
    train_config,
    encoder_config,
    seeds: Sequence[int],
) -> list[dict]:
    """Train and score the four switch configurations for every seed.

    Returns rows {config, seed, precision, recall, f1} ordered by
    configuration then seed; training budgets and data are identical across
    configurations.
    """
    from dataclasses import replace

    from .train import train

    if not seeds:
        raise ValueError("at least one seed is required")
    rows = []
    for name, use_adaptive, use_acrf in ABLATION_CONFIGS:
        for seed in seeds:
            cfg = replace(
                train_config, seed=seed, use_adaptive=use_adaptive, use_acrf=use_acrf
            )
            result = train(train_corpus, cfg, encoder_config=encoder_config)
            metrics = evaluate_model(result.model, test_corpus)["pass2"].overall
            rows.append(
                {
                    "config": name,
                    "seed": seed,
                    "precision": metrics.precision,
                    "recall": metrics.recall,
                    "f1": metrics.f1,
                }
            )
    return rows


def ablation_csv(rows: list[dict]) -> str:
    out = io.StringIO()
    out.write("config,seed,precision,recall,f1\n")
    for row in rows:
        out.write(
            f"{row['config']},{row['seed']},{row['precision']:.6f},"
            f"{row['recall']:.6f},{row['f1']:.6f}\n"
        )
    return out.getvalue()
