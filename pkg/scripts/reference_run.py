"""Desk-scale reference run: train on a seed-7 synthetic corpus and report F1.

Defaults reproduce the calibration run backing the end-to-end acceptance
bar: one corpus of train_size + test_size sentences generated from the seed,
split in order, 30 epochs on one CPU core. Prints wall time, both decoding
passes' overall F1, per-category F1, and the label-change statistics.
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from nestcrf.attention import change_stats_csv
from nestcrf.checkpoint import save_checkpoint
from nestcrf.data import generate_synthetic_corpus
from nestcrf.evaluate import corpus_change_stats, evaluate_model
from nestcrf.train import TrainConfig, train, write_metrics_log


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--train-size", type=int, default=2000)
    parser.add_argument("--test-size", type=int, default=500)
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--encoder-lr", type=float, default=1e-3)
    parser.add_argument("--acrf-lr", type=float, default=5e-3)
    parser.add_argument("--out", help="directory for checkpoint and metrics log")
    args = parser.parse_args()

    corpus = generate_synthetic_corpus(args.seed, args.train_size + args.test_size)
    train_split = corpus[: args.train_size]
    test_split = corpus[args.train_size :]
    config = TrainConfig(
        seed=args.seed,
        epochs=args.epochs,
        encoder_lr=args.encoder_lr,
        acrf_lr=args.acrf_lr,
    )

    started = time.perf_counter()
    result = train(train_split, config)
    train_seconds = time.perf_counter() - started

    scored = evaluate_model(result.model, test_split)
    print(f"trained {args.epochs} epochs on {len(train_split)} sentences "
          f"in {train_seconds:.1f} s")
    print(f"pass-1 overall F1: {scored['pass1'].overall.f1:.4f}")
    print(f"pass-2 overall F1: {scored['pass2'].overall.f1:.4f}")
    print("per-category pass-2 F1:")
    for name, m in scored["pass2"].per_category.items():
        if m.support or m.fp:
            print(f"  {name:>4}: {m.f1:.4f}  (support {m.support})")
    print("label changes between passes:")
    print(change_stats_csv(corpus_change_stats(result.model, test_split)), end="")

    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "model.ckpt", result.model)
        write_metrics_log(out_dir / "metrics.jsonl", result)
        print(f"artifacts written to {out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
