"""Switch-ablation study over seeds: full vs no-adaptive vs no-second-pass.

Trains the four switch configurations for every seed at a reduced budget and
prints the per-configuration mean F1 plus the full-minus-baseline margin.
The defaults match the calibration backing the ablation-direction acceptance
check.
"""

import argparse
import statistics
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from nestcrf.data import generate_synthetic_corpus
from nestcrf.evaluate import ABLATION_CONFIGS, ablation_csv, run_ablation_matrix
from nestcrf.train import DESK_ENCODER, TrainConfig


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", default="1,2,3,4,5")
    parser.add_argument("--train-size", type=int, default=400)
    parser.add_argument("--test-size", type=int, default=200)
    parser.add_argument("--epochs", type=int, default=8)
    parser.add_argument("--corpus-seed", type=int, default=7)
    parser.add_argument("--encoder-lr", type=float, default=1e-3)
    parser.add_argument("--acrf-lr", type=float, default=5e-3)
    parser.add_argument("--out", help="write the raw result rows as CSV")
    args = parser.parse_args()

    seeds = [int(s) for s in args.seeds.split(",")]
    corpus = generate_synthetic_corpus(
        args.corpus_seed, args.train_size + args.test_size
    )
    config = TrainConfig(
        epochs=args.epochs, encoder_lr=args.encoder_lr, acrf_lr=args.acrf_lr
    )

    started = time.perf_counter()
    rows = run_ablation_matrix(
        corpus[: args.train_size], corpus[args.train_size :], config,
        DESK_ENCODER, seeds,
    )
    print(f"{len(rows)} runs in {time.perf_counter() - started:.1f} s")

    means = {}
    for name, _, _ in ABLATION_CONFIGS:
        scores = [r["f1"] for r in rows if r["config"] == name]
        means[name] = statistics.mean(scores)
        spread = max(scores) - min(scores)
        print(f"{name:>8}: mean F1 {means[name]:.4f}  "
              f"(min {min(scores):.4f}, max {max(scores):.4f}, spread {spread:.4f})")
    print(f"margin full - no_both: {means['full'] - means['no_both']:+.4f}")

    if args.out:
        Path(args.out).write_text(ablation_csv(rows), encoding="utf-8")
        print(f"rows written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
