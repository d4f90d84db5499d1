"""Command-line wrapper: one export per invocation."""

from __future__ import annotations

import argparse
import logging
import sys

from .exporter import ExportError, ExportManifest, export


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="embexport",
        description="Export per-layer encoder hidden states to an ASACEMB1 file.",
    )
    parser.add_argument("--model", required=True,
                        help="model name or local directory")
    parser.add_argument("--corpus", required=True, help="corpus JSON file")
    parser.add_argument("--out", required=True, help="output state file")
    parser.add_argument("--alignment",
                        help="alignment JSONL (default: <out>.alignment.jsonl)")
    parser.add_argument("--max-positions", type=int, default=512)
    parser.add_argument("--batch-size", type=int, default=8)
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    try:
        manifest = ExportManifest(
            model=args.model,
            corpus=args.corpus,
            output=args.out,
            alignment=args.alignment,
            max_positions=args.max_positions,
            batch_size=args.batch_size,
        )
        result = export(manifest)
    except (ExportError, ValueError) as e:
        print(f"embexport: {e}", file=sys.stderr)
        return 1
    print(
        f"wrote {result.n_sentences} sentences "
        f"({result.n_states} states x {result.d_model} features); "
        f"{result.n_truncated} truncated"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
