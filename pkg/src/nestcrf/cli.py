"""Command-line surface: synthesis, training, evaluation, and report dumps.

Every subcommand is deterministic given its flags: reruns with the same
arguments produce byte-identical artifacts. Run configurations come from an
optional flat key=value file; command-line flags override file values.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    CategoryClassPartition,
    CorpusError,
    EntitySpan,
    LabeledExample,
    default_partition,
    generate_synthetic_corpus,
    load_corpus,
    save_corpus,
    span_sort_key,
)
from .attention import change_stats_csv
from .encoder import StateFileError, ToyEncoderConfig
from .evaluate import (
    ablation_csv,
    corpus_change_stats,
    evaluate_model,
    predict_corpus,
    run_ablation_matrix,
)
from .train import DESK_ENCODER, TrainConfig, TrainingDiverged, train, write_metrics_log


class CliError(RuntimeError):
    """User-facing failure reported as a one-line diagnostic, exit 1."""


_TRAIN_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
_ENCODER_KEYS = ("n_layers", "d_model", "n_heads", "d_ff", "max_len")
_BOOL_VALUES = {
    "true": True,
    "false": False,
    "yes": True,
    "no": False,
    "1": True,
    "0": False,
}


def _coerce(key: str, value: str, target_type: str):
    if target_type == "bool":
        try:
            return _BOOL_VALUES[value.lower()]
        except KeyError:
            raise CliError(f"config key {key}: expected a boolean, got {value!r}")
    try:
        if target_type == "int":
            return int(value)
        if target_type == "float":
            return float(value)
    except ValueError:
        raise CliError(f"config key {key}: expected {target_type}, got {value!r}")
    return value


def read_config_file(path: str | Path) -> dict:
    """Parse a flat key=value file into typed run-config entries.

    Unknown keys are rejected; recognized keys are the training fields,
    ``encoder.<field>`` for the encoder shape, and ``partition``.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e.strerror or e}")
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise CliError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if key in _TRAIN_FIELDS:
            out[key] = _coerce(key, value, _TRAIN_FIELDS[key])
        elif key.startswith("encoder.") and key.removeprefix("encoder.") in _ENCODER_KEYS:
            out[key] = _coerce(key, value, "int")
        elif key == "partition":
            out[key] = value
        else:
            raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
    return out


def _merged_run_config(args: argparse.Namespace) -> dict:
    """File values first, then any flag the user actually passed."""
    merged = read_config_file(args.config) if args.config else {}
    for key in _TRAIN_FIELDS:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    for key in _ENCODER_KEYS:
        flag = getattr(args, f"encoder_{key}", None)
        if flag is not None:
            merged[f"encoder.{key}"] = flag
    if getattr(args, "partition", None) is not None:
        merged["partition"] = args.partition
    return merged


def _split_run_config(
    merged: dict,
) -> tuple[TrainConfig, ToyEncoderConfig, CategoryClassPartition]:
    encoder_kwargs = {
        k.removeprefix("encoder."): v
        for k, v in merged.items()
        if k.startswith("encoder.")
    }
    train_kwargs = {k: v for k, v in merged.items() if k in _TRAIN_FIELDS}
    try:
        encoder = dataclasses.replace(DESK_ENCODER, **encoder_kwargs)
        train_config = TrainConfig(**train_kwargs)
        partition = (
            CategoryClassPartition.parse(merged["partition"])
            if "partition" in merged
            else default_partition()
        )
    except (ValueError, CorpusError) as e:
        raise CliError(str(e))
    return train_config, encoder, partition


def _load(path: str) -> list[LabeledExample]:
    try:
        return load_corpus(path)
    except OSError as e:
        raise CliError(f"cannot read corpus {path}: {e.strerror or e}")
    except CorpusError as e:
        raise CliError(str(e))


def _load_checkpoint(path: str):
    try:
        return load_checkpoint(path)
    except OSError as e:
        raise CliError(f"cannot read checkpoint {path}: {e.strerror or e}")
    except (CheckpointError, StateFileError, CorpusError, ValueError) as e:
        raise CliError(str(e))


def _write_text(path: str | None, payload: str) -> None:
    if path is None:
        sys.stdout.write(payload)
        return
    try:
        Path(path).write_text(payload, encoding="utf-8")
    except OSError as e:
        raise CliError(f"cannot write {path}: {e.strerror or e}")


def _spans_payload(spans: frozenset[EntitySpan]) -> list[dict]:
    return [
        {"start_idx": s.start, "end_idx": s.end, "type": s.category.value}
        for s in sorted(spans, key=span_sort_key)
    ]


def cmd_synth(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError(f"cannot create {out_dir}: {e.strerror or e}")
    corpus = generate_synthetic_corpus(args.seed, args.size)
    try:
        save_corpus(corpus, out_dir / "corpus.json")
    except OSError as e:
        raise CliError(f"cannot write corpus: {e.strerror or e}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    train_config, encoder, partition = _split_run_config(_merged_run_config(args))
    corpus = _load(args.corpus)
    dev = _load(args.dev) if args.dev else None
    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError(f"cannot create {out_dir}: {e.strerror or e}")
    try:
        result = train(
            corpus, train_config, encoder_config=encoder, partition=partition,
            dev_corpus=dev,
        )
    except (ValueError, TrainingDiverged) as e:
        raise CliError(str(e))
    try:
        write_metrics_log(out_dir / "metrics.jsonl", result)
        save_checkpoint(
            out_dir / "model.ckpt",
            result.model,
            extra={"train_config": dataclasses.asdict(train_config)},
        )
    except OSError as e:
        raise CliError(f"cannot write artifacts: {e.strerror or e}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model, _ = _load_checkpoint(args.checkpoint)
    corpus = _load(args.corpus)
    try:
        metrics = evaluate_model(model, corpus)["pass2"]
    except ValueError as e:
        raise CliError(str(e))
    _write_text(args.out, metrics.to_json())
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    model, _ = _load_checkpoint(args.checkpoint)
    corpus = _load(args.corpus)
    try:
        pass1, pass2 = predict_corpus(model, corpus)
    except ValueError as e:
        raise CliError(str(e))
    lines = []
    for ex, p1, p2 in zip(corpus, pass1, pass2):
        record = {
            "text": ex.sentence.text,
            "pass1_spans": _spans_payload(p1),
            "pass2_spans": _spans_payload(p2),
        }
        lines.append(json.dumps(record, sort_keys=True, ensure_ascii=False))
    _write_text(args.out, "".join(line + "\n" for line in lines))
    return 0


def cmd_weights(args: argparse.Namespace) -> int:
    model, _ = _load_checkpoint(args.checkpoint)
    _write_text(args.out, model.adaptive.dump_csv())
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    model, _ = _load_checkpoint(args.checkpoint)
    corpus = _load(args.corpus)
    try:
        per_class = corpus_change_stats(model, corpus)
    except ValueError as e:
        raise CliError(str(e))
    _write_text(args.out, change_stats_csv(per_class))
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    train_config, encoder, partition = _split_run_config(_merged_run_config(args))
    if partition.serialize() != default_partition().serialize():
        raise CliError("ablate uses the default partition; drop the partition key")
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise CliError(f"--seeds expects comma-separated integers, got {args.seeds!r}")
    if not seeds:
        raise CliError("--seeds expects at least one seed")
    train_corpus = _load(args.train)
    test_corpus = _load(args.test)
    try:
        rows = run_ablation_matrix(
            train_corpus, test_corpus, train_config, encoder, seeds
        )
    except (ValueError, TrainingDiverged) as e:
        raise CliError(str(e))
    _write_text(args.out, ablation_csv(rows))
    return 0


def _add_run_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("run configuration (overrides --config)")
    group.add_argument("--config", metavar="FILE", help="flat key=value config file")
    group.add_argument("--batch-size", dest="batch_size", type=int)
    group.add_argument("--max-seq-len", dest="max_seq_len", type=int)
    group.add_argument("--dropout", type=float)
    group.add_argument("--encoder-lr", dest="encoder_lr", type=float)
    group.add_argument("--acrf-lr", dest="acrf_lr", type=float)
    group.add_argument("--weight-decay", dest="weight_decay", type=float)
    group.add_argument("--epochs", type=int)
    group.add_argument("--seed", type=int)
    group.add_argument("--loss-mode", dest="loss_mode", choices=["pass1_only", "joint"])
    group.add_argument("--lstm-hidden", dest="lstm_hidden", type=int)
    group.add_argument("--grad-clip", dest="grad_clip", type=float)
    switches = [
        ("adaptive", "use_adaptive"),
        ("acrf", "use_acrf"),
        ("recurrent-head", "use_recurrent_head"),
        ("embedding-layer", "include_embedding_layer"),
    ]
    for switch, dest in switches:
        group.add_argument(
            f"--{switch}", dest=dest, action=argparse.BooleanOptionalAction,
            default=None,
        )
    group.add_argument("--encoder-n-layers", dest="encoder_n_layers", type=int)
    group.add_argument("--encoder-d-model", dest="encoder_d_model", type=int)
    group.add_argument("--encoder-n-heads", dest="encoder_n_heads", type=int)
    group.add_argument("--encoder-d-ff", dest="encoder_d_ff", type=int)
    group.add_argument("--encoder-max-len", dest="encoder_max_len", type=int)
    group.add_argument("--partition", help="classes as 'sym|dis,dru,...'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nestcrf",
        description="Nested named-entity tagger: train, evaluate, and inspect.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic corpus")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model, write checkpoint and log")
    p.add_argument("--corpus", required=True)
    p.add_argument("--dev")
    p.add_argument("--out", required=True, metavar="DIR")
    _add_run_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", metavar="FILE", help="metrics JSON (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="dump per-example span predictions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", metavar="FILE", help="JSON lines (default stdout)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("weights", help="dump normalized layer weights as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", metavar="FILE", help="CSV (default stdout)")
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("stats", help="dump pass-2 label-change statistics as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", metavar="FILE", help="CSV (default stdout)")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("ablate", help="train and score the four switch settings")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--seeds", required=True, help="comma-separated, e.g. 1,2,3,4,5")
    p.add_argument("--out", metavar="FILE", help="CSV (default stdout)")
    _add_run_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"nestcrf: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
