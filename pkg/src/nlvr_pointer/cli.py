"""Command-line driver.

Exit codes: 0 success, 2 I/O or input error, 3 numeric failure,
4 incompatible checkpoint.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

from .checkpoint import CheckpointError, VersionMismatch, load_checkpoint
from .data import ParseError, Vocabulary, build_vocabulary, encode_example, read_corpus
from .training import NonFiniteLoss, TrainConfig, Trainer, evaluate, predict

EXIT_OK, EXIT_IO, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 2, 3, 4

logger = logging.getLogger("nlvr_pointer")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _read(path, what: str):
    if path is None:
        raise CliError(f"missing --{what} path", EXIT_IO)
    try:
        examples = read_corpus(path)
    except OSError as exc:
        raise CliError(f"cannot read {what} file {path}: {exc.strerror}", EXIT_IO) from None
    except ParseError as exc:
        raise CliError(f"{path}: {exc}", EXIT_IO) from None
    if not examples:
        raise CliError(f"{what} file {path} contains no examples", EXIT_IO)
    return examples


def _load_trainer(path) -> Trainer:
    try:
        ckpt = load_checkpoint(path)
    except VersionMismatch as exc:
        raise CliError(str(exc), EXIT_CHECKPOINT) from None
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_IO) from None
    try:
        return Trainer.from_checkpoint(ckpt)
    except (ValueError, TypeError, KeyError) as exc:
        raise CliError(f"incompatible checkpoint {path}: {exc}", EXIT_CHECKPOINT) from None


# ---------------------------------------------------------------- subcommands


def cmd_build_vocab(args) -> int:
    raws = _read(args.train, "train")
    vocab = build_vocabulary(raws, args.min_count)
    out = args.vocab or args.out
    if out is None:
        raise CliError("missing --vocab output path", EXIT_IO)
    try:
        vocab.save(out)
    except OSError as exc:
        raise CliError(f"cannot write {out}: {exc.strerror}", EXIT_IO) from None
    print(f"vocab_size={len(vocab)}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    model = args.model
    if args.no_pointer and model == "biatt-pointer":
        model = "biatt"
    checkpoint = args.checkpoint or "checkpoint.bapt"
    metrics = args.metrics or str(Path(checkpoint).with_name("metrics.jsonl"))
    return TrainConfig(
        lr=args.lr,
        dropout=args.dropout,
        clip_norm=args.clip_norm,
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        seed=args.seed,
        pooling=args.pooling,
        model=model,
        encoder_order_randomized=args.randomize_encoder_order,
        min_count=args.min_count,
        embed_dim=args.embed_dim,
        hidden=args.hidden,
        object_dim=args.object_dim,
        joint_dim=args.joint_dim,
        mlp_dim=args.mlp_dim,
        train_path=args.train,
        dev_path=args.dev,
        test_path=args.test,
        vocab_path=args.vocab,
        checkpoint_path=checkpoint,
        metrics_path=metrics,
    )


def cmd_train(args) -> int:
    config = _train_config(args)
    train_raw = _read(args.train, "train")
    dev_raw = _read(args.dev, "dev") if args.dev else None
    if args.vocab and Path(args.vocab).exists():
        try:
            vocab = Vocabulary.load(args.vocab)
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot load vocabulary {args.vocab}: {exc}", EXIT_IO) from None
    else:
        vocab = build_vocabulary(train_raw, config.min_count)
        if args.vocab:
            vocab.save(args.vocab)
    train = [encode_example(r, vocab) for r in train_raw]
    dev = [encode_example(r, vocab) for r in dev_raw] if dev_raw else None
    trainer = Trainer(config, vocab)
    try:
        trainer.fit(train, dev)
    except NonFiniteLoss as exc:
        raise CliError(str(exc), EXIT_NUMERIC) from None
    except FloatingPointError as exc:
        raise CliError(f"numeric failure at step {trainer.step}: {exc}", EXIT_NUMERIC) from None
    if args.test:
        metrics = trainer.evaluate([encode_example(r, vocab) for r in _read(args.test, "test")], "test")
        print(json.dumps({"split": "test", "accuracy": metrics.accuracy, "count": metrics.count}))
    return EXIT_OK


def _examples_for(trainer: Trainer, path):
    return [encode_example(r, trainer.vocab) for r in _read(path, "data")]


def cmd_eval(args) -> int:
    trainer = _load_trainer(args.checkpoint)
    examples = _examples_for(trainer, args.data)
    metrics = evaluate(trainer.model, trainer.pointer, examples, "eval", trainer.config.batch_size)
    print(f"accuracy={metrics.accuracy:.4f} n={metrics.count}")
    record = asdict(metrics)
    record.pop("history")
    print(json.dumps(record))
    return EXIT_OK


def _write_predictions(args, with_orders: bool) -> int:
    trainer = _load_trainer(args.checkpoint)
    examples = _examples_for(trainer, args.data)
    preds = predict(trainer.model, trainer.pointer, examples, trainer.config.batch_size)
    lines = []
    for p in preds:
        record = {
            "identifier": p.identifier,
            "probability": p.output.probability,
            "label": p.output.label,
            "scores": p.output.scores,
            "chosen_subimage": p.output.chosen,
        }
        if with_orders:
            record["orders"] = p.orders
        lines.append(json.dumps(record))
    text = "\n".join(lines) + "\n"
    if args.out:
        try:
            Path(args.out).write_text(text, encoding="utf-8")
        except OSError as exc:
            raise CliError(f"cannot write {args.out}: {exc.strerror}", EXIT_IO) from None
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_predict(args) -> int:
    return _write_predictions(args, with_orders=False)


def cmd_dump_orders(args) -> int:
    return _write_predictions(args, with_orders=True)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nlvr-pointer", description="BiATT-Pointer for NLVR structured data")
    parser.add_argument("-v", "--verbose", action="store_true", help="log diagnostics to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="build the vocabulary from a training file")
    p.add_argument("--train", required=True)
    p.add_argument("--vocab", help="output vocabulary file")
    p.add_argument("--out", help="alias of --vocab")
    p.add_argument("--min-count", type=int, default=3)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--train", required=True)
    p.add_argument("--dev")
    p.add_argument("--test")
    p.add_argument("--vocab")
    p.add_argument("--checkpoint", help="where the best-dev checkpoint is written")
    p.add_argument("--metrics", help="metrics.jsonl path (default: next to the checkpoint)")
    p.add_argument("--model", choices=["biatt-pointer", "biatt", "bienc"], default="biatt-pointer")
    p.add_argument("--pooling", choices=["max", "mean"], default="max")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--max-epochs", type=int, default=30)
    p.add_argument("--clip-norm", type=float, default=5.0)
    p.add_argument("--dropout", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-pointer", action="store_true")
    p.add_argument("--randomize-encoder-order", action="store_true")
    p.add_argument("--min-count", type=int, default=3)
    p.add_argument("--embed-dim", type=int, default=128)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--object-dim", type=int, default=64)
    p.add_argument("--joint-dim", type=int, default=512)
    p.add_argument("--mlp-dim", type=int, default=512)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval", cmd_eval, "report accuracy of a checkpoint"),
        ("predict", cmd_predict, "write one prediction record per example"),
        ("dump-orders", cmd_dump_orders, "predictions plus greedy pointer orders"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--seed", type=int, default=0, help="accepted for reproducibility; inference is deterministic")
        if name != "eval":
            p.add_argument("--out", help="output JSONL (default stdout)")
        p.set_defaults(func=func)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
