"""``destine`` command line.

Exit codes: 0 success, 1 runtime failure, 2 validation or usage failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import model, synth, training
from .config import load_run_config
from .features import FieldSchema, ParseError, SchemaError, Vocabulary, build_vocab, encode_all, load_csv, split
from .model import CheckpointError, ConfigError
from .numerics import DomainError

log = logging.getLogger("destine")

# gradcheck fallbacks when the config does not pin the data-derived sizes
GRADCHECK_NUM_FIELDS = 4
GRADCHECK_TOTAL_FEATURES = 20

_VALIDATION_ERRORS = (ConfigError, SchemaError, ParseError, CheckpointError)


class UsageError(Exception):
    pass


def prepare_splits(data_cfg):
    """Load the CSV, split raw records, build the vocabulary on train only, encode."""
    schema = data_cfg.schema
    records = load_csv(data_cfg.path, schema)
    parts = split(records, data_cfg.ratios, data_cfg.split_seed)
    vocab = build_vocab(parts[0], schema, data_cfg.min_count)
    return schema, vocab, tuple(encode_all(p, schema, vocab) for p in parts)


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, require=("data", "output"))
    schema, vocab, (tr, va, te) = prepare_splits(cfg.data)
    model_cfg = cfg.model_config(num_fields=schema.num_fields, total_features=vocab.total_features)
    log.info("train=%d validation=%d test=%d features=%d", len(tr), len(va), len(te), vocab.total_features)
    params, report = training.train(tr, va, te, model_cfg, cfg.train)
    model.save_checkpoint(cfg.output.checkpoint, params, model_cfg, cfg.to_dict(), vocab.to_list())
    with open(cfg.output.metrics, "w", encoding="utf-8", newline="") as fh:
        fh.write(report.to_csv())
    log.info("test auc=%.6f logloss=%.6f (%.1fs)", report.test_auc, report.test_logloss, report.seconds)
    return 0


def _load_for_inference(checkpoint, data_path, require_label):
    run, model_cfg, params, vocab_list = model.load_checkpoint(checkpoint)
    try:
        schema = FieldSchema.from_dict(run["data"]["schema"])
    except (KeyError, TypeError):
        raise CheckpointError(f"{checkpoint}: no data schema recorded") from None
    if vocab_list is None:
        raise CheckpointError(f"{checkpoint}: no vocabulary recorded")
    vocab = Vocabulary.from_list(vocab_list)
    if schema.num_fields != model_cfg.num_fields or vocab.total_features != model_cfg.total_features:
        raise CheckpointError(f"{checkpoint}: schema/vocabulary do not match the model config")
    records = load_csv(data_path, schema, require_label=require_label)
    has_label = require_label or (records and schema.label_column in records[0])
    ds = encode_all(records, schema, vocab, label=bool(has_label))
    return model_cfg, params, ds


def cmd_evaluate(args) -> int:
    model_cfg, params, ds = _load_for_inference(args.checkpoint, args.data, True)
    x, y = ds.arrays()
    try:
        auc, ll = training.evaluate(params, model_cfg, x, y)
    except DomainError as exc:
        raise UsageError(str(exc)) from None
    print(f"auc={auc!r} logloss={ll!r}")
    return 0


def cmd_predict(args) -> int:
    model_cfg, params, ds = _load_for_inference(args.checkpoint, args.data, False)
    x, _ = ds.arrays()
    scores = model.predict(x, params, model_cfg) if len(x) else []
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write("row_index,score\n")
        for i, s in enumerate(scores):
            fh.write(f"{i},{float(s)!r}\n")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = load_run_config(args.config)
    model_cfg = cfg.model_config(
        num_fields=cfg.model.get("num_fields", GRADCHECK_NUM_FIELDS),
        total_features=cfg.model.get("total_features", GRADCHECK_TOTAL_FEATURES),
    )
    seed = cfg.train.seed if args.seed is None else args.seed
    try:
        report = training.grad_check(model_cfg, seed=seed, h=args.h, tol=args.tol, batch_size=args.batch)
    except DomainError as exc:
        raise UsageError(str(exc)) from None
    for line in report.lines():
        print(line)
    print("PASS" if report.passed else "FAIL")
    return 0 if report.passed else 1


def cmd_synth(args) -> int:
    if args.n < 100:
        raise UsageError(f"--n must be at least 100, got {args.n}")
    text = synth.to_csv(args.n, args.seed)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="destine", description="Disentangled self-attention CTR model")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="prepare data, train, write checkpoint and metrics")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="print auc and logloss of a checkpoint on a CSV")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="write row_index,score for every row of a CSV")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    p.add_argument("config")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write the planted-interaction synthetic CSV")
    p.add_argument("out")
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, *_VALIDATION_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, DomainError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
