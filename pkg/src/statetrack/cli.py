"""Command-line surface: train, eval, predict, gen.

Configuration comes from an optional JSON file plus flag overrides (flags
win).  All outputs are UTF-8 JSON/JSONL.  Exit codes: 0 success, 1
usage/config error, 2 data validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from . import corpus, evaluation, model, training
from .corpus import CorpusError
from .model import CheckpointError
from .training import NumericalError, TrainingConfig

logger = logging.getLogger("statetrack")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    train: str | None = None
    dev: str | None = None
    test: str | None = None
    embeddings: str | None = None
    checkpoint: str = "checkpoint.json"
    report: str = "report.json"
    label_fraction: float = 1.0
    use_unlabeled: bool = False
    lambda_weight: float = 0.05
    sup_threshold: float = 0.2
    learning_rate: float = 0.1
    epochs: int = 50
    seed: int = 0
    hidden_size: int = 8
    embedding_dim: int = 16
    consistency_enabled: bool = True

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(
            lambda_weight=self.lambda_weight, sup_threshold=self.sup_threshold,
            learning_rate=self.learning_rate, epochs=self.epochs, seed=self.seed,
            hidden_size=self.hidden_size, embedding_dim=self.embedding_dim,
            consistency_enabled=self.consistency_enabled)


_CONFIG_KEYS = {f.name for f in dataclasses.fields(RunConfig)} | {"lambda"}


def _build_run_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config}: invalid JSON: {exc.msg}") from exc
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
        for key, value in raw.items():
            if key not in _CONFIG_KEYS:
                raise UsageError(f"config file: unknown key {key!r}")
            setattr(cfg, "lambda_weight" if key == "lambda" else key, value)
    overrides = {
        "train": args.train, "dev": args.dev, "test": args.test,
        "embeddings": args.embeddings, "checkpoint": args.checkpoint,
        "report": args.report, "label_fraction": args.label_fraction,
        "lambda_weight": args.lambda_weight, "sup_threshold": args.sup_threshold,
        "learning_rate": args.lr, "epochs": args.epochs, "seed": args.seed,
        "hidden_size": args.hidden, "embedding_dim": args.emb_dim,
    }
    for name, value in overrides.items():
        if value is not None:
            setattr(cfg, name, value)
    if args.use_unlabeled:
        cfg.use_unlabeled = True
    if args.no_consistency:
        cfg.consistency_enabled = False
    try:
        if not 0.0 < cfg.label_fraction <= 1.0:
            raise UsageError("label-fraction must lie in (0, 1]")
        cfg.training_config().validate()
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands

def cmd_train(args: argparse.Namespace) -> int:
    cfg = _build_run_config(args)
    if not cfg.train:
        raise UsageError("train corpus path is required (--train or config)")
    groups = corpus.load_corpus(cfg.train)
    dev_groups = corpus.load_corpus(cfg.dev) if cfg.dev else []
    demoted = 0
    if cfg.label_fraction < 1.0:
        groups, demoted = corpus.demote_labels(
            groups, cfg.label_fraction, seed=cfg.seed,
            reuse_unlabeled=cfg.use_unlabeled)
    embeddings = corpus.EmbeddingTable.load(cfg.embeddings) if cfg.embeddings else None

    tcfg = cfg.training_config()
    if embeddings is None:
        result = training.train(groups, tcfg, dev=dev_groups)
    else:
        result = _train_with_embeddings(groups, tcfg, dev_groups, embeddings)

    model.save_checkpoint(result.params, cfg.checkpoint)
    report = {
        "config": {**dataclasses.asdict(cfg), "demoted_paragraphs": demoted},
        **result.report,
    }
    _write_json(cfg.report, report)
    logger.info("wrote checkpoint %s and report %s", cfg.checkpoint, cfg.report)
    return EXIT_OK


def _train_with_embeddings(groups, tcfg, dev_groups, embeddings):
    vocab = model.build_vocab(groups)
    probe = model.init_params(vocab, tcfg.embedding_dim, tcfg.hidden_size,
                              seed=tcfg.seed, embeddings=embeddings)
    return training.train(groups, tcfg, dev=dev_groups, initial_params=probe)


def cmd_eval(args: argparse.Namespace) -> int:
    params = model.load_checkpoint(args.checkpoint)
    groups = corpus.load_corpus(args.corpus)
    examples = corpus.flatten_groups(groups)
    if not examples:
        raise CorpusError(f"{args.corpus}: corpus is empty")
    labeled = [ex for ex in examples if ex.gold is not None]
    if not labeled:
        raise CorpusError(f"{args.corpus}: no gold labels to evaluate against")

    preds = {ex.id: evaluation.discretize(model.predict_grid(params, ex))
             for ex in examples}
    metrics = evaluation.score_corpus((preds[ex.id], ex.gold) for ex in labeled)
    consistency = evaluation.consistency_score(groups, preds)
    payload = {**metrics.to_json(), **consistency.to_json()}
    print(json.dumps(payload, indent=2))
    if args.out:
        _write_json(args.out, payload)
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    params = model.load_checkpoint(args.checkpoint)
    examples = corpus.load_examples(args.corpus)
    if not examples:
        raise CorpusError(f"{args.corpus}: corpus is empty")
    with open(args.out, "w", encoding="utf-8") as fh:
        for ex in examples:
            hard = evaluation.discretize(model.predict_grid(params, ex))
            obj = corpus.example_to_json(dataclasses.replace(ex, gold=hard))
            obj["summary"] = {
                ent.name: sorted(c.name for c in evaluation.summary_set(hard, j))
                for j, ent in enumerate(ex.entities)}
            fh.write(json.dumps(obj, ensure_ascii=False))
            fh.write("\n")
    logger.info("wrote predictions for %d paragraphs to %s", len(examples), args.out)
    return EXIT_OK


def cmd_gen(args: argparse.Namespace) -> int:
    sizes = {"train": args.train_topics, "dev": args.dev_topics, "test": args.test_topics}
    total = sum(sizes.values())
    if total < 1:
        raise UsageError("at least one topic across the three splits is required")
    groups = corpus.generate_synthetic(seed=args.seed, topics=total,
                                       paragraphs_per_topic=args.paragraphs,
                                       noise=args.noise)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    offset = 0
    for split, count in sizes.items():
        split_groups = groups[offset:offset + count]
        offset += count
        corpus.save_examples(out_dir / f"{split}.jsonl", corpus.flatten_groups(split_groups))
        logger.info("wrote %s split: %d topics", split, count)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def _add_common_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--train", help="training corpus (JSONL)")
    p.add_argument("--dev", help="dev corpus for model selection (JSONL)")
    p.add_argument("--test", help="test corpus (JSONL)")
    p.add_argument("--embeddings", help="embedding text file (token + decimals per line)")
    p.add_argument("--checkpoint", help="output checkpoint path")
    p.add_argument("--report", help="output training report path")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--label-fraction", dest="label_fraction", type=float, default=None,
                   help="fraction of labeled paragraphs kept per topic")
    p.add_argument("--use-unlabeled", dest="use_unlabeled", action="store_true",
                   help="keep demoted paragraphs as unlabeled group members")
    p.add_argument("--no-consistency", dest="no_consistency", action="store_true",
                   help="train the purely supervised arm (lambda = 1)")
    p.add_argument("--lambda", dest="lambda_weight", type=float, default=None,
                   help="supervised weight in the combined loss")
    p.add_argument("--sup-threshold", dest="sup_threshold", type=float, default=None,
                   help="supervised loss above this skips the consistency term")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--hidden", type=int, default=None, help="total hidden size (even)")
    p.add_argument("--emb-dim", dest="emb_dim", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="statetrack",
        description="Track entity state changes in procedural text.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and write checkpoint + report")
    _add_common_train_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("corpus")
    p_eval.add_argument("--out", help="also write the metrics JSON here")
    p_eval.set_defaults(func=cmd_eval)

    p_pred = sub.add_parser("predict", help="write per-paragraph predictions as JSONL")
    p_pred.add_argument("checkpoint")
    p_pred.add_argument("corpus")
    p_pred.add_argument("--out", required=True)
    p_pred.set_defaults(func=cmd_predict)

    p_gen = sub.add_parser("gen", help="generate a synthetic corpus with disjoint splits")
    p_gen.add_argument("--out-dir", dest="out_dir", default="data")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--train-topics", dest="train_topics", type=int, default=8)
    p_gen.add_argument("--dev-topics", dest="dev_topics", type=int, default=2)
    p_gen.add_argument("--test-topics", dest="test_topics", type=int, default=2)
    p_gen.add_argument("--paragraphs", type=int, default=3)
    p_gen.add_argument("--noise", type=float, default=0.0)
    p_gen.set_defaults(func=cmd_gen)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    raise SystemExit(main())
