"""Command-line entry point: ``sparql-lm <subcommand> ...``.

Exit codes: 0 success, 2 invalid input or configuration, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
from pathlib import Path

import torch

from . import codec, data, decoding, evaluation, tokenizer, training
from .model import ModelConfig

log = logging.getLogger("sparql_lm")

VALIDATION_ERRORS = (
    codec.CodecError,
    data.DataError,
    tokenizer.VocabError,
    training.ShapeMismatch,
    training.CheckpointError,
    evaluation.LengthMismatch,
    evaluation.EmptyCorpus,
    decoding.EmptySource,
    FileNotFoundError,
    IsADirectoryError,
)


class UsageError(ValueError):
    pass


def _run_config(args) -> data.RunConfig:
    cfg = data.load_run_config(args.config) if args.config else data.RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _model_cfg(cfg: data.RunConfig, args, vocab_len: int) -> ModelConfig:
    # the embedding table always follows the vocabulary file; the config only caps it
    if vocab_len > cfg.vocab_size:
        raise data.ConfigError(f"vocabulary has {vocab_len} entries, config caps it at {cfg.vocab_size}")
    model = dataclasses.replace(cfg.model, vocab_size=vocab_len)
    dataclasses.replace(cfg, model=model).check(vocab_len)
    return model


def _read_nonblank(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def _write_lines(path, lines):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(line + "\n" for line in lines)


# --------------------------------------------------------------------------
# subcommands


def cmd_prepare_corpus(args, cfg):
    ns = codec.NamespaceTable.from_file(args.namespaces) if args.namespaces else cfg.namespace_table()
    allow = args.allow_host or None
    kept, rejected = [], 0
    for raw in codec.read_query_log(args.input):
        try:
            kept.append(codec.prepare_query(raw, ns, allow))
        except (codec.QueryRejected, codec.EncodingUnsupported, codec.UnterminatedLiteral, codec.UnknownPrefix) as exc:
            rejected += 1
            log.debug("%s: %s", raw.source_id, exc)
    unique = list(codec.dedupe_corpus(kept))
    _write_lines(args.out, (q.text for q in unique))
    print(json.dumps({"accepted": len(kept), "rejected": rejected, "unique": len(unique)}))


def cmd_train_tokenizer(args, cfg):
    corpus = [line for path in args.corpus for line in _read_nonblank(path)]
    size = args.vocab_size or cfg.vocab_size
    v = tokenizer.train_wordpiece(corpus, size, min_freq=args.min_freq if args.min_freq is not None else cfg.min_freq)
    v.save(args.out)
    print(json.dumps({"vocab_size": len(v), "digest": v.digest()}))


def cmd_pretrain(args, cfg):
    vocab = tokenizer.load_vocab(args.vocab)
    corpus = _read_nonblank(args.corpus)
    model_cfg = _model_cfg(cfg, args, len(vocab))
    opt = dataclasses.replace(
        cfg.pretrain_opt,
        **{k: v for k, v in (("max_steps", args.steps), ("batch_size", args.batch_size),
                             ("learning_rate", args.lr)) if v is not None},
    )
    init = None if args.init in (None, "scratch") else training.Checkpoint.load(args.init)
    resume = training.Checkpoint.load(args.resume) if args.resume else None
    for ck in (init, resume):
        if ck is not None and ck.vocab_digests.get("encoder") not in (None, vocab.digest()):
            raise training.CheckpointError("checkpoint was trained with a different vocabulary")
    ccfg = dataclasses.replace(cfg.corruption, seed=cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "a", encoding="utf-8") as metrics:
        ckpt, losses = training.pretrain(
            corpus, vocab, model_cfg, opt, ccfg,
            objectives=args.objectives or cfg.objectives,
            init=init, resume=resume, max_len=args.max_len or cfg.pretrain_max_len,
            seed=cfg.seed, out_dir=out, checkpoint_every=args.checkpoint_every, metrics=metrics,
        )
    shutil.copyfile(args.vocab, out / "vocab.txt")
    print(json.dumps({"steps": ckpt.step, "final_loss": losses[-1] if losses else None,
                      "checkpoint": str(out / "final.ckpt")}))


def _init_arg(value: str | None):
    if value in (None, "random"):
        return "random"
    return training.Checkpoint.load(value)


def _pairs(path, fmt, direction):
    exs = data.load_parallel(path, format=fmt)
    if direction == "nl2sparql":
        return [(e.source, e.target) for e in exs]
    return [(e.target, e.source) for e in exs]


def cmd_finetune(args, cfg):
    src_vocab = tokenizer.load_vocab(args.src_vocab)
    tgt_vocab = tokenizer.load_vocab(args.tgt_vocab)
    train = _pairs(args.pairs, args.format, args.direction)
    valid = _pairs(args.valid, args.format, args.direction) if args.valid else None
    enc_cfg = _model_cfg(cfg, args, len(src_vocab))
    dec_cfg = dataclasses.replace(enc_cfg, vocab_size=len(tgt_vocab))
    opt = dataclasses.replace(
        cfg.finetune_opt,
        **{k: v for k, v in (("batch_size", args.batch_size), ("learning_rate", args.lr)) if v is not None},
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "a", encoding="utf-8") as metrics:
        res = training.finetune_seq2seq(
            train, src_vocab, tgt_vocab, enc_cfg, opt,
            encoder_init=_init_arg(args.encoder), decoder_init=_init_arg(args.decoder),
            valid=valid, epochs=args.epochs or cfg.epochs,
            src_max=args.src_max or cfg.src_max, tgt_max=args.tgt_max or cfg.tgt_max,
            seed=cfg.seed, metrics=metrics, dec_cfg=dec_cfg,
        )
    res.checkpoint.meta["direction"] = args.direction
    res.checkpoint.save(out / "model.ckpt")
    shutil.copyfile(args.src_vocab, out / "src.vocab")
    shutil.copyfile(args.tgt_vocab, out / "tgt.vocab")
    (out / "warm_start.json").write_text(json.dumps(res.decoder_manifest, indent=1))
    print(json.dumps({"best_epoch": res.best_epoch, "best_score": res.best_score,
                      "checkpoint": str(out / "model.ckpt")}))


def cmd_generate(args, cfg):
    ckpt = training.Checkpoint.load(args.model)
    mdir = Path(args.model).parent
    src_vocab = tokenizer.load_vocab(args.src_vocab or mdir / "src.vocab")
    tgt_vocab = tokenizer.load_vocab(args.tgt_vocab or mdir / "tgt.vocab")
    for side, v in (("encoder", src_vocab), ("decoder", tgt_vocab)):
        if ckpt.vocab_digests.get(side) not in (None, v.digest()):
            raise training.CheckpointError(f"{side} vocabulary does not match the checkpoint")
    model = ckpt.build_seq2seq().eval()
    gcfg = decoding.GenerateConfig(
        beam_width=args.beam or cfg.beam_width, max_len=args.max_len, length_penalty=cfg.length_penalty,
        src_max=ckpt.meta.get("src_max", cfg.src_max), namespaces=cfg.namespace_table(),
    )
    outputs, decoded = [], 0
    with open(args.input, encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh]
    for line in lines:
        if not line.strip():
            outputs.append("")
            continue
        gen = decoding.generate(model, line, args.direction, src_vocab, tgt_vocab, gcfg)
        decoded += bool(gen.decode_ok)
        outputs.append(gen.sparql if (args.executable and gen.sparql) else gen.text)
    _write_lines(args.out, outputs)
    print(json.dumps({"n": len(outputs), "decode_ok": decoded if args.direction == "nl2sparql" else None}))


def cmd_evaluate(args, cfg):
    with open(args.candidates, encoding="utf-8") as fh:
        cands = [line.rstrip("\n") for line in fh]
    with open(args.references, encoding="utf-8") as fh:
        refs = [line.rstrip("\n") for line in fh]
    metrics = {m.strip() for m in args.metric.split(",")}
    if not metrics <= {"bleu", "em"}:
        raise UsageError(f"unknown metric in {args.metric!r}")
    rep = evaluation.evaluate(cands, refs, smoothing=args.smoothing or cfg.bleu_smoothing,
                              normalize=cfg.em_normalize)
    out = rep.to_dict()
    if "bleu" not in metrics:
        for k in ("bleu", "per_ngram_precisions", "brevity_penalty"):
            out.pop(k)
    if "em" not in metrics:
        out.pop("exact_match")
    text = json.dumps(out, indent=1)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text)


def cmd_make_fixtures(args, cfg):
    entities = _read_nonblank(args.entities) if args.entities else data.DEFAULT_ENTITIES
    corpus, pairs = data.make_fixture_corpus(args.templates, entities, cfg.seed, cfg.namespace_table())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_lines(out / "pretrain.txt", (q.text for q in corpus))
    for split in data.SPLITS:
        data.save_parallel([p for p in pairs if p.split == split], out / split)
    print(json.dumps({"queries": len(corpus), **{s: sum(p.split == s for p in pairs) for s in data.SPLITS}}))


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int, help="single seed for all randomness")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sparql-lm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare-corpus", parents=[common], help="clean, validate, encode and dedupe a query log")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--namespaces", help="file of 'tag iri' lines")
    s.add_argument("--allow-host", action="append", help="accepted IRI host (repeatable)")
    s.set_defaults(func=cmd_prepare_corpus)

    s = sub.add_parser("train-tokenizer", parents=[common], help="learn a WordPiece vocabulary")
    s.add_argument("--corpus", required=True, nargs="+")
    s.add_argument("--vocab-size", type=int)
    s.add_argument("--min-freq", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_tokenizer)

    s = sub.add_parser("pretrain", parents=[common], help="MLM or MLM+WSO pre-training of an encoder")
    s.add_argument("--corpus", required=True, help="encoded queries, one per line")
    s.add_argument("--vocab", required=True)
    s.add_argument("--objectives", choices=("mlm", "mlm+wso"))
    s.add_argument("--init", default="scratch", help="'scratch' or an encoder checkpoint")
    s.add_argument("--resume", help="checkpoint of an interrupted run")
    s.add_argument("--steps", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--max-len", type=int)
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", parents=[common], help="train an encoder-decoder on parallel pairs")
    s.add_argument("--pairs", required=True, help="training corpus (stem of .en/.sparql files, or .tsv)")
    s.add_argument("--valid")
    s.add_argument("--format", choices=("paired", "tsv"), default="paired")
    s.add_argument("--direction", choices=decoding.TASKS, default="nl2sparql")
    s.add_argument("--src-vocab", required=True)
    s.add_argument("--tgt-vocab", required=True)
    s.add_argument("--encoder", default="random", help="'random' or an encoder checkpoint")
    s.add_argument("--decoder", default="random", help="'random' or an encoder checkpoint to warm-start from")
    s.add_argument("--src-max", type=int)
    s.add_argument("--tgt-max", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("generate", parents=[common], help="beam-search decode one output per input line")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--direction", choices=decoding.TASKS, default="nl2sparql")
    s.add_argument("--beam", type=int)
    s.add_argument("--max-len", type=int)
    s.add_argument("--src-vocab")
    s.add_argument("--tgt-vocab")
    s.add_argument("--executable", action="store_true", help="write decoded SPARQL instead of encoded form")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("evaluate", parents=[common], help="corpus BLEU and exact match")
    s.add_argument("--candidates", required=True)
    s.add_argument("--references", required=True)
    s.add_argument("--metric", default="bleu,em")
    s.add_argument("--smoothing", action="store_true")
    s.add_argument("--report")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("make-fixtures", parents=[common], help="write synthetic monument-style corpora")
    s.add_argument("--templates", type=int, default=38)
    s.add_argument("--entities", help="file with one entity local name per line")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_fixtures)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _run_config(args)
        torch.manual_seed(cfg.seed)
        args.func(args, cfg)
    except (UsageError, *VALIDATION_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
