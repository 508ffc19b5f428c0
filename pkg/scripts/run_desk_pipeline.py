"""Run the whole pipeline on synthetic fixtures with a small model.

fixtures -> tokenizers -> MLM+WSO pre-training -> fine-tuning with a
warm-started decoder -> beam search on the test split -> BLEU / EM.

    python scripts/run_desk_pipeline.py --work /tmp/desk --steps 1000 --epochs 150
"""
import argparse
import sys
from pathlib import Path

from sparql_lm.cli import main as cli

CONFIG = Path(__file__).with_name("desk.ini")


def run(*argv):
    argv = [str(a) for a in argv]
    print("$ sparql-lm", " ".join(argv), flush=True)
    code = cli(argv)
    if code:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--work", default="desk_run")
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--epochs", type=int, default=150)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--beam", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    w = Path(args.work)
    w.mkdir(parents=True, exist_ok=True)
    fx = w / "fixtures"
    common = ("--config", CONFIG, "--seed", args.seed)
    run("make-fixtures", "--out", fx, *common)
    run("train-tokenizer", "--corpus", fx / "pretrain.txt", "--vocab-size", 400, "--min-freq", 1,
        "--out", w / "q.vocab", *common)
    run("train-tokenizer", "--corpus", fx / "train.en", fx / "valid.en", fx / "test.en",
        "--vocab-size", 400, "--min-freq", 1, "--out", w / "nl.vocab", *common)
    run("pretrain", "--corpus", fx / "pretrain.txt", "--vocab", w / "q.vocab", "--objectives", "mlm+wso",
        "--steps", args.steps, "--lr", args.lr, "--max-len", 64, "--out", w / "pt", *common)
    run("finetune", "--pairs", fx / "train", "--valid", fx / "valid", "--src-vocab", w / "nl.vocab",
        "--tgt-vocab", w / "q.vocab", "--decoder", w / "pt/final.ckpt", "--epochs", args.epochs,
        "--lr", args.lr, "--batch-size", 16, "--out", w / "ft", *common)
    run("generate", "--model", w / "ft/model.ckpt", "--input", fx / "test.en", "--beam", args.beam,
        "--out", w / "test.gen", *common)
    run("evaluate", "--candidates", w / "test.gen", "--references", fx / "test.sparql",
        "--report", w / "report.json", *common)


if __name__ == "__main__":
    main()
