"""d2p-export: model and corpus conversion commands."""

from __future__ import annotations

import argparse
import sys


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="d2p-export", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    mp = sub.add_parser("model", help="convert a GPT-2/LLaMA-family checkpoint")
    mp.add_argument("src", help="HF model id or local checkpoint path")
    mp.add_argument("out", help="output directory")

    cp = sub.add_parser("corpus", help="tokenize an evaluation corpus")
    cp.add_argument("source", help="wikitext2 | ptb | path to a UTF-8 text file")
    cp.add_argument("split", help="dataset split, e.g. test (ignored for files)")
    cp.add_argument("model_dir", metavar="model-dir",
                    help="HF model id/path whose tokenizer matches the exported model")
    cp.add_argument("out", help="output .d2ptok path")

    args = parser.parse_args(argv)
    try:
        if args.command == "model":
            from .convert import export_model

            summary = export_model(args.src, args.out)
            print(f"exported {summary['flavor']} model "
                  f"({summary['param_count']:,} params) -> {summary['out']}")
        else:
            from .corpus import export_corpus

            manifest = export_corpus(args.source, args.split, args.model_dir, args.out)
            print(f"exported {manifest['tokens']:,} tokens "
                  f"(vocab {manifest['vocab_size']}) -> {args.out}")
        return 0
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"d2p-export {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
