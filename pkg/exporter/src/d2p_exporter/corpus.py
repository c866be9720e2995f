"""Tokenize evaluation text into the corpus wire format.

Supported sources: the wikitext2 / ptb dataset names (fetched with the
`datasets` library), or a path to a local UTF-8 text file. A manifest
records source, split, and preprocessing so downstream perplexity numbers
stay attributable.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .interchange import write_corpus

DATASETS = {
    "wikitext2": ("wikitext", "wikitext-2-raw-v1"),
    "ptb": ("ptb_text_only", None),
}


def _load_text(source: str, split: str) -> tuple[str, dict]:
    if os.path.isfile(source):
        with open(source, encoding="utf-8") as f:
            text = f.read()
        return text, {"source": source, "split": "file", "joiner": None}
    if source not in DATASETS:
        raise ValueError(f"unknown corpus source {source!r}: expected "
                         f"{sorted(DATASETS)} or a local text file path")
    from datasets import load_dataset

    name, subset = DATASETS[source]
    ds = load_dataset(name, subset, split=split)
    column = "text" if "text" in ds.column_names else "sentence"
    text = "\n\n".join(row for row in ds[column] if row.strip())
    return text, {"source": source, "split": split, "joiner": "\\n\\n"}


def export_corpus(source: str, split: str, tokenizer_src: str, out_path: str) -> dict:
    from transformers import AutoTokenizer

    text, meta = _load_text(source, split)
    if not text.strip():
        raise ValueError(f"{source}: empty text source")
    tokenizer = AutoTokenizer.from_pretrained(tokenizer_src)
    ids = np.asarray(tokenizer.encode(text), dtype=np.int64)
    vocab = int(tokenizer.vocab_size)
    if ids.size and int(ids.max()) >= len(tokenizer):
        raise ValueError(f"token id {int(ids.max())} exceeds tokenizer size {len(tokenizer)}")
    write_corpus(out_path, ids)
    manifest = {
        "schema": "d2p/1",
        "tokens": int(ids.size),
        "vocab_size": vocab,
        "tokenizer": str(tokenizer_src),
        **meta,
    }
    with open(out_path + ".json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return manifest
