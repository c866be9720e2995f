"""Writer for the d2p interchange format.

Independent of the consumer package on purpose: the exporter talks to it
only through these files (config.json, tensors.json, tensors.bin, .d2ptok),
so a load on the other side cross-validates both implementations.
"""

from __future__ import annotations

import json
import os

import numpy as np

CORPUS_MAGIC = b"D2PTOK01"

CONFIG_KEYS = (
    "flavor", "n_layers", "d_model", "n_heads", "d_head", "d_ff",
    "vocab_size", "max_seq_len", "ffn_kind", "activation", "norm_kind",
    "positional", "tied_embeddings", "norm_eps",
)


def write_model_dir(out_dir: str, config: dict, tensors: dict[str, np.ndarray]) -> int:
    """Write config.json / tensors.json / tensors.bin; returns parameter count."""
    missing = set(CONFIG_KEYS) - set(config)
    if missing:
        raise ValueError(f"config missing keys: {sorted(missing)}")
    os.makedirs(out_dir, exist_ok=True)
    names = sorted(tensors)
    entries = []
    offset = 0
    with open(os.path.join(out_dir, "tensors.bin"), "wb") as f:
        for name in names:
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            entries.append(
                {"name": name, "dtype": "f32", "shape": list(arr.shape), "byte_offset": offset}
            )
            f.write(arr.tobytes())
            offset += arr.nbytes
    with open(os.path.join(out_dir, "tensors.json"), "w", encoding="utf-8") as f:
        json.dump(entries, f, indent=1)
        f.write("\n")
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as f:
        json.dump({k: config[k] for k in CONFIG_KEYS}, f, indent=2, sort_keys=True)
        f.write("\n")
    return int(sum(np.prod(e["shape"]) for e in entries))


def write_corpus(path: str, ids: np.ndarray):
    ids = np.asarray(ids)
    if ids.size == 0:
        raise ValueError("refusing to write an empty corpus")
    if ids.min() < 0:
        raise ValueError("negative token id")
    with open(path, "wb") as f:
        f.write(CORPUS_MAGIC)
        f.write(ids.astype("<u4").tobytes())
