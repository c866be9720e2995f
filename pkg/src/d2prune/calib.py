"""Calibration batches: sampled corpus windows, or model self-generation.

Corpus mode draws windows at offsets aligned to the window length so a
recovery batch can be kept disjoint from the metric batch. Self-generation
mode samples continuations from the model itself, which is the data-free
path: a well-trained model's own text follows its training distribution.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import TokenCorpus, load_corpus, save_corpus
from .model import TopK, generate
from .seeding import derive_seed

DEFAULT_SELF_GEN_SAMPLER = TopK(k=40, temperature=1.0, seed=0)
CALIB_MANIFEST = "calib.json"
CALIB_TOKENS = "tokens.d2ptok"


@dataclass(frozen=True)
class CalibrationSpec:
    n_samples: int = 16
    seq_len: int = 1024
    seed: int = 0
    source: str = "corpus"  # "corpus" | "self_generation"
    prompt_ids: tuple[int, ...] | None = None  # self-generation prompt; default BOS
    sampler_k: int = 40
    sampler_temperature: float = 1.0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2")
        if self.source not in ("corpus", "self_generation"):
            raise ValueError(f"unknown calibration source {self.source!r}")


@dataclass
class CalibrationBatch:
    tokens: np.ndarray  # [N, s] int64
    spec: CalibrationSpec
    offsets: list[int] | None = None  # corpus mode only
    digest: str = field(default="")

    def __post_init__(self):
        if not self.digest:
            h = hashlib.sha256()
            h.update(json.dumps(_spec_dict(self.spec), sort_keys=True).encode())
            h.update(np.ascontiguousarray(self.tokens, dtype=np.int64).tobytes())
            self.digest = h.hexdigest()[:16]


def _spec_dict(spec: CalibrationSpec) -> dict:
    return {
        "n_samples": spec.n_samples,
        "seq_len": spec.seq_len,
        "seed": spec.seed,
        "source": spec.source,
        "prompt_ids": list(spec.prompt_ids) if spec.prompt_ids else None,
        "sampler_k": spec.sampler_k,
        "sampler_temperature": spec.sampler_temperature,
    }


def aligned_offsets(corpus_len: int, seq_len: int) -> np.ndarray:
    return np.arange(corpus_len // seq_len) * seq_len


def build_batches(
    spec: CalibrationSpec,
    corpus: TokenCorpus | None = None,
    graph=None,
    exclude_offsets: tuple[int, ...] = (),
) -> CalibrationBatch:
    """Token batch [n_samples, seq_len]; deterministic in the seed."""
    if spec.source == "corpus":
        if corpus is None:
            raise ValueError("corpus mode needs a corpus")
        if len(corpus) < spec.seq_len:
            raise ValueError(f"corpus too short: {len(corpus)} < seq_len {spec.seq_len}")
        candidates = [int(o) for o in aligned_offsets(len(corpus), spec.seq_len)
                      if int(o) not in set(exclude_offsets)]
        if not candidates:
            raise ValueError("no calibration windows left after exclusions")
        rng = np.random.default_rng(derive_seed(spec.seed, "calib-offsets"))
        replace = spec.n_samples > len(candidates)
        picked = rng.choice(len(candidates), size=spec.n_samples, replace=replace)
        offsets = [candidates[int(i)] for i in picked]
        tokens = np.stack(
            [corpus.token_ids[o : o + spec.seq_len].astype(np.int64) for o in offsets]
        )
        return CalibrationBatch(tokens, spec, offsets=offsets)

    if graph is None:
        raise ValueError("self-generation mode needs a model graph")
    prompt = spec.prompt_ids
    if prompt is None:
        # end-of-text convention: the final vocabulary id (GPT-2's 50256)
        prompt = (graph.config.vocab_size - 1,)
    rows = []
    for i in range(spec.n_samples):
        sampler = TopK(
            k=spec.sampler_k,
            temperature=spec.sampler_temperature,
            seed=derive_seed(spec.seed, f"self-gen-{i}"),
        )
        seq = generate(graph, np.array(prompt), spec.seq_len - len(prompt), sampler)
        rows.append(seq)
    return CalibrationBatch(np.stack(rows), spec, offsets=None)


def save_calibration(dir_path: str, batch: CalibrationBatch):
    os.makedirs(dir_path, exist_ok=True)
    save_corpus(
        os.path.join(dir_path, CALIB_TOKENS),
        TokenCorpus(batch.tokens.reshape(-1).astype(np.uint32)),
    )
    manifest = {
        "schema": "d2p/1",
        "spec": _spec_dict(batch.spec),
        "offsets": batch.offsets,
        "digest": batch.digest,
    }
    with open(os.path.join(dir_path, CALIB_MANIFEST), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_calibration(dir_path: str, vocab_size: int | None = None) -> CalibrationBatch:
    with open(os.path.join(dir_path, CALIB_MANIFEST), encoding="utf-8") as f:
        manifest = json.load(f)
    sd = manifest["spec"]
    spec = CalibrationSpec(
        n_samples=sd["n_samples"], seq_len=sd["seq_len"], seed=sd["seed"],
        source=sd["source"],
        prompt_ids=tuple(sd["prompt_ids"]) if sd.get("prompt_ids") else None,
        sampler_k=sd.get("sampler_k", 40),
        sampler_temperature=sd.get("sampler_temperature", 1.0),
    )
    corpus = load_corpus(os.path.join(dir_path, CALIB_TOKENS), vocab_size)
    tokens = corpus.token_ids.astype(np.int64).reshape(spec.n_samples, spec.seq_len)
    batch = CalibrationBatch(tokens, spec, offsets=manifest.get("offsets"), digest="")
    if batch.digest != manifest["digest"]:
        raise ValueError(f"{dir_path}: calibration digest mismatch")
    return batch
