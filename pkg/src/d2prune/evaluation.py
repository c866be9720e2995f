"""Perplexity evaluation and model inspection reports."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import TokenCorpus
from .model import ModelGraph, TapRequest, forward, graph_to_tensors

LOGSUMEXP_SLAB = 256


@dataclass
class PerplexityReport:
    corpus_id: str
    n_tokens_scored: int
    chunk_len: int
    mean_nll: float  # nats per predicted token
    perplexity: float

    def to_json_dict(self) -> dict:
        return {
            "schema": "d2p/1",
            "corpus": self.corpus_id,
            "n_tokens_scored": self.n_tokens_scored,
            "chunk_len": self.chunk_len,
            "mean_nll": self.mean_nll,
            "perplexity": self.perplexity,
            "chunking": "non-overlapping",
        }


def _chunk_nll(graph: ModelGraph, ids: np.ndarray) -> tuple[float, int]:
    """(total NLL in nats, predicted token count) for one chunk."""
    logits, _ = forward(graph, ids[None, :])
    logits = logits[0]
    preds = logits[:-1].astype(np.float64)
    targets = ids[1:]
    total = 0.0
    for lo in range(0, preds.shape[0], LOGSUMEXP_SLAB):
        rows = preds[lo : lo + LOGSUMEXP_SLAB]
        t = targets[lo : lo + LOGSUMEXP_SLAB]
        m = rows.max(axis=1)
        lse = m + np.log(np.exp(rows - m[:, None]).sum(axis=1))
        total += float((lse - rows[np.arange(len(t)), t]).sum())
    return total, preds.shape[0]


def perplexity(graph: ModelGraph, corpus: TokenCorpus | np.ndarray, chunk_len: int,
               corpus_id: str = "corpus") -> PerplexityReport:
    """Next-token perplexity over non-overlapping chunks of chunk_len tokens.

    The final partial chunk is kept when it still has at least 2 tokens.
    """
    ids = corpus.token_ids if isinstance(corpus, TokenCorpus) else np.asarray(corpus)
    ids = ids.astype(np.int64)
    if ids.size < 2:
        raise ValueError(f"corpus too short to score: {ids.size} tokens")
    if chunk_len < 2:
        raise ValueError("chunk_len must be >= 2")
    if chunk_len > graph.config.max_seq_len:
        raise ValueError(
            f"chunk_len {chunk_len} > max_seq_len {graph.config.max_seq_len}"
        )
    total_nll = 0.0
    total_tokens = 0
    for lo in range(0, ids.size, chunk_len):
        chunk = ids[lo : lo + chunk_len]
        if chunk.size < 2:
            break
        nll, n = _chunk_nll(graph, chunk)
        total_nll += nll
        total_tokens += n
    mean_nll = total_nll / total_tokens
    return PerplexityReport(
        corpus_id=corpus_id,
        n_tokens_scored=total_tokens,
        chunk_len=chunk_len,
        mean_nll=mean_nll,
        perplexity=float(np.exp(mean_nll)),
    )


def inspect(graph: ModelGraph, batches: np.ndarray | None = None) -> dict:
    """Parameter counts, applied-plan summary, and optional per-block
    mean |activation| of the residual stream over a token batch."""
    tensors = graph_to_tensors(graph)
    per_module: dict[str, int] = {}
    other = 0
    for name, arr in tensors.items():
        if name.startswith("blocks."):
            parts = name.split(".")
            mid = ".".join(parts[:3]) if parts[2] in ("attn", "ffn") else ".".join(parts[:2])
            per_module[mid] = per_module.get(mid, 0) + arr.size
        else:
            other += arr.size
    report: dict = {
        "schema": "d2p/1",
        "total_params": int(sum(a.size for a in tensors.values())),
        "module_params": {k: int(v) for k, v in sorted(per_module.items())},
        "non_block_params": int(other),
    }
    if graph.applied_plan is None:
        report["plan"] = "no plan applied"
    else:
        report["plan"] = {
            mid: {"kept": len(mp.kept), "removed": len(mp.removed), "granularity": mp.granularity}
            for mid, mp in sorted(graph.applied_plan.modules.items())
        }
    if batches is not None:
        batches = np.asarray(batches)
        if batches.ndim == 1:
            batches = batches[None]
        sums = {}
        counts = {}

        def observer(bi, bt):
            sums[bi] = sums.get(bi, 0.0) + float(np.abs(bt.resid_input).sum())
            counts[bi] = counts.get(bi, 0) + bt.resid_input.size

        req = TapRequest(resid_inputs=True, block_observer=observer)
        for si in range(batches.shape[0]):
            forward(graph, batches[si : si + 1], req)
        report["mean_abs_activation"] = {
            f"blocks.{bi}": sums[bi] / counts[bi] for bi in sorted(sums)
        }
    return report
