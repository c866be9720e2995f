"""Measure what two-step weight reconstruction buys over pruning alone.

Prunes the toy model's feed-forward modules at 50% twice: once by slicing
channels out, once interleaving each module's removal with least-squares
reconstruction against the dense model's outputs. Compares held-out output
error and perplexity on a synthetic token stream.
"""

import os
import sys

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import d2prune as d2
from _toy import build_toy


def main():
    graph = build_toy(seed=5)
    rng = np.random.default_rng(6)
    calib = rng.integers(0, graph.config.vocab_size, size=(24, 48))
    held_out = rng.integers(0, graph.config.vocab_size, size=(4, 48))
    target = d2.SparsityTarget(0.5, kinds=("ffn",))
    print("target: remove 50% of feed-forward inner channels in both blocks\n")

    pruned, _ = d2.run_pipeline(graph, target, mode=d2.PRUNE_ONLY, batches=calib)
    recovered, manifest = d2.run_pipeline(
        graph, target, mode=d2.PRUNE_WITH_RECOVERY, batches=calib
    )

    for record in manifest["modules"]:
        line = ", ".join(
            f"{layer}: {res['residual_before']:.2e} -> {res['residual_after']:.2e}"
            for layer, res in record["layers"].items()
        )
        print(f"{record['module']} relative fit residuals  {line}")

    dense_logits, _ = d2.forward(graph, held_out)
    logits_prune = d2.forward(pruned, held_out)[0]
    logits_rec = d2.forward(recovered, held_out)[0]
    e_prune = np.linalg.norm(logits_prune - dense_logits)
    e_rec = np.linalg.norm(logits_rec - dense_logits)
    print(f"\nheld-out output error vs dense: prune-only {e_prune:.1f}, "
          f"with recovery {e_rec:.1f} ({100 * (1 - e_rec / e_prune):.0f}% lower)")

    # how often does the compressed model still predict the same next token?
    dense_argmax = dense_logits.argmax(-1)
    agree_prune = float((logits_prune.argmax(-1) == dense_argmax).mean())
    agree_rec = float((logits_rec.argmax(-1) == dense_argmax).mean())
    print(f"next-token agreement with dense: prune-only {100 * agree_prune:.0f}%, "
          f"with recovery {100 * agree_rec:.0f}%")


if __name__ == "__main__":
    main()
