"""Walk a toy transformer through depth-2 structured pruning, step by step.

Scores feed-forward inner channels with the second-moment metric and
attention heads through the value path, solves a 25%-sparsity plan, applies
it, and audits the result. No files are written.
"""

import os
import sys

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import d2prune as d2
from _toy import build_toy


def main():
    graph = build_toy()
    print(f"dense toy model: {graph.param_count():,} parameters")

    rng = np.random.default_rng(1)
    calib = rng.integers(0, graph.config.vocab_size, size=(16, 48))
    print(f"calibration batch: {calib.shape[0]} sequences x {calib.shape[1]} tokens")

    # one streaming pass collects everything the metrics need
    stats = d2.collect_stats(graph, calib)
    sigma = stats.ffn_input_cov["blocks.0.ffn"]
    print(f"\nblock-0 FFN input second moment: dim {sigma.dim}, {sigma.n_rows} rows folded")

    ffn_scores = d2.second_moment_ffn(
        graph.blocks[0].ffn.wu, None, graph.blocks[0].ffn.wd,
        sigma, graph.config.activation, "blocks.0.ffn",
    )
    order = np.argsort(ffn_scores.scores)
    print(f"least important inner channels: {order[:8].tolist()}")
    print(f"most important inner channels:  {order[-8:].tolist()}")

    head_scores = d2.second_moment_attention(
        graph.blocks[0].attn, stats.attn_head_cov["blocks.0.attn"], "blocks.0.attn"
    )
    print(f"block-0 head scores: {np.round(head_scores.scores, 2).tolist()}")

    target = d2.SparsityTarget(0.25)
    pruned, manifest = d2.run_pipeline(graph, target, mode=d2.PRUNE_ONLY, batches=calib)
    sp = manifest["sparsity"]
    print(f"\nplanned removal: {sp['removed_params']:,} of {sp['prunable_params']:,} "
          f"prunable weights ({100 * sp['prunable_ratio']:.2f}%)")
    for mid, entry in sp["modules"].items():
        print(f"  {mid}: {entry['removed_units']}/{entry['units']} units removed")

    held_out = rng.integers(0, graph.config.vocab_size, size=(4, 48))
    dense_logits, _ = d2.forward(graph, held_out)
    pruned_logits, _ = d2.forward(pruned, held_out)
    err = np.linalg.norm(pruned_logits - dense_logits) / np.linalg.norm(dense_logits)
    print(f"\nheld-out relative logit error after pruning: {err:.3f}")
    print("every level-1 output width still matches its level-2 input width:")
    for bi, blk in enumerate(pruned.blocks):
        print(f"  block {bi}: attn {blk.attn.wq.shape[1]} -> {blk.attn.wo.shape[0]}, "
              f"ffn {blk.ffn.wu.shape[1]} -> {blk.ffn.wd.shape[0]}")


if __name__ == "__main__":
    main()
