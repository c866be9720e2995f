import math

import numpy as np
import pytest

from conftest import toy_config, toy_graph, toy_tensors, token_batch
from d2prune.errors import PlanError
from d2prune.model import (
    Greedy,
    TapRequest,
    TopK,
    apply_plan,
    apply_rope,
    forward,
    generate,
    graph_from_tensors,
    graph_to_tensors,
    rope_tables,
)
from d2prune.pruner import ModulePlan, PruningPlan


# ---------------------------------------------------------------------------
# scalar reference: 1 block, d_model 4, 1 head, s = 2, gpt2 flavor, pure python
# ---------------------------------------------------------------------------

def _ln(row, gain, bias, eps):
    mu = sum(row) / len(row)
    var = sum((v - mu) ** 2 for v in row) / len(row)
    return [(v - mu) / math.sqrt(var + eps) * g + b for v, g, b in zip(row, gain, bias)]


def _mv(row, w):  # row @ w for nested-list w
    return [sum(row[i] * w[i][j] for i in range(len(row))) for j in range(len(w[0]))]


def _gelu(v):
    return 0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v**3)))


def scalar_trace(weights, tokens, eps=1e-5):
    d = 4
    xs = [
        [weights["tok_emb"][t][i] + weights["pos_emb"][p][i] for i in range(d)]
        for p, t in enumerate(tokens)
    ]
    h = [_ln(x, weights["g1"], weights["b1"], eps) for x in xs]
    qs = [_mv(row, weights["wq"]) for row in h]
    ks = [_mv(row, weights["wk"]) for row in h]
    vs = [_mv(row, weights["wv"]) for row in h]
    scale = 1 / math.sqrt(d)  # one head of width d_model
    ctx = []
    for t in range(len(tokens)):
        scores = [scale * sum(qs[t][i] * ks[u][i] for i in range(d)) for u in range(t + 1)]
        m = max(scores)
        es = [math.exp(s - m) for s in scores]
        z = sum(es)
        probs = [e / z for e in es]
        ctx.append([sum(probs[u] * vs[u][i] for u in range(t + 1)) for i in range(d)])
    xs = [[x[i] + _mv(c, weights["wo"])[i] for i in range(d)] for x, c in zip(xs, ctx)]
    h2 = [_ln(x, weights["g2"], weights["b2"], eps) for x in xs]
    for t in range(len(tokens)):
        u = [_gelu(v) for v in _mv(h2[t], weights["wu"])]
        dd = _mv(u, weights["wd"])
        xs[t] = [xs[t][i] + dd[i] for i in range(d)]
    fin = [_ln(x, weights["gf"], weights["bf"], eps) for x in xs]
    return [
        [sum(row[i] * weights["tok_emb"][v][i] for i in range(d))
         for v in range(len(weights["tok_emb"]))]
        for row in fin
    ]


def test_forward_matches_scalar_hand_trace():
    rng = np.random.default_rng(42)
    d, dff, vocab = 4, 6, 5
    w = {
        "tok_emb": rng.standard_normal((vocab, d)).round(3).tolist(),
        "pos_emb": rng.standard_normal((8, d)).round(3).tolist(),
        "wq": rng.standard_normal((d, d)).round(3).tolist(),
        "wk": rng.standard_normal((d, d)).round(3).tolist(),
        "wv": rng.standard_normal((d, d)).round(3).tolist(),
        "wo": rng.standard_normal((d, d)).round(3).tolist(),
        "wu": rng.standard_normal((d, dff)).round(3).tolist(),
        "wd": rng.standard_normal((dff, d)).round(3).tolist(),
        "g1": [1.0] * d, "b1": [0.0] * d,
        "g2": [1.0] * d, "b2": [0.0] * d,
        "gf": [1.0] * d, "bf": [0.0] * d,
    }
    cfg = toy_config(n_layers=1, d_model=d, n_heads=1, d_ff=dff, vocab=vocab, max_seq_len=8)
    tensors = {
        "tok_emb": np.array(w["tok_emb"], np.float32),
        "pos_emb": np.array(w["pos_emb"], np.float32),
        "blocks.0.attn.wq": np.array(w["wq"], np.float32),
        "blocks.0.attn.wk": np.array(w["wk"], np.float32),
        "blocks.0.attn.wv": np.array(w["wv"], np.float32),
        "blocks.0.attn.wo": np.array(w["wo"], np.float32),
        "blocks.0.ffn.wu": np.array(w["wu"], np.float32),
        "blocks.0.ffn.wd": np.array(w["wd"], np.float32),
        "blocks.0.norm1.g": np.ones(d, np.float32), "blocks.0.norm1.b": np.zeros(d, np.float32),
        "blocks.0.norm2.g": np.ones(d, np.float32), "blocks.0.norm2.b": np.zeros(d, np.float32),
        "final_norm.g": np.ones(d, np.float32), "final_norm.b": np.zeros(d, np.float32),
    }
    graph = graph_from_tensors(cfg, tensors)
    tokens = [3, 1]
    logits, _ = forward(graph, np.array(tokens)[None, :])
    want = scalar_trace(w, tokens)
    assert np.abs(logits[0] - np.array(want)).max() < 1e-5


class TestForward:
    def test_zero_qk_gives_uniform_attention(self):
        cfg = toy_config(n_layers=1)
        tensors = toy_tensors(cfg, seed=1)
        tensors["blocks.0.attn.wq"] = np.zeros_like(tensors["blocks.0.attn.wq"])
        tensors["blocks.0.attn.wk"] = np.zeros_like(tensors["blocks.0.attn.wk"])
        graph = graph_from_tensors(cfg, tensors)
        tokens = token_batch(cfg, 1, 6, seed=2)
        _, taps = forward(graph, tokens, TapRequest(attn_probs=True))
        probs = taps.blocks[0].attn_probs[0]
        for t in range(6):
            row = probs[:, t, : t + 1]
            assert np.allclose(row, 1.0 / (t + 1), atol=1e-6)
            assert np.allclose(probs[:, t, t + 1 :], 0.0)

    def test_attention_rows_sum_to_one(self, graph2):
        tokens = token_batch(graph2.config, 2, 16, seed=3)
        _, taps = forward(graph2, tokens, TapRequest(attn_probs=True))
        for bt in taps.blocks.values():
            sums = bt.attn_probs.sum(axis=-1)
            assert np.abs(sums - 1.0).max() < 1e-5

    def test_causal_property(self, graph2):
        tokens = token_batch(graph2.config, 1, 12, seed=4)
        logits, _ = forward(graph2, tokens)
        perturbed = tokens.copy()
        perturbed[0, -3:] = (perturbed[0, -3:] + 1) % graph2.config.vocab_size
        logits2, _ = forward(graph2, perturbed)
        t = 12 - 3 - 1
        assert np.array_equal(logits[0, : t + 1], logits2[0, : t + 1])

    def test_token_out_of_range(self, graph2):
        with pytest.raises(ValueError, match="out of range"):
            forward(graph2, np.array([[0, graph2.config.vocab_size]]))

    def test_too_long_sequence(self, graph2):
        tokens = np.zeros((1, graph2.config.max_seq_len + 1), np.int64)
        with pytest.raises(ValueError, match="max_seq_len"):
            forward(graph2, tokens)

    def test_taps_flattened_to_rows(self, graph2):
        n, s = 3, 8
        tokens = token_batch(graph2.config, n, s, seed=5)
        _, taps = forward(
            graph2, tokens,
            TapRequest(module_inputs=True, level1_outputs=True,
                       level2_inputs=True, level2_outputs=True,
                       head_value_inputs=True),
        )
        bt = taps.blocks[0]
        for tap in (bt.attn_input, bt.y_q, bt.attn_concat, bt.y_o, bt.ffn_input, bt.y_d):
            assert tap.shape[0] == n * s
        assert len(bt.head_value_inputs) == graph2.blocks[0].attn.n_heads
        assert bt.head_value_inputs[0].shape == (n * s, graph2.config.d_model)

    def test_llama_flavor_forward(self):
        graph = toy_graph(seed=6, flavor="llama")
        tokens = token_batch(graph.config, 2, 10, seed=7)
        logits, taps = forward(graph, tokens, TapRequest(attn_probs=True))
        assert np.isfinite(logits).all()
        assert np.abs(taps.blocks[0].attn_probs.sum(axis=-1) - 1.0).max() < 1e-5


class TestRope:
    def test_position_zero_is_identity(self):
        cos, sin = rope_tables(np.array([0]), 8)
        x = np.random.default_rng(0).standard_normal((1, 1, 8)).astype(np.float32)
        assert np.allclose(apply_rope(x, cos, sin), x, atol=1e-7)

    def test_rotation_preserves_norm(self):
        cos, sin = rope_tables(np.arange(5), 8)
        x = np.random.default_rng(1).standard_normal((2, 5, 8)).astype(np.float32)
        y = apply_rope(x, cos, sin)
        assert np.allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), atol=1e-5)


class TestGenerate:
    def test_fixed_point_token(self):
        cfg = toy_config(n_layers=1, d_model=2, n_heads=1, d_ff=2, vocab=3,
                         max_seq_len=16, tied=False)
        d = 2
        tensors = {
            "tok_emb": np.array([[0.5, 0.5], [-1, 1], [1, -1]], np.float32),
            "pos_emb": np.zeros((16, d), np.float32),
            "blocks.0.attn.wq": np.zeros((d, d), np.float32),
            "blocks.0.attn.wk": np.zeros((d, d), np.float32),
            "blocks.0.attn.wv": np.zeros((d, d), np.float32),
            "blocks.0.attn.wo": np.zeros((d, d), np.float32),
            "blocks.0.ffn.wu": np.zeros((d, 2), np.float32),
            "blocks.0.ffn.wd": np.zeros((2, d), np.float32),
            "blocks.0.norm1.g": np.ones(d, np.float32), "blocks.0.norm1.b": np.zeros(d, np.float32),
            "blocks.0.norm2.g": np.ones(d, np.float32), "blocks.0.norm2.b": np.zeros(d, np.float32),
            "final_norm.g": np.ones(d, np.float32), "final_norm.b": np.zeros(d, np.float32),
            "lm_head": np.array([[0, 0, 10.0], [0, 0, 0]], np.float32),
        }
        graph = graph_from_tensors(cfg, tensors)
        out = generate(graph, [2], 5, Greedy())
        assert out.tolist() == [2, 2, 2, 2, 2, 2]

    def test_same_seed_identical(self, graph2):
        a = generate(graph2, [1, 2], 12, TopK(k=10, temperature=1.0, seed=9))
        b = generate(graph2, [1, 2], 12, TopK(k=10, temperature=1.0, seed=9))
        assert np.array_equal(a, b)

    def test_greedy_matches_full_forward(self, graph2):
        out = generate(graph2, [5, 7, 11], 4, Greedy())
        ctx = [5, 7, 11]
        for _ in range(4):
            logits, _ = forward(graph2, np.array(ctx)[None])
            ctx.append(int(np.argmax(logits[0, -1])))
        assert out.tolist() == ctx

    def test_empty_prompt_rejected(self, graph2):
        with pytest.raises(ValueError, match="nonempty"):
            generate(graph2, [], 3)


class TestApplyPlan:
    def test_keep_all_bit_exact(self, graph2):
        plan = PruningPlan({
            "blocks.0.ffn": ModulePlan("inner_channel", kept=list(range(256)), removed=[]),
            "blocks.0.attn": ModulePlan("head", kept=[0, 1, 2, 3], removed=[]),
        })
        pruned = apply_plan(graph2, plan)
        before = graph_to_tensors(graph2)
        after = graph_to_tensors(pruned)
        assert set(before) == set(after)
        for name in before:
            assert np.array_equal(before[name], after[name]), name

    def test_zero_wd_rows_pruning_is_lossless(self):
        cfg = toy_config()
        tensors = toy_tensors(cfg, seed=8)
        dead = list(range(0, 256, 4))
        tensors["blocks.0.ffn.wd"][dead, :] = 0.0
        graph = graph_from_tensors(cfg, tensors)
        plan = PruningPlan({
            "blocks.0.ffn": ModulePlan(
                "inner_channel",
                kept=sorted(set(range(256)) - set(dead)),
                removed=dead,
            )
        })
        pruned = apply_plan(graph, plan)
        tokens = token_batch(cfg, 2, 20, seed=9)
        dense_logits, _ = forward(graph, tokens)
        pruned_logits, _ = forward(pruned, tokens)
        assert np.abs(dense_logits - pruned_logits).max() <= 1e-5

    def test_duplicate_head_compensation(self):
        cfg = toy_config(n_layers=1)
        tensors = toy_tensors(cfg, seed=10)
        dh = cfg.d_head
        c2, c3 = slice(2 * dh, 3 * dh), slice(3 * dh, 4 * dh)
        for name in ("wq", "wk", "wv"):
            tensors[f"blocks.0.attn.{name}"][:, c3] = tensors[f"blocks.0.attn.{name}"][:, c2]
        for name in ("bq", "bk", "bv"):
            tensors[f"blocks.0.attn.{name}"][c3] = tensors[f"blocks.0.attn.{name}"][c2]
        tensors["blocks.0.attn.wo"][c3, :] = tensors["blocks.0.attn.wo"][c2, :]
        graph = graph_from_tensors(cfg, tensors)
        plan = PruningPlan({"blocks.0.attn": ModulePlan("head", kept=[0, 1, 2], removed=[3])})
        pruned = apply_plan(graph, plan)
        pruned.blocks[0].attn.wo[c2, :] *= 2.0
        tokens = token_batch(cfg, 2, 16, seed=11)
        dense_logits, _ = forward(graph, tokens)
        compensated, _ = forward(pruned, tokens)
        assert np.abs(dense_logits - compensated).max() < 1e-5

    def test_level_coupling_and_residual_width(self, graph2):
        plan = PruningPlan({
            "blocks.0.attn": ModulePlan("head", kept=[1, 3], removed=[0, 2]),
            "blocks.1.ffn": ModulePlan("inner_channel",
                                       kept=list(range(100)), removed=list(range(100, 256))),
        })
        pruned = apply_plan(graph2, plan)
        for blk in pruned.blocks:
            assert blk.attn.wq.shape[1] == blk.attn.wo.shape[0]
            assert blk.ffn.wu.shape[1] == blk.ffn.wd.shape[0]
            assert blk.attn.wo.shape[1] == graph2.config.d_model
            assert blk.ffn.wd.shape[1] == graph2.config.d_model
        assert pruned.tok_emb.shape == graph2.tok_emb.shape
        tokens = token_batch(graph2.config, 1, 8, seed=12)
        logits, _ = forward(pruned, tokens)
        assert logits.shape == (1, 8, graph2.config.vocab_size)

    def test_duplicate_index_rejected(self, graph2):
        plan = PruningPlan({"blocks.0.attn": ModulePlan("head", kept=[0, 1, 1], removed=[2, 3])})
        with pytest.raises(PlanError, match="duplicate"):
            apply_plan(graph2, plan)

    def test_out_of_range_rejected(self, graph2):
        plan = PruningPlan({"blocks.0.attn": ModulePlan("head", kept=[0, 1, 2, 7], removed=[3])})
        with pytest.raises(PlanError, match="out of range"):
            apply_plan(graph2, plan)

    def test_head_granularity_violation(self, graph2):
        plan = PruningPlan({
            "blocks.0.attn": ModulePlan("inner_channel", kept=list(range(60)),
                                        removed=list(range(60, 64)))
        })
        with pytest.raises(PlanError, match="granularity"):
            apply_plan(graph2, plan)

    def test_empty_module_rejected(self, graph2):
        plan = PruningPlan({"blocks.0.attn": ModulePlan("head", kept=[], removed=[0, 1, 2, 3])})
        with pytest.raises(PlanError, match="keeps no units"):
            apply_plan(graph2, plan)
