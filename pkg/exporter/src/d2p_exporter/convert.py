"""GPT-2/LLaMA-family checkpoint conversion.

Weights land in the rows-are-inputs orientation (y = x @ W + b) as f32:
GPT-2's Conv1D already stores [in, out] and only needs its fused QKV split;
LLaMA's nn.Linear stores [out, in] and is transposed. A fixtures.json with
reference logits for a fixed 64-token prompt and a greedy 8-token
continuation is written alongside for cross-validation by the consumer.
"""

from __future__ import annotations

import json
import os

import numpy as np
import torch

from .interchange import write_model_dir

FIXTURE_PROMPT_LEN = 64
FIXTURE_CONTINUATION = 8
ROPE_BASE = 10000.0


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().to(torch.float32).cpu().numpy()


def _convert_gpt2(model) -> tuple[dict, dict[str, np.ndarray]]:
    hf = model.config
    d = hf.n_embd
    d_ff = hf.n_inner if hf.n_inner is not None else 4 * d
    config = {
        "flavor": "gpt2", "n_layers": hf.n_layer, "d_model": d,
        "n_heads": hf.n_head, "d_head": d // hf.n_head, "d_ff": d_ff,
        "vocab_size": hf.vocab_size, "max_seq_len": hf.n_positions,
        "ffn_kind": "standard", "activation": "gelu", "norm_kind": "layernorm",
        "positional": "learned", "tied_embeddings": True,
        "norm_eps": hf.layer_norm_epsilon,
    }
    sd = model.transformer
    tensors = {
        "tok_emb": _np(sd.wte.weight),
        "pos_emb": _np(sd.wpe.weight),
        "final_norm.g": _np(sd.ln_f.weight),
        "final_norm.b": _np(sd.ln_f.bias),
    }
    for i, block in enumerate(sd.h):
        p = f"blocks.{i}"
        w = _np(block.attn.c_attn.weight)  # Conv1D: [d, 3d], already x @ W
        b = _np(block.attn.c_attn.bias)
        tensors[f"{p}.attn.wq"], tensors[f"{p}.attn.wk"], tensors[f"{p}.attn.wv"] = (
            w[:, :d], w[:, d : 2 * d], w[:, 2 * d :]
        )
        tensors[f"{p}.attn.bq"], tensors[f"{p}.attn.bk"], tensors[f"{p}.attn.bv"] = (
            b[:d], b[d : 2 * d], b[2 * d :]
        )
        tensors[f"{p}.attn.wo"] = _np(block.attn.c_proj.weight)
        tensors[f"{p}.attn.bo"] = _np(block.attn.c_proj.bias)
        tensors[f"{p}.ffn.wu"] = _np(block.mlp.c_fc.weight)
        tensors[f"{p}.ffn.bu"] = _np(block.mlp.c_fc.bias)
        tensors[f"{p}.ffn.wd"] = _np(block.mlp.c_proj.weight)
        tensors[f"{p}.ffn.bd"] = _np(block.mlp.c_proj.bias)
        tensors[f"{p}.norm1.g"] = _np(block.ln_1.weight)
        tensors[f"{p}.norm1.b"] = _np(block.ln_1.bias)
        tensors[f"{p}.norm2.g"] = _np(block.ln_2.weight)
        tensors[f"{p}.norm2.b"] = _np(block.ln_2.bias)
    return config, tensors


def _convert_llama(model) -> tuple[dict, dict[str, np.ndarray]]:
    hf = model.config
    heads = hf.num_attention_heads
    kv_heads = getattr(hf, "num_key_value_heads", heads) or heads
    if kv_heads != heads:
        raise ValueError(f"grouped-query attention unsupported ({kv_heads} kv heads != {heads})")
    theta = getattr(hf, "rope_theta", ROPE_BASE) or ROPE_BASE
    if abs(theta - ROPE_BASE) > 1e-6:
        raise ValueError(f"rope_theta {theta} unsupported (consumer assumes {ROPE_BASE})")
    if getattr(hf, "attention_bias", False):
        raise ValueError("attention biases unsupported for llama flavor")
    tied = bool(getattr(hf, "tie_word_embeddings", False))
    config = {
        "flavor": "llama", "n_layers": hf.num_hidden_layers, "d_model": hf.hidden_size,
        "n_heads": heads, "d_head": hf.hidden_size // heads, "d_ff": hf.intermediate_size,
        "vocab_size": hf.vocab_size, "max_seq_len": hf.max_position_embeddings,
        "ffn_kind": "gated", "activation": "silu", "norm_kind": "rmsnorm",
        "positional": "rope", "tied_embeddings": tied, "norm_eps": hf.rms_norm_eps,
    }
    base = model.model
    tensors = {
        "tok_emb": _np(base.embed_tokens.weight),
        "final_norm.g": _np(base.norm.weight),
    }
    if not tied:
        tensors["lm_head"] = _np(model.lm_head.weight).T.copy()
    for i, layer in enumerate(base.layers):
        p = f"blocks.{i}"
        tensors[f"{p}.attn.wq"] = _np(layer.self_attn.q_proj.weight).T.copy()
        tensors[f"{p}.attn.wk"] = _np(layer.self_attn.k_proj.weight).T.copy()
        tensors[f"{p}.attn.wv"] = _np(layer.self_attn.v_proj.weight).T.copy()
        tensors[f"{p}.attn.wo"] = _np(layer.self_attn.o_proj.weight).T.copy()
        tensors[f"{p}.ffn.wu"] = _np(layer.mlp.up_proj.weight).T.copy()
        tensors[f"{p}.ffn.wg"] = _np(layer.mlp.gate_proj.weight).T.copy()
        tensors[f"{p}.ffn.wd"] = _np(layer.mlp.down_proj.weight).T.copy()
        tensors[f"{p}.norm1.g"] = _np(layer.input_layernorm.weight)
        tensors[f"{p}.norm2.g"] = _np(layer.post_attention_layernorm.weight)
    return config, tensors


def load_source_model(src: str):
    from transformers import AutoConfig, AutoModelForCausalLM

    hf_config = AutoConfig.from_pretrained(src)
    if hf_config.model_type not in ("gpt2", "llama"):
        raise ValueError(f"unsupported architecture {hf_config.model_type!r} "
                         "(GPT-2-family or LLaMA-family required)")
    model = AutoModelForCausalLM.from_pretrained(src, torch_dtype=torch.float32)
    model.eval()
    return model


THE_TOKEN_ID = 464  # GPT-2 byte-level BPE id for "The"


def _greedy(model, prompt: list[int], n_new: int) -> list[int]:
    ctx = torch.tensor([prompt], dtype=torch.long)
    out = []
    with torch.no_grad():
        for _ in range(n_new):
            step = model(ctx).logits[0, -1]
            nxt = int(torch.argmax(step))
            out.append(nxt)
            ctx = torch.cat([ctx, torch.tensor([[nxt]])], dim=1)
    return out


def reference_fixtures(model, vocab_size: int, max_seq_len: int) -> dict:
    rng = np.random.default_rng(0)
    prompt_len = min(FIXTURE_PROMPT_LEN, max_seq_len - FIXTURE_CONTINUATION)
    prompt = rng.integers(0, vocab_size, size=prompt_len).tolist()
    with torch.no_grad():
        logits = model(torch.tensor([prompt], dtype=torch.long)).logits[0, -1].to(torch.float64)
    fixtures = {
        "schema": "d2p/1",
        "prompt_ids": prompt,
        "last_logits": [float(v) for v in logits],
        "next_token_argmax": int(torch.argmax(logits)),
        "greedy_continuation": _greedy(model, prompt, FIXTURE_CONTINUATION),
    }
    if vocab_size > THE_TOKEN_ID:
        fixtures["the_prompt"] = {
            "prompt_ids": [THE_TOKEN_ID],
            "greedy_continuation": _greedy(model, [THE_TOKEN_ID], FIXTURE_CONTINUATION),
        }
    return fixtures


def export_model(src: str, out_dir: str) -> dict:
    """Convert a GPT-2/LLaMA-family checkpoint; returns a summary dict."""
    model = load_source_model(src)
    if model.config.model_type == "gpt2":
        config, tensors = _convert_gpt2(model)
    else:
        config, tensors = _convert_llama(model)
    param_count = write_model_dir(out_dir, config, tensors)
    fixtures = reference_fixtures(model, config["vocab_size"], config["max_seq_len"])
    fixtures["param_count"] = param_count
    fixtures["source"] = str(src)
    with open(os.path.join(out_dir, "fixtures.json"), "w", encoding="utf-8") as f:
        json.dump(fixtures, f)
        f.write("\n")
    return {"flavor": config["flavor"], "param_count": param_count, "out": out_dir}
