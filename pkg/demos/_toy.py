"""Shared toy-model builder for the demo scripts."""

import numpy as np

import d2prune as d2
from d2prune.checkpoint import ModelConfig, expected_tensor_shapes


def build_toy(seed=0, weight_scale=0.25):
    config = ModelConfig(
        flavor="gpt2", n_layers=2, d_model=64, n_heads=4, d_head=16, d_ff=256,
        vocab_size=97, max_seq_len=64, ffn_kind="standard", activation="gelu",
        norm_kind="layernorm", positional="learned", tied_embeddings=True,
        norm_eps=1e-5,
    )
    rng = np.random.default_rng(seed)
    required, optional = expected_tensor_shapes(config)
    tensors = {}
    for name, shape in {**required, **optional}.items():
        last = name.split(".")[-1]
        if last == "g":
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif last.startswith("b"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            scale = 0.05 if name == "pos_emb" else weight_scale
            tensors[name] = (scale * rng.standard_normal(shape)).astype(np.float32)
    return d2.graph_from_tensors(config, tensors)
