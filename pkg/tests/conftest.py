import numpy as np
import pytest

from d2prune.checkpoint import ModelConfig, expected_tensor_shapes


def toy_config(n_layers=2, d_model=64, n_heads=4, d_ff=256, vocab=97,
               max_seq_len=64, flavor="gpt2", tied=True):
    if flavor == "gpt2":
        return ModelConfig(
            flavor="gpt2", n_layers=n_layers, d_model=d_model, n_heads=n_heads,
            d_head=d_model // n_heads, d_ff=d_ff, vocab_size=vocab,
            max_seq_len=max_seq_len, ffn_kind="standard", activation="gelu",
            norm_kind="layernorm", positional="learned", tied_embeddings=tied,
            norm_eps=1e-5,
        )
    return ModelConfig(
        flavor="llama", n_layers=n_layers, d_model=d_model, n_heads=n_heads,
        d_head=d_model // n_heads, d_ff=d_ff, vocab_size=vocab,
        max_seq_len=max_seq_len, ffn_kind="gated", activation="silu",
        norm_kind="rmsnorm", positional="rope", tied_embeddings=False,
        norm_eps=1e-6,
    )


def toy_tensors(config, seed=0, scale=0.25, with_biases=True):
    rng = np.random.default_rng(seed)
    required, optional = expected_tensor_shapes(config)
    names = dict(required)
    if with_biases:
        names.update(optional)
    tensors = {}
    for name, shape in names.items():
        last = name.split(".")[-1]
        if last == "g":
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif last.startswith("b"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        elif name == "pos_emb":
            tensors[name] = (0.05 * rng.standard_normal(shape)).astype(np.float32)
        else:
            tensors[name] = (scale * rng.standard_normal(shape)).astype(np.float32)
    return tensors


def toy_graph(seed=0, **cfg_kwargs):
    from d2prune.model import graph_from_tensors

    config = toy_config(**cfg_kwargs)
    return graph_from_tensors(config, toy_tensors(config, seed=seed))


def token_batch(config, n, s, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, config.vocab_size, size=(n, s))


@pytest.fixture
def graph2():
    """The standard acceptance toy: 2 blocks, d_model 64, h 4, d_ff 256."""
    return toy_graph(seed=0)


@pytest.fixture
def checkpoint_dir(tmp_path, graph2):
    from d2prune.model import save_graph

    path = tmp_path / "toy_model"
    save_graph(str(path), graph2)
    return str(path)


def random_causal_probs(rng, h, s, peaked=False):
    """[h, s, s] row-stochastic matrices with strict causal support."""
    raw = rng.uniform(0.05, 1.0, size=(h, s, s))
    if peaked:
        raw = raw ** 8
    mask = np.tril(np.ones((s, s)))
    raw = raw * mask
    return (raw / raw.sum(axis=-1, keepdims=True)).astype(np.float64)
