import json
import os

import pytest
import torch


@pytest.fixture(scope="session")
def tiny_gpt2_src(tmp_path_factory):
    from transformers import GPT2Config, GPT2LMHeadModel

    torch.manual_seed(0)
    cfg = GPT2Config(n_layer=2, n_head=2, n_embd=32, vocab_size=128, n_positions=128)
    model = GPT2LMHeadModel(cfg)
    model.eval()
    path = tmp_path_factory.mktemp("tiny_gpt2_src")
    model.save_pretrained(str(path))
    return str(path)


@pytest.fixture(scope="session")
def tiny_llama_src(tmp_path_factory):
    from transformers import LlamaConfig, LlamaForCausalLM

    torch.manual_seed(1)
    cfg = LlamaConfig(
        hidden_size=32, num_attention_heads=2, num_key_value_heads=2,
        num_hidden_layers=2, intermediate_size=48, vocab_size=96,
        max_position_embeddings=128, tie_word_embeddings=False,
    )
    model = LlamaForCausalLM(cfg)
    model.eval()
    path = tmp_path_factory.mktemp("tiny_llama_src")
    model.save_pretrained(str(path))
    return str(path)


@pytest.fixture(scope="session")
def tiny_tokenizer_dir(tmp_path_factory):
    from tokenizers import ByteLevelBPETokenizer

    d = tmp_path_factory.mktemp("tiny_tok")
    sample = d / "sample.txt"
    sample.write_text("hello hello world this is a tiny training corpus for bpe " * 60)
    tok = ByteLevelBPETokenizer()
    tok.train([str(sample)], vocab_size=400, min_frequency=1)
    tok.save(str(d / "tokenizer.json"))
    (d / "tokenizer_config.json").write_text(
        json.dumps({"tokenizer_class": "PreTrainedTokenizerFast", "model_max_length": 1024})
    )
    os.remove(sample)
    return str(d)
