"""Checkpoint, pruning-plan, and token-corpus interchange formats.

A model directory holds config.json, tensors.json (manifest), tensors.bin
(raw little-endian f32), and optionally plan.json when the checkpoint has
been pruned. Corpora are .d2ptok files: an 8-byte magic followed by
little-endian u32 token ids. All round trips are bit-exact.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict, field

import numpy as np

from .errors import CheckpointError
from .pruner import PruningPlan

CONFIG_FILE = "config.json"
MANIFEST_FILE = "tensors.json"
WEIGHTS_FILE = "tensors.bin"
PLAN_FILE = "plan.json"
CORPUS_MAGIC = b"D2PTOK01"

FLAVORS = ("gpt2", "llama")
FFN_KINDS = ("standard", "gated")
ACTIVATIONS = ("relu", "gelu", "silu")
NORM_KINDS = ("layernorm", "rmsnorm")
POSITIONALS = ("learned", "rope")


@dataclass
class ModelConfig:
    flavor: str
    n_layers: int
    d_model: int
    n_heads: int
    d_head: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    ffn_kind: str
    activation: str
    norm_kind: str
    positional: str
    tied_embeddings: bool
    norm_eps: float

    def validate(self):
        for name, value, allowed in (
            ("flavor", self.flavor, FLAVORS),
            ("ffn_kind", self.ffn_kind, FFN_KINDS),
            ("activation", self.activation, ACTIVATIONS),
            ("norm_kind", self.norm_kind, NORM_KINDS),
            ("positional", self.positional, POSITIONALS),
        ):
            if value not in allowed:
                raise CheckpointError(f"config {name}={value!r} not in {allowed}")
        for name in ("n_layers", "d_model", "n_heads", "d_head", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise CheckpointError(f"config {name} must be >= 1")
        if self.d_model != self.n_heads * self.d_head:
            raise CheckpointError(
                f"d_model ({self.d_model}) != n_heads*d_head ({self.n_heads}*{self.d_head})"
            )
        if self.flavor == "gpt2":
            if (self.ffn_kind, self.positional, self.norm_kind) != ("standard", "learned", "layernorm"):
                raise CheckpointError("gpt2 flavor requires standard FFN, learned positions, layernorm")
        if self.flavor == "llama":
            if (self.ffn_kind, self.positional, self.norm_kind) != ("gated", "rope", "rmsnorm"):
                raise CheckpointError("llama flavor requires gated FFN, rope positions, rmsnorm")
        if self.norm_eps <= 0:
            raise CheckpointError("norm_eps must be > 0")

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelConfig":
        expected = set(cls.__dataclass_fields__)
        got = set(d)
        if got != expected:
            missing, extra = sorted(expected - got), sorted(got - expected)
            raise CheckpointError(f"config.json keys mismatch: missing={missing} extra={extra}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class TensorManifestEntry:
    name: str
    dtype: str
    shape: list[int]
    byte_offset: int


@dataclass
class TokenCorpus:
    token_ids: np.ndarray  # uint32
    vocab_size: int | None = None

    def __post_init__(self):
        self.token_ids = np.ascontiguousarray(self.token_ids, dtype=np.uint32)
        if self.token_ids.ndim != 1 or self.token_ids.size == 0:
            raise CheckpointError("corpus must be a non-empty 1-d token sequence")
        if self.vocab_size is not None and int(self.token_ids.max()) >= self.vocab_size:
            raise CheckpointError(
                f"corpus contains id {int(self.token_ids.max())} >= vocab_size {self.vocab_size}"
            )

    def __len__(self):
        return int(self.token_ids.size)


def module_ids(config: ModelConfig) -> list[str]:
    """All depth-2 module ids in network order."""
    out = []
    for i in range(config.n_layers):
        out.append(f"blocks.{i}.attn")
        out.append(f"blocks.{i}.ffn")
    return out


def _kept_counts(config: ModelConfig, plan: PruningPlan | None, block: int) -> tuple[int, int]:
    """(kept heads, kept ffn channels) for one block under an optional plan."""
    heads, channels = config.n_heads, config.d_ff
    if plan is not None:
        attn = plan.modules.get(f"blocks.{block}.attn")
        ffn = plan.modules.get(f"blocks.{block}.ffn")
        if attn is not None:
            heads = len(attn.kept)
        if ffn is not None:
            channels = len(ffn.kept)
    return heads, channels


def expected_tensor_shapes(
    config: ModelConfig, plan: PruningPlan | None = None
) -> tuple[dict[str, tuple[int, ...]], dict[str, tuple[int, ...]]]:
    """(required, optional) tensor name -> shape maps for a checkpoint.

    Optional tensors are biases; they are shape-checked when present.
    """
    d, v = config.d_model, config.vocab_size
    required: dict[str, tuple[int, ...]] = {"tok_emb": (v, d)}
    optional: dict[str, tuple[int, ...]] = {}
    if config.positional == "learned":
        required["pos_emb"] = (config.max_seq_len, d)
    for i in range(config.n_layers):
        heads, channels = _kept_counts(config, plan, i)
        inner = heads * config.d_head
        p = f"blocks.{i}"
        required[f"{p}.attn.wq"] = (d, inner)
        required[f"{p}.attn.wk"] = (d, inner)
        required[f"{p}.attn.wv"] = (d, inner)
        required[f"{p}.attn.wo"] = (inner, d)
        optional[f"{p}.attn.bq"] = (inner,)
        optional[f"{p}.attn.bk"] = (inner,)
        optional[f"{p}.attn.bv"] = (inner,)
        optional[f"{p}.attn.bo"] = (d,)
        required[f"{p}.ffn.wu"] = (d, channels)
        if config.ffn_kind == "gated":
            required[f"{p}.ffn.wg"] = (d, channels)
            optional[f"{p}.ffn.bg"] = (channels,)
        required[f"{p}.ffn.wd"] = (channels, d)
        optional[f"{p}.ffn.bu"] = (channels,)
        optional[f"{p}.ffn.bd"] = (d,)
        for norm in ("norm1", "norm2"):
            required[f"{p}.{norm}.g"] = (d,)
            if config.norm_kind == "layernorm":
                required[f"{p}.{norm}.b"] = (d,)
    required["final_norm.g"] = (d,)
    if config.norm_kind == "layernorm":
        required["final_norm.b"] = (d,)
    if not config.tied_embeddings:
        required["lm_head"] = (d, v)
    return required, optional


def validate_tensor_map(config: ModelConfig, tensors: dict[str, np.ndarray], plan: PruningPlan | None = None):
    if not tensors:
        raise CheckpointError("empty tensor map")
    required, optional = expected_tensor_shapes(config, plan)
    missing = sorted(set(required) - set(tensors))
    if missing:
        raise CheckpointError(f"missing required tensors: {missing[:8]}")
    extra = sorted(set(tensors) - set(required) - set(optional))
    if extra:
        raise CheckpointError(f"unexpected tensors: {extra[:8]}")
    for name, arr in tensors.items():
        want = required.get(name) or optional.get(name)
        if tuple(arr.shape) != tuple(want):
            raise CheckpointError(f"tensor {name}: shape {tuple(arr.shape)} != expected {tuple(want)}")
        if any(s < 1 for s in arr.shape):
            raise CheckpointError(f"tensor {name}: zero-sized dimension in {tuple(arr.shape)}")


def count_params(tensors: dict[str, np.ndarray]) -> int:
    return int(sum(a.size for a in tensors.values()))


def save_model(
    dir_path: str,
    config: ModelConfig,
    tensors: dict[str, np.ndarray],
    plan: PruningPlan | None = None,
):
    """Write a checkpoint directory; load_model(save_model(x)) is bit-exact."""
    config.validate()
    validate_tensor_map(config, tensors, plan)
    os.makedirs(dir_path, exist_ok=True)
    entries = []
    offset = 0
    names = sorted(tensors)
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        entries.append(TensorManifestEntry(name, "f32", list(arr.shape), offset))
        offset += arr.nbytes
    with open(os.path.join(dir_path, WEIGHTS_FILE), "wb") as f:
        for name in names:
            f.write(np.ascontiguousarray(tensors[name], dtype=np.float32).tobytes())
    with open(os.path.join(dir_path, MANIFEST_FILE), "w", encoding="utf-8") as f:
        json.dump([asdict(e) for e in entries], f, indent=1)
        f.write("\n")
    with open(os.path.join(dir_path, CONFIG_FILE), "w", encoding="utf-8") as f:
        json.dump(config.to_json_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    if plan is not None:
        save_plan(os.path.join(dir_path, PLAN_FILE), plan)


def load_model(dir_path: str) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    """Read a checkpoint directory, materializing every manifest entry as f32."""
    cfg_path = os.path.join(dir_path, CONFIG_FILE)
    if not os.path.isfile(cfg_path):
        raise CheckpointError(f"{cfg_path} not found")
    with open(cfg_path, encoding="utf-8") as f:
        config = ModelConfig.from_json_dict(json.load(f))
    with open(os.path.join(dir_path, MANIFEST_FILE), encoding="utf-8") as f:
        raw_entries = json.load(f)
    blob = np.fromfile(os.path.join(dir_path, WEIGHTS_FILE), dtype=np.uint8)
    tensors: dict[str, np.ndarray] = {}
    prev_end = 0
    for raw in raw_entries:
        entry = TensorManifestEntry(**raw)
        if entry.dtype != "f32":
            raise CheckpointError(f"tensor {entry.name}: unsupported dtype {entry.dtype!r}")
        if entry.byte_offset % 4 != 0:
            raise CheckpointError(f"tensor {entry.name}: offset {entry.byte_offset} not 4-byte aligned")
        if entry.byte_offset < prev_end:
            raise CheckpointError(f"tensor {entry.name}: overlapping or unordered manifest region")
        if any(s < 1 for s in entry.shape):
            raise CheckpointError(f"tensor {entry.name}: invalid shape {entry.shape}")
        n = int(np.prod(entry.shape))
        end = entry.byte_offset + 4 * n
        if end > blob.size:
            raise CheckpointError(
                f"tensor {entry.name}: region [{entry.byte_offset}, {end}) exceeds "
                f"{WEIGHTS_FILE} size {blob.size}"
            )
        flat = blob[entry.byte_offset:end].view(np.dtype("<f4"))
        tensors[entry.name] = flat.reshape(entry.shape).astype(np.float32)
        prev_end = end
    plan = load_plan(dir_path)
    validate_tensor_map(config, tensors, plan)
    return config, tensors


def save_plan(path: str, plan: PruningPlan):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(plan.to_json_dict(), f, indent=1, sort_keys=True)
        f.write("\n")


def load_plan(dir_or_path: str) -> PruningPlan | None:
    path = dir_or_path
    if os.path.isdir(dir_or_path):
        path = os.path.join(dir_or_path, PLAN_FILE)
    if not os.path.isfile(path):
        return None
    with open(path, encoding="utf-8") as f:
        return PruningPlan.from_json_dict(json.load(f))


def save_corpus(path: str, corpus: TokenCorpus):
    with open(path, "wb") as f:
        f.write(CORPUS_MAGIC)
        f.write(corpus.token_ids.astype("<u4").tobytes())


def load_corpus(path: str, vocab_size: int | None = None) -> TokenCorpus:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CORPUS_MAGIC:
            raise CheckpointError(f"{path}: bad corpus magic {magic!r}")
        payload = f.read()
    if len(payload) == 0:
        raise CheckpointError(f"{path}: empty corpus")
    if len(payload) % 4 != 0:
        raise CheckpointError(f"{path}: truncated corpus payload ({len(payload)} bytes)")
    ids = np.frombuffer(payload, dtype="<u4").astype(np.uint32)
    return TokenCorpus(ids, vocab_size)
