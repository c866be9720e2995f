"""Transformer forward pass over a model graph, with activation taps.

A graph is an ordered list of depth-2 modules (attention: {wq,wk,wv} -> wo,
feed-forward: {wu[,wg]} -> wd) plus embeddings and norms. Taps expose the
quantities the importance metrics and weight recovery consume: module
inputs, per-head attention probabilities, per-head value inputs, level-1
outputs, level-2 inputs and outputs. Forward never mutates the graph.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .checkpoint import ModelConfig, module_ids, expected_tensor_shapes, count_params
from .errors import PlanError
from .pruner import PruningPlan

ROPE_BASE = 10000.0


@dataclass
class Norm:
    kind: str
    gain: np.ndarray
    bias: np.ndarray | None
    eps: float

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "layernorm":
            return linalg.layer_norm(x, self.gain, self.bias, self.eps)
        return linalg.rms_norm(x, self.gain, self.eps)


@dataclass
class Attention:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    bq: np.ndarray | None
    bk: np.ndarray | None
    bv: np.ndarray | None
    bo: np.ndarray | None
    n_heads: int
    d_head: int

    def head_cols(self, head: int) -> slice:
        return slice(head * self.d_head, (head + 1) * self.d_head)


@dataclass
class FeedForward:
    wu: np.ndarray
    wd: np.ndarray
    wg: np.ndarray | None
    bu: np.ndarray | None
    bg: np.ndarray | None
    bd: np.ndarray | None
    activation: str
    gated: bool

    def act(self, x: np.ndarray) -> np.ndarray:
        if self.activation == "relu":
            return linalg.relu(x)
        if self.activation == "gelu":
            return linalg.gelu(x)
        return linalg.silu(x)

    def post_process(self, y_u: np.ndarray, y_g: np.ndarray | None) -> np.ndarray:
        """Level-2 input from level-1 outputs."""
        if self.gated:
            return y_u * self.act(y_g)
        return self.act(y_u)


@dataclass
class Block:
    norm1: Norm
    attn: Attention
    norm2: Norm
    ffn: FeedForward


@dataclass
class ModelGraph:
    config: ModelConfig
    tok_emb: np.ndarray
    pos_emb: np.ndarray | None
    blocks: list[Block]
    final_norm: Norm
    lm_head: np.ndarray | None  # None when tied to tok_emb
    applied_plan: PruningPlan | None = None

    def head_weight(self) -> np.ndarray:
        return self.lm_head if self.lm_head is not None else self.tok_emb.T

    def param_count(self) -> int:
        return count_params(graph_to_tensors(self))

    def module_ids(self) -> list[str]:
        return module_ids(self.config)


@dataclass
class TapRequest:
    blocks: frozenset[int] | None = None  # None = every block
    resid_inputs: bool = False
    module_inputs: bool = False
    attn_probs: bool = False
    head_value_inputs: bool = False
    level1_outputs: bool = False
    level2_inputs: bool = False
    level2_outputs: bool = False
    block_observer: object = None  # callable(block_idx, BlockTaps); taps then dropped

    def wants(self, block: int) -> bool:
        return self.blocks is None or block in self.blocks


@dataclass
class BlockTaps:
    resid_input: np.ndarray | None = None
    attn_input: np.ndarray | None = None
    attn_probs: np.ndarray | None = None  # [N, h, s, s]
    head_value_inputs: list[np.ndarray] | None = None  # per head, [N*s, d_model]
    y_q: np.ndarray | None = None
    y_k: np.ndarray | None = None
    y_v: np.ndarray | None = None
    attn_concat: np.ndarray | None = None  # level-2 input of the attention module
    y_o: np.ndarray | None = None
    ffn_input: np.ndarray | None = None
    y_u: np.ndarray | None = None
    y_g: np.ndarray | None = None
    ffn_act: np.ndarray | None = None  # level-2 input of the FFN module
    y_d: np.ndarray | None = None


@dataclass
class ForwardTaps:
    blocks: dict[int, BlockTaps] = field(default_factory=dict)


def graph_from_tensors(
    config: ModelConfig, tensors: dict[str, np.ndarray], plan: PruningPlan | None = None
) -> ModelGraph:
    config.validate()
    ln = config.norm_kind == "layernorm"

    def norm(prefix: str) -> Norm:
        return Norm(
            config.norm_kind,
            tensors[f"{prefix}.g"],
            tensors.get(f"{prefix}.b") if ln else None,
            config.norm_eps,
        )

    blocks = []
    for i in range(config.n_layers):
        p = f"blocks.{i}"
        kept_heads = config.n_heads
        if plan is not None and f"{p}.attn" in plan.modules:
            kept_heads = len(plan.modules[f"{p}.attn"].kept)
        attn = Attention(
            wq=tensors[f"{p}.attn.wq"], wk=tensors[f"{p}.attn.wk"],
            wv=tensors[f"{p}.attn.wv"], wo=tensors[f"{p}.attn.wo"],
            bq=tensors.get(f"{p}.attn.bq"), bk=tensors.get(f"{p}.attn.bk"),
            bv=tensors.get(f"{p}.attn.bv"), bo=tensors.get(f"{p}.attn.bo"),
            n_heads=kept_heads, d_head=config.d_head,
        )
        ffn = FeedForward(
            wu=tensors[f"{p}.ffn.wu"], wd=tensors[f"{p}.ffn.wd"],
            wg=tensors.get(f"{p}.ffn.wg"),
            bu=tensors.get(f"{p}.ffn.bu"), bg=tensors.get(f"{p}.ffn.bg"),
            bd=tensors.get(f"{p}.ffn.bd"),
            activation=config.activation, gated=config.ffn_kind == "gated",
        )
        blocks.append(Block(norm(f"{p}.norm1"), attn, norm(f"{p}.norm2"), ffn))
    if config.positional == "rope" and config.d_head % 2 != 0:
        raise PlanError(f"rope requires an even d_head, got {config.d_head}")
    return ModelGraph(
        config=config,
        tok_emb=tensors["tok_emb"],
        pos_emb=tensors.get("pos_emb"),
        blocks=blocks,
        final_norm=norm("final_norm"),
        lm_head=tensors.get("lm_head"),
        applied_plan=plan,
    )


def graph_to_tensors(graph: ModelGraph) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {"tok_emb": graph.tok_emb}
    if graph.pos_emb is not None:
        out["pos_emb"] = graph.pos_emb
    for i, blk in enumerate(graph.blocks):
        p = f"blocks.{i}"
        a, f = blk.attn, blk.ffn
        out[f"{p}.attn.wq"], out[f"{p}.attn.wk"] = a.wq, a.wk
        out[f"{p}.attn.wv"], out[f"{p}.attn.wo"] = a.wv, a.wo
        for name, val in (("bq", a.bq), ("bk", a.bk), ("bv", a.bv), ("bo", a.bo)):
            if val is not None:
                out[f"{p}.attn.{name}"] = val
        out[f"{p}.ffn.wu"], out[f"{p}.ffn.wd"] = f.wu, f.wd
        if f.wg is not None:
            out[f"{p}.ffn.wg"] = f.wg
        for name, val in (("bu", f.bu), ("bg", f.bg), ("bd", f.bd)):
            if val is not None:
                out[f"{p}.ffn.{name}"] = val
        for name, norm in (("norm1", blk.norm1), ("norm2", blk.norm2)):
            out[f"{p}.{name}.g"] = norm.gain
            if norm.bias is not None:
                out[f"{p}.{name}.b"] = norm.bias
    out["final_norm.g"] = graph.final_norm.gain
    if graph.final_norm.bias is not None:
        out["final_norm.b"] = graph.final_norm.bias
    if graph.lm_head is not None:
        out["lm_head"] = graph.lm_head
    return out


def rope_tables(positions: np.ndarray, d_head: int) -> tuple[np.ndarray, np.ndarray]:
    half = d_head // 2
    inv_freq = ROPE_BASE ** (-np.arange(0, half, dtype=np.float64) / half)
    angles = np.outer(positions.astype(np.float64), inv_freq)
    return np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Half-dimension pairwise rotation. x is [..., seq, d_head]."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1).astype(np.float32)


def _check_tokens(config: ModelConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.shape[1] > config.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[1]} > max_seq_len {config.max_seq_len}")
    if tokens.size == 0:
        raise ValueError("empty token batch")
    if int(tokens.min()) < 0 or int(tokens.max()) >= config.vocab_size:
        raise ValueError(
            f"token id out of range [0, {config.vocab_size}): "
            f"min={int(tokens.min())} max={int(tokens.max())}"
        )
    return tokens.astype(np.int64)


def _linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    y = x @ w
    return y + b if b is not None else y


def project_qkv(attn: Attention, flat: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Level-1 outputs of the attention module for flattened input rows."""
    return (
        _linear(flat, attn.wq, attn.bq),
        _linear(flat, attn.wk, attn.bk),
        _linear(flat, attn.wv, attn.bv),
    )


def _split_heads(m: np.ndarray, n: int, s: int, h: int, d_head: int) -> np.ndarray:
    return m.reshape(n, s, h, d_head).transpose(0, 2, 1, 3)


def _causal_mask(s: int) -> np.ndarray:
    mask = np.zeros((s, s), dtype=np.float32)
    mask[np.triu_indices(s, k=1)] = -np.inf
    return mask


def _attention_probs(q: np.ndarray, k: np.ndarray, d_head: int, mask: np.ndarray) -> np.ndarray:
    scores = q @ k.transpose(0, 2, 1)
    scores *= np.float32(1.0 / np.sqrt(d_head))
    scores += mask
    return linalg._softmax_rows_owned(scores)


def forward(
    graph: ModelGraph, tokens: np.ndarray, taps: TapRequest | None = None
) -> tuple[np.ndarray, ForwardTaps]:
    """Causal forward pass. Returns logits [N, s, vocab] and requested taps."""
    cfg = graph.config
    tokens = _check_tokens(cfg, tokens)
    n, s = tokens.shape
    x = graph.tok_emb[tokens]
    if cfg.positional == "learned":
        x = x + graph.pos_emb[:s]
    x = x.astype(np.float32)
    mask = _causal_mask(s)
    collected = ForwardTaps()

    for bi, blk in enumerate(graph.blocks):
        want = taps is not None and taps.wants(bi)
        bt = BlockTaps() if want else None
        if want and taps.resid_inputs:
            bt.resid_input = x.reshape(n * s, -1).copy()

        h_in = blk.norm1(x)
        flat = h_in.reshape(n * s, -1)
        if want and taps.module_inputs:
            bt.attn_input = flat
        y_q, y_k, y_v = project_qkv(blk.attn, flat)
        h, d_head = blk.attn.n_heads, blk.attn.d_head
        q = _split_heads(y_q, n, s, h, d_head)
        k = _split_heads(y_k, n, s, h, d_head)
        v = _split_heads(y_v, n, s, h, d_head)
        if cfg.positional == "rope":
            cos, sin = rope_tables(np.arange(s), d_head)
            q = apply_rope(q, cos, sin)
            k = apply_rope(k, cos, sin)
        keep_probs = want and (taps.attn_probs or taps.head_value_inputs)
        probs = np.empty((n, h, s, s), dtype=np.float32) if keep_probs else None
        ctx = np.empty((n, s, h * d_head), dtype=np.float32)
        for si in range(n):
            p = _attention_probs(q[si], k[si], d_head, mask)
            if keep_probs:
                probs[si] = p
            ctx[si] = (p @ v[si]).transpose(1, 0, 2).reshape(s, -1)
        x2 = ctx.reshape(n * s, -1)
        y_o = _linear(x2, blk.attn.wo, blk.attn.bo)
        if want:
            if taps.attn_probs:
                bt.attn_probs = probs
            if taps.head_value_inputs:
                bt.head_value_inputs = [
                    np.concatenate([probs[si, hi] @ h_in[si] for si in range(n)], axis=0)
                    for hi in range(h)
                ]
            if taps.level1_outputs:
                bt.y_q, bt.y_k, bt.y_v = y_q, y_k, y_v
            if taps.level2_inputs:
                bt.attn_concat = x2
            if taps.level2_outputs:
                bt.y_o = y_o
        x = x + y_o.reshape(n, s, -1)

        h2 = blk.norm2(x)
        flat2 = h2.reshape(n * s, -1)
        if want and taps.module_inputs:
            bt.ffn_input = flat2
        y_u = _linear(flat2, blk.ffn.wu, blk.ffn.bu)
        y_g = _linear(flat2, blk.ffn.wg, blk.ffn.bg) if blk.ffn.gated else None
        act = blk.ffn.post_process(y_u, y_g)
        y_d = _linear(act, blk.ffn.wd, blk.ffn.bd)
        if want:
            if taps.level1_outputs:
                bt.y_u, bt.y_g = y_u, y_g
            if taps.level2_inputs:
                bt.ffn_act = act
            if taps.level2_outputs:
                bt.y_d = y_d
        x = x + y_d.reshape(n, s, -1)

        if want:
            if taps.block_observer is not None:
                taps.block_observer(bi, bt)
            else:
                collected.blocks[bi] = bt

    x = graph.final_norm(x)
    logits = (x.reshape(n * s, -1) @ graph.head_weight()).reshape(n, s, -1)
    return logits.astype(np.float32), collected


@dataclass(frozen=True)
class Greedy:
    pass


@dataclass(frozen=True)
class TopK:
    k: int
    temperature: float = 1.0
    seed: int = 0


def _sample(logits_row: np.ndarray, sampler, rng: np.random.Generator | None) -> int:
    if isinstance(sampler, Greedy):
        return int(np.argmax(logits_row))
    order = linalg.argsort_descending(logits_row)[: sampler.k]
    z = logits_row[order].astype(np.float64) / max(sampler.temperature, 1e-8)
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(order[rng.choice(len(order), p=p)])


def generate(graph: ModelGraph, prompt: np.ndarray, n_new: int, sampler=Greedy()) -> np.ndarray:
    """Autoregressive decoding; deterministic given the sampler seed.

    Returns prompt + n_new token ids. Uses a per-call key/value cache so the
    per-step cost does not re-run attention over the whole prefix.
    """
    cfg = graph.config
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
    if prompt.size == 0:
        raise ValueError("prompt must be nonempty")
    if prompt.size + n_new > cfg.max_seq_len:
        raise ValueError(
            f"prompt ({prompt.size}) + n_new ({n_new}) exceeds max_seq_len {cfg.max_seq_len}"
        )
    rng = np.random.default_rng(sampler.seed) if isinstance(sampler, TopK) else None
    caches = [(None, None)] * len(graph.blocks)
    out = list(map(int, prompt))
    ids = prompt
    offset = 0
    for _ in range(n_new):
        last_logits, caches, offset = _decode_rows(graph, ids, offset, caches)
        out.append(_sample(last_logits, sampler, rng))
        ids = np.array([out[-1]], dtype=np.int64)
    return np.array(out, dtype=np.int64)


def _decode_rows(graph: ModelGraph, ids: np.ndarray, offset: int, caches: list):
    cfg = graph.config
    m = ids.size
    positions = np.arange(offset, offset + m)
    x = graph.tok_emb[ids]
    if cfg.positional == "learned":
        x = x + graph.pos_emb[positions]
    x = x.astype(np.float32)
    new_caches = []
    for blk, (k_cache, v_cache) in zip(graph.blocks, caches):
        h_in = blk.norm1(x)
        y_q, y_k, y_v = project_qkv(blk.attn, h_in)
        heads, d_head = blk.attn.n_heads, blk.attn.d_head
        q = _split_heads(y_q, 1, m, heads, d_head)[0]
        k = _split_heads(y_k, 1, m, heads, d_head)[0]
        v = _split_heads(y_v, 1, m, heads, d_head)[0]
        if cfg.positional == "rope":
            cos, sin = rope_tables(positions, d_head)
            q = apply_rope(q, cos, sin)
            k = apply_rope(k, cos, sin)
        k_all = k if k_cache is None else np.concatenate([k_cache, k], axis=1)
        v_all = v if v_cache is None else np.concatenate([v_cache, v], axis=1)
        new_caches.append((k_all, v_all))
        t = k_all.shape[1]
        scores = (q @ k_all.transpose(0, 2, 1)) * np.float32(1.0 / np.sqrt(d_head))
        if m > 1:
            block_mask = np.full((m, t), -np.inf, dtype=np.float32)
            for j in range(m):
                block_mask[j, : t - m + j + 1] = 0.0
            scores = scores + block_mask
        p = linalg.softmax_rows(scores)
        ctx = (p @ v_all).transpose(1, 0, 2).reshape(m, -1)
        x = x + _linear(ctx, blk.attn.wo, blk.attn.bo)
        h2 = blk.norm2(x)
        y_u = _linear(h2, blk.ffn.wu, blk.ffn.bu)
        y_g = _linear(h2, blk.ffn.wg, blk.ffn.bg) if blk.ffn.gated else None
        act = blk.ffn.post_process(y_u, y_g)
        x = x + _linear(act, blk.ffn.wd, blk.ffn.bd)
    x_last = graph.final_norm(x[-1:])
    logits = (x_last @ graph.head_weight()).reshape(-1)
    return logits.astype(np.float32), new_caches, offset + m


def _slice_cols(arr: np.ndarray | None, cols: np.ndarray) -> np.ndarray | None:
    if arr is None:
        return None
    return np.ascontiguousarray(arr[:, cols]) if arr.ndim == 2 else np.ascontiguousarray(arr[cols])


def apply_plan(graph: ModelGraph, plan: PruningPlan) -> ModelGraph:
    """New graph with each planned module's inner units sliced out.

    Level-1 output channels and level-2 input channels are removed with
    identical indices; the residual stream and embeddings are untouched.
    """
    if graph.applied_plan is not None:
        raise PlanError("plan already applied to this graph")
    new = copy.deepcopy(graph)
    for mid, mp in plan.modules.items():
        parts = mid.split(".")
        if len(parts) != 3 or parts[0] != "blocks" or parts[2] not in ("attn", "ffn"):
            raise PlanError(f"unknown module id {mid!r}")
        bi = int(parts[1])
        if bi >= len(new.blocks):
            raise PlanError(f"{mid}: block index out of range")
        blk = new.blocks[bi]
        if parts[2] == "attn":
            mp.validate(blk.attn.n_heads, mid)
            d_head = blk.attn.d_head
            cols = np.concatenate(
                [np.arange(h * d_head, (h + 1) * d_head) for h in sorted(mp.kept)]
            )
            a = blk.attn
            a.wq, a.wk, a.wv = (_slice_cols(w, cols) for w in (a.wq, a.wk, a.wv))
            a.bq, a.bk, a.bv = (_slice_cols(b, cols) for b in (a.bq, a.bk, a.bv))
            a.wo = np.ascontiguousarray(a.wo[cols, :])
            a.n_heads = len(mp.kept)
        else:
            f = blk.ffn
            mp.validate(f.wu.shape[1], mid)
            cols = np.asarray(sorted(mp.kept))
            f.wu = _slice_cols(f.wu, cols)
            f.bu = _slice_cols(f.bu, cols)
            if f.wg is not None:
                f.wg = _slice_cols(f.wg, cols)
                f.bg = _slice_cols(f.bg, cols)
            f.wd = np.ascontiguousarray(f.wd[cols, :])
    new.applied_plan = plan
    return new


def load_graph(dir_path: str) -> ModelGraph:
    """Convenience: checkpoint directory -> ModelGraph (plan-aware)."""
    from .checkpoint import load_model, load_plan

    config, tensors = load_model(dir_path)
    return graph_from_tensors(config, tensors, load_plan(dir_path))


def save_graph(dir_path: str, graph: ModelGraph):
    from .checkpoint import save_model

    save_model(dir_path, graph.config, graph_to_tensors(graph), graph.applied_plan)
