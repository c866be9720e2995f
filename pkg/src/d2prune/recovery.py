"""Sequential module-wise pruning with two-step least-squares weight recovery.

Modules are processed in network order. For each depth-2 module, the level-1
layers are first re-solved against the dense model's level-1 outputs using
the drifted input produced by the already-processed prefix; the module is
then pruned; the level-2 input is recomputed through the reconstructed,
pruned level-1 (including softmax/attention combine or activation/gating);
finally the level-2 layer is solved at its pruned shape against the dense
module output. Biases are folded in by augmenting inputs with a constant-1
column.

All Gram and cross products stream batch-by-batch in float64; activations
are never stored across the whole calibration set.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import metrics as metrics_mod
from .errors import PlanError, SingularSystemError
from .linalg import SolveOptions, solve_least_squares
from .model import (
    Attention,
    ModelGraph,
    _causal_mask,
    _attention_probs,
    _linear,
    _split_heads,
    apply_plan,
    apply_rope,
    project_qkv,
    rope_tables,
)
from .pruner import (
    HEAD,
    INNER_CHANNEL,
    ModulePlan,
    PruningPlan,
    SparsityTarget,
    build_plan,
    modules_from_graph,
    select_removed,
    solve_uniform_budgets,
    sparsity_report,
)
from .seeding import derive_seed
from .stats import CovarianceEstimate, DivergenceMatrix, collect_stats

PRUNE_ONLY = "prune_only"
PRUNE_WITH_RECOVERY = "prune_with_recovery"
SECOND_MOMENT = "second-moment"


@dataclass
class ModuleTargets:
    """Dense-run normal-equation targets for one depth-2 module."""

    gram1: np.ndarray  # (d1+1, d1+1) float64, augmented dense input
    cross1: dict[str, np.ndarray]  # level-1 layer -> (d1+1, out) float64
    gram2: np.ndarray  # (d2+1, d2+1) float64, augmented dense level-2 input
    cross2: dict[str, np.ndarray]
    n_rows: int


@dataclass
class RecoveryContext:
    dense_graph: ModelGraph
    batches: np.ndarray  # [N, s] token ids
    targets: dict[str, ModuleTargets]
    solve: SolveOptions
    scope: list[str]  # module ids in processing order
    _cursor: int = 0

    def expect(self, module_id: str):
        if self._cursor >= len(self.scope) or self.scope[self._cursor] != module_id:
            want = self.scope[self._cursor] if self._cursor < len(self.scope) else "<done>"
            raise PlanError(
                f"modules must be processed in network order: got {module_id}, expected {want}"
            )
        self._cursor += 1


def _aug(x: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64, copy=False)
    return np.concatenate([x64, np.ones((x64.shape[0], 1))], axis=1)


def _aug_weight(w: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    w64 = w.astype(np.float64)
    brow = np.zeros((1, w.shape[1])) if b is None else b.astype(np.float64)[None, :]
    return np.concatenate([w64, brow], axis=0)


def _solve_layer(
    gram_aug: np.ndarray,
    cross_aug: np.ndarray,
    opts: SolveOptions,
    has_bias: bool,
    context: str,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Weight (and bias when present) from augmented normal equations."""
    try:
        if has_bias:
            w_aug = solve_least_squares(gram_aug, cross_aug, opts)
            return np.ascontiguousarray(w_aug[:-1]), np.ascontiguousarray(w_aug[-1])
        w = solve_least_squares(gram_aug[:-1, :-1], cross_aug[:-1], opts)
        return np.ascontiguousarray(w), None
    except SingularSystemError as exc:
        raise SingularSystemError(str(exc), context) from exc


def _residual(gram: np.ndarray, cross: np.ndarray, y_gram_trace: float, w_aug: np.ndarray) -> float:
    """Frobenius residual^2 of W against targets, relative to ||Y||_F^2."""
    fit = float(np.einsum("ij,ij->", w_aug, cross))
    quad = float(np.einsum("ij,ij->", w_aug, gram @ w_aug))
    denom = max(y_gram_trace, 1e-30)
    return max(y_gram_trace - 2.0 * fit + quad, 0.0) / denom


def _attention_level2(
    attn: Attention, x_rows: np.ndarray, positional: str, s: int
) -> tuple[np.ndarray, np.ndarray]:
    """(per-head probs [h, s, s], concat value outputs [s, h*d_head]) for one sample."""
    y_q, y_k, y_v = project_qkv(attn, x_rows)
    h, dh = attn.n_heads, attn.d_head
    q = _split_heads(y_q, 1, s, h, dh)[0]
    k = _split_heads(y_k, 1, s, h, dh)[0]
    v = _split_heads(y_v, 1, s, h, dh)[0]
    if positional == "rope":
        cos, sin = rope_tables(np.arange(s), dh)
        q = apply_rope(q, cos, sin)
        k = apply_rope(k, cos, sin)
    probs = _attention_probs(q, k, dh, _causal_mask(s))
    concat = (probs @ v).transpose(1, 0, 2).reshape(s, -1)
    return probs, concat


def _module_apply(module, x_rows: np.ndarray, positional: str) -> tuple[np.ndarray, np.ndarray]:
    """(level-2 input rows, module output rows) for one sample's input rows."""
    s = x_rows.shape[0]
    if isinstance(module, Attention):
        _, concat = _attention_level2(module, x_rows, positional, s)
        return concat, _linear(concat, module.wo, module.bo)
    y_u = _linear(x_rows, module.wu, module.bu)
    y_g = _linear(x_rows, module.wg, module.bg) if module.gated else None
    act = module.post_process(y_u, y_g)
    return act, _linear(act, module.wd, module.bd)


def capture_dense_targets(
    dense_graph: ModelGraph,
    batches: np.ndarray,
    scope: list[str] | None = None,
    solve: SolveOptions = SolveOptions(),
) -> RecoveryContext:
    """One tapped forward over the calibration batches; per in-scope module,
    accumulate the dense Gram and X^T Y cross products for both levels."""
    from .model import TapRequest, forward

    batches = np.asarray(batches)
    if batches.ndim == 1:
        batches = batches[None]
    if scope is None:
        scope = dense_graph.module_ids()
    scope_set = set(scope)
    targets: dict[str, ModuleTargets] = {}

    def ensure(mid: str, d1: int, d2: int, names1, names2, outs1, out2) -> ModuleTargets:
        if mid not in targets:
            targets[mid] = ModuleTargets(
                gram1=np.zeros((d1 + 1, d1 + 1)),
                cross1={n: np.zeros((d1 + 1, o)) for n, o in zip(names1, outs1)},
                gram2=np.zeros((d2 + 1, d2 + 1)),
                cross2={names2: np.zeros((d2 + 1, out2))},
                n_rows=0,
            )
        return targets[mid]

    def observer(bi: int, bt):
        blk = dense_graph.blocks[bi]
        mid_a, mid_f = f"blocks.{bi}.attn", f"blocks.{bi}.ffn"
        if mid_a in scope_set:
            x_aug = _aug(bt.attn_input)
            x2_aug = _aug(bt.attn_concat)
            inner = blk.attn.n_heads * blk.attn.d_head
            t = ensure(mid_a, bt.attn_input.shape[1], inner, ("q", "k", "v"),
                       "o", (inner, inner, inner), bt.y_o.shape[1])
            t.gram1 += x_aug.T @ x_aug
            t.cross1["q"] += x_aug.T @ bt.y_q.astype(np.float64)
            t.cross1["k"] += x_aug.T @ bt.y_k.astype(np.float64)
            t.cross1["v"] += x_aug.T @ bt.y_v.astype(np.float64)
            t.gram2 += x2_aug.T @ x2_aug
            t.cross2["o"] += x2_aug.T @ bt.y_o.astype(np.float64)
            t.n_rows += bt.attn_input.shape[0]
        if mid_f in scope_set:
            x_aug = _aug(bt.ffn_input)
            x2_aug = _aug(bt.ffn_act)
            names1 = ("u", "g") if blk.ffn.gated else ("u",)
            outs1 = tuple(bt.y_u.shape[1] for _ in names1)
            t = ensure(mid_f, bt.ffn_input.shape[1], bt.ffn_act.shape[1],
                       names1, "d", outs1, bt.y_d.shape[1])
            t.gram1 += x_aug.T @ x_aug
            t.cross1["u"] += x_aug.T @ bt.y_u.astype(np.float64)
            if blk.ffn.gated:
                t.cross1["g"] += x_aug.T @ bt.y_g.astype(np.float64)
            t.gram2 += x2_aug.T @ x2_aug
            t.cross2["d"] += x2_aug.T @ bt.y_d.astype(np.float64)
            t.n_rows += bt.ffn_input.shape[0]

    block_ids = sorted({int(m.split(".")[1]) for m in scope})
    req = TapRequest(
        blocks=frozenset(block_ids),
        module_inputs=True,
        level1_outputs=True,
        level2_inputs=True,
        level2_outputs=True,
        block_observer=observer,
    )
    for si in range(batches.shape[0]):
        forward(dense_graph, batches[si : si + 1], req)
    return RecoveryContext(dense_graph, batches, targets, solve, list(scope))


@dataclass
class RecoveredModule:
    module: object  # reconstructed, pruned Attention or FeedForward
    plan: ModulePlan
    drift_out: list[np.ndarray]  # per-sample module outputs on the drifted input
    dense_out: list[np.ndarray]  # per-sample dense module outputs
    record: dict


def recover_and_prune_module(
    module,
    ctx: RecoveryContext,
    module_id: str,
    streams: list[tuple[np.ndarray, np.ndarray]],
    plan_source,
    positional: str = "learned",
) -> RecoveredModule:
    """Two-step reconstruction of one module against its dense targets.

    streams holds per-sample (drifted input rows, dense input rows), both
    already normalized. plan_source is either a fixed ModulePlan or a
    callable invoked with the level-1-reconstructed module and the drifted
    inputs, returning the ModulePlan to apply.
    """
    ctx.expect(module_id)
    tgt = ctx.targets[module_id]
    is_attn = isinstance(module, Attention)
    d1 = streams[0][0].shape[1]
    rows = sum(x.shape[0] for x, _ in streams)

    # level-1 drifted Gram and drift-vs-dense cross-Gram
    g1 = np.zeros((d1 + 1, d1 + 1))
    c1 = np.zeros((d1 + 1, d1 + 1))
    for x_drift, x_dense in streams:
        xa = _aug(x_drift)
        g1 += xa.T @ xa
        c1 += xa.T @ _aug(x_dense)

    record = {"module": module_id, "n_rows": rows, "layers": {}}
    new = copy.deepcopy(module)
    if is_attn:
        layer_weights = {"q": (module.wq, module.bq), "k": (module.wk, module.bk),
                         "v": (module.wv, module.bv)}
    else:
        layer_weights = {"u": (module.wu, module.bu)}
        if module.gated:
            layer_weights["g"] = (module.wg, module.bg)

    for name, (w_dense, b_dense) in layer_weights.items():
        w_aug_dense = _aug_weight(w_dense, b_dense)
        cross = c1 @ w_aug_dense
        y_trace = float(np.einsum("ij,ij->", w_aug_dense, tgt.gram1 @ w_aug_dense))
        rec_before = _residual(g1, cross, y_trace, w_aug_dense)
        w_new, b_new = _solve_layer(g1, cross, ctx.solve, b_dense is not None,
                                    f"{module_id}.{name}")
        w_aug_new = _aug_weight(w_new, b_new)
        record["layers"][name] = {
            "residual_before": rec_before,
            "residual_after": _residual(g1, cross, y_trace, w_aug_new),
        }
        if is_attn:
            setattr(new, f"w{name}", w_new)
            setattr(new, f"b{name}", b_new)
        else:
            setattr(new, f"w{name}", w_new)
            setattr(new, f"b{name}", b_new)

    # pruning decision on the reconstructed level-1
    plan = plan_source(new, streams) if callable(plan_source) else plan_source
    n_units = new.n_heads if is_attn else new.wu.shape[1]
    plan.validate(n_units, module_id)
    record["kept_units"] = len(plan.kept)
    record["removed_units"] = len(plan.removed)

    if is_attn:
        kept_cols = np.concatenate(
            [np.arange(h * new.d_head, (h + 1) * new.d_head) for h in sorted(plan.kept)]
        )
        new.wq = np.ascontiguousarray(new.wq[:, kept_cols])
        new.wk = np.ascontiguousarray(new.wk[:, kept_cols])
        new.wv = np.ascontiguousarray(new.wv[:, kept_cols])
        for bn in ("bq", "bk", "bv"):
            b = getattr(new, bn)
            if b is not None:
                setattr(new, bn, np.ascontiguousarray(b[kept_cols]))
        new.n_heads = len(plan.kept)
        level2_name, w2_dense, b2_dense = "o", module.wo, module.bo
    else:
        kept_cols = np.asarray(sorted(plan.kept))
        new.wu = np.ascontiguousarray(new.wu[:, kept_cols])
        if new.bu is not None:
            new.bu = np.ascontiguousarray(new.bu[kept_cols])
        if new.gated:
            new.wg = np.ascontiguousarray(new.wg[:, kept_cols])
            if new.bg is not None:
                new.bg = np.ascontiguousarray(new.bg[kept_cols])
        level2_name, w2_dense, b2_dense = "d", module.wd, module.bd

    # recompute the level-2 input through the reconstructed pruned level-1
    d2 = len(kept_cols)
    g2 = np.zeros((d2 + 1, d2 + 1))
    c2 = np.zeros((d2 + 1, w2_dense.shape[0] + 1))
    x2_drift_cache: list[np.ndarray] = []
    dense_out: list[np.ndarray] = []
    for x_drift, x_dense in streams:
        if is_attn:
            x2_drift = _attention_level2(new, x_drift, positional, x_drift.shape[0])[1]
            x2_dense = _attention_level2(module, x_dense, positional, x_dense.shape[0])[1]
        else:
            yu = _linear(x_drift, new.wu, new.bu)
            yg = _linear(x_drift, new.wg, new.bg) if new.gated else None
            x2_drift = new.post_process(yu, yg)
            yu_d = _linear(x_dense, module.wu, module.bu)
            yg_d = _linear(x_dense, module.wg, module.bg) if module.gated else None
            x2_dense = module.post_process(yu_d, yg_d)
        x2a = _aug(x2_drift)
        g2 += x2a.T @ x2a
        c2 += x2a.T @ _aug(x2_dense)
        x2_drift_cache.append(x2_drift)
        dense_out.append(_linear(x2_dense, w2_dense, b2_dense))

    w2_aug_dense = _aug_weight(w2_dense, b2_dense)
    cross2 = c2 @ w2_aug_dense
    y2_trace = float(np.einsum("ij,ij->", w2_aug_dense, tgt.gram2 @ w2_aug_dense))
    w2_before = _aug_weight(
        np.ascontiguousarray(w2_dense[kept_cols, :]), b2_dense
    )
    rec2_before = _residual(g2, cross2, y2_trace, w2_before)
    w2_new, b2_new = _solve_layer(g2, cross2, ctx.solve, b2_dense is not None,
                                  f"{module_id}.{level2_name}")
    record["layers"][level2_name] = {
        "residual_before": rec2_before,
        "residual_after": _residual(g2, cross2, y2_trace, _aug_weight(w2_new, b2_new)),
    }
    if is_attn:
        new.wo, new.bo = w2_new, b2_new
    else:
        new.wd, new.bd = w2_new, b2_new

    drift_out = [_linear(x2, w2_new, b2_new) for x2 in x2_drift_cache]
    return RecoveredModule(new, plan, drift_out, dense_out, record)


@dataclass
class PipelineSettings:
    metric: str = SECOND_MOMENT
    tau: float = 0.2
    seed: int = 0
    solve: SolveOptions = SolveOptions()
    recompute_scores: bool = True  # re-score after level-1 reconstruction
    use_similarity: bool = True  # similarity-first head removal (second-moment only)
    gated_single_output_norm: bool = False


def _module_scores(
    module,
    module_id: str,
    sigma_source,
    activation: str,
    settings: PipelineSettings,
) -> tuple[np.ndarray, list[tuple[int, float]] | None]:
    """Scores (and similarity ordering for attention) for one module.

    sigma_source is a ModelStats for dense scoring, or per-sample drifted
    input rows for in-pipeline re-scoring.
    """
    is_attn = isinstance(module, Attention)
    if settings.metric != SECOND_MOMENT:
        seed = derive_seed(settings.seed, f"baseline:{module_id}")
        return metrics_mod.baseline_scores(module, settings.metric, module_id, seed).scores, None

    if isinstance(sigma_source, list):  # drifted rows, re-scored in place
        if is_attn:
            d_model = module.wq.shape[0]
            covs = [CovarianceEstimate(d_model) for _ in range(module.n_heads)]
            dm = DivergenceMatrix(module.n_heads) if settings.use_similarity else None
            for x_drift, positional in sigma_source:
                probs, _ = _attention_level2(module, x_drift, positional, x_drift.shape[0])
                if dm is not None:
                    dm.update(probs[None])
                for hi in range(module.n_heads):
                    covs[hi].update(probs[hi] @ x_drift)
            scores = metrics_mod.second_moment_attention(module, covs, module_id).scores
            sim = None
            if dm is not None:
                sim = metrics_mod.similarity_candidates(dm, settings.tau, module_id).ordering()
            return scores, sim
        est = CovarianceEstimate(module.wu.shape[0])
        for x_drift, _ in sigma_source:
            est.update(x_drift)
        scores = metrics_mod.second_moment_ffn(
            module.wu, module.wg, module.wd, est, activation, module_id,
            settings.gated_single_output_norm,
        ).scores
        return scores, None

    stats = sigma_source
    if is_attn:
        scores = metrics_mod.second_moment_attention(
            module, stats.attn_head_cov[module_id], module_id
        ).scores
        sim = None
        if settings.use_similarity:
            sim = metrics_mod.similarity_candidates(
                stats.attn_divergence[module_id], settings.tau, module_id
            ).ordering()
        return scores, sim
    scores = metrics_mod.second_moment_ffn(
        module.wu, module.wg, module.wd, stats.ffn_input_cov[module_id],
        activation, module_id, settings.gated_single_output_norm,
    ).scores
    return scores, None


def _dense_plan(
    graph: ModelGraph, batches: np.ndarray, target: SparsityTarget, settings: PipelineSettings
) -> tuple[PruningPlan, dict[str, list[float]]]:
    modules = modules_from_graph(graph, target)
    stats = None
    if settings.metric == SECOND_MOMENT:
        want_attn = any(m.kind == "attn" for m in modules)
        stats = collect_stats(
            graph,
            batches,
            blocks=frozenset(m.block for m in modules),
            divergence=want_attn and settings.use_similarity,
            head_cov=want_attn,
            ffn_cov=any(m.kind == "ffn" for m in modules),
        )
    scores: dict[str, np.ndarray] = {}
    similarity: dict[str, list[tuple[int, float]]] = {}
    for m in modules:
        blk = graph.blocks[m.block]
        module = blk.attn if m.kind == "attn" else blk.ffn
        s, sim = _module_scores(module, m.module_id, stats, graph.config.activation, settings)
        scores[m.module_id] = s
        if sim is not None:
            similarity[m.module_id] = sim
    provenance = {"metric": settings.metric, "tau": settings.tau, "seed": settings.seed}
    plan = build_plan(scores, similarity or None, target, modules, provenance)
    return plan, {k: [float(x) for x in v] for k, v in scores.items()}


def run_pipeline(
    graph: ModelGraph,
    plan_or_target,
    ctx: RecoveryContext | None = None,
    mode: str = PRUNE_ONLY,
    settings: PipelineSettings | None = None,
    batches: np.ndarray | None = None,
) -> tuple[ModelGraph, dict]:
    """Prune (optionally with interleaved recovery) and return graph + manifest.

    plan_or_target is a prebuilt PruningPlan or a SparsityTarget; with a
    target, scores are computed from the calibration batches. Recovery mode
    walks modules in network order, re-solving each one against dense targets
    with drifted inputs from the evolving prefix.
    """
    settings = settings or PipelineSettings()
    if batches is None and ctx is not None:
        batches = ctx.batches
    fixed_plan = plan_or_target if isinstance(plan_or_target, PruningPlan) else None
    target = plan_or_target if isinstance(plan_or_target, SparsityTarget) else None
    if fixed_plan is None and target is None:
        raise PlanError("plan_or_target must be a PruningPlan or SparsityTarget")

    manifest: dict = {
        "schema": "d2p/1",
        "mode": mode,
        "metric": settings.metric,
        "tau": settings.tau,
        "seed": settings.seed,
        "ridge_fraction": settings.solve.ridge_fraction,
        "recompute_scores": settings.recompute_scores,
    }
    if target is not None:
        manifest["target"] = {
            "global_ratio": target.global_ratio,
            "block_range": list(target.block_range) if target.block_range else None,
            "kinds": list(target.kinds),
        }

    if mode == PRUNE_ONLY:
        if fixed_plan is None:
            if batches is None:
                raise PlanError("a calibration batch is required to build a plan from scores")
            fixed_plan, scores_json = _dense_plan(graph, batches, target, settings)
            manifest["scores"] = scores_json
        pruned = apply_plan(graph, fixed_plan)
        manifest["sparsity"] = sparsity_report(pruned, fixed_plan)
        return pruned, manifest
    if mode != PRUNE_WITH_RECOVERY:
        raise PlanError(f"unknown pipeline mode {mode!r}")

    if batches is None:
        raise PlanError("recovery mode requires calibration batches")
    batches = np.asarray(batches)
    if batches.ndim == 1:
        batches = batches[None]

    if fixed_plan is not None:
        scope = [mid for mid in graph.module_ids() if mid in fixed_plan.modules]
        budgets = {mid: len(fixed_plan.modules[mid].removed) for mid in scope}
    else:
        modules = modules_from_graph(graph, target)
        scope = [m.module_id for m in modules]
        budgets = solve_uniform_budgets(modules, target)
        if not settings.recompute_scores:
            fixed_plan, scores_json = _dense_plan(graph, batches, target, settings)
            manifest["scores"] = scores_json
    if ctx is None:
        ctx = capture_dense_targets(graph, batches, scope, settings.solve)
    scope_set = set(scope)

    cfg = graph.config
    n, s = batches.shape
    emb = graph.tok_emb[batches.astype(np.int64)]
    if cfg.positional == "learned":
        emb = emb + graph.pos_emb[:s]
    dense_resid = emb.astype(np.float32)
    drift_resid = dense_resid.copy()

    working = copy.deepcopy(graph)
    provenance = {
        "metric": settings.metric, "tau": settings.tau, "seed": settings.seed,
        "mode": mode, "recompute_scores": settings.recompute_scores,
    }
    plan_modules: dict[str, ModulePlan] = {}
    module_records = []
    recomputed_scores: dict[str, list[float]] = {}

    for bi in range(cfg.n_layers):
        dense_blk = graph.blocks[bi]
        for kind, norm, module in (
            ("attn", dense_blk.norm1, dense_blk.attn),
            ("ffn", dense_blk.norm2, dense_blk.ffn),
        ):
            mid = f"blocks.{bi}.{kind}"
            x_dense_n = [norm(dense_resid[si]) for si in range(n)]
            x_drift_n = [norm(drift_resid[si]) for si in range(n)]
            if mid in scope_set:
                streams = list(zip(x_drift_n, x_dense_n))
                if fixed_plan is not None:
                    plan_source = fixed_plan.modules[mid]
                else:
                    granularity = HEAD if kind == "attn" else INNER_CHANNEL

                    def plan_source(new_module, strms, _mid=mid, _g=granularity):
                        rows = [(x, cfg.positional) for x, _ in strms]
                        scores, sim = _module_scores(
                            new_module, _mid, rows, cfg.activation, settings
                        )
                        recomputed_scores[_mid] = [float(s) for s in scores]
                        kept, removed = select_removed(scores, budgets[_mid], sim)
                        return ModulePlan(_g, kept, removed, dict(provenance))

                rm = recover_and_prune_module(
                    module, ctx, mid, streams, plan_source, cfg.positional
                )
                if kind == "attn":
                    working.blocks[bi].attn = rm.module
                else:
                    working.blocks[bi].ffn = rm.module
                plan_modules[mid] = rm.plan
                module_records.append(rm.record)
                for si in range(n):
                    dense_resid[si] += rm.dense_out[si]
                    drift_resid[si] += rm.drift_out[si]
            else:
                for si in range(n):
                    dense_resid[si] += _module_apply(module, x_dense_n[si], cfg.positional)[1]
                    drift_resid[si] += _module_apply(module, x_drift_n[si], cfg.positional)[1]

    final_plan = PruningPlan(plan_modules)
    working.applied_plan = final_plan
    manifest["modules"] = module_records
    if recomputed_scores:
        manifest["scores"] = recomputed_scores
    manifest["sparsity"] = sparsity_report(working, final_plan)
    return working, manifest
