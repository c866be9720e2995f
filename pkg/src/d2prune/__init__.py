"""Retraining-free structured pruning for transformer language models.

Depth-2 modules (attention qkv->o, feed-forward up[/gate]->down) are pruned
at inner-channel / whole-head granularity from a single calibration pass:
channels are scored by a second-moment metric, redundant heads by pairwise
Jensen-Shannon divergence, and accumulated error is repaired module by
module with two-step least-squares weight reconstruction.

Exports resolve lazily so the CLI can cap BLAS threads before numpy loads.
"""

__version__ = "0.1.0"

_EXPORTS = {
    "calib": [
        "CalibrationBatch", "CalibrationSpec", "build_batches",
        "load_calibration", "save_calibration",
    ],
    "checkpoint": [
        "ModelConfig", "TokenCorpus", "load_corpus", "load_model",
        "load_plan", "save_corpus", "save_model",
    ],
    "errors": ["CheckpointError", "D2PError", "PlanError", "SingularSystemError"],
    "evaluation": ["PerplexityReport", "inspect", "perplexity"],
    "linalg": ["SolveOptions"],
    "metrics": [
        "ImportanceScores", "SimilarityCandidates", "baseline_scores",
        "second_moment_attention", "second_moment_ffn", "similarity_candidates",
    ],
    "model": [
        "Greedy", "ModelGraph", "TopK", "apply_plan", "forward", "generate",
        "graph_from_tensors", "graph_to_tensors", "load_graph", "save_graph",
    ],
    "pruner": [
        "ModulePlan", "PruningPlan", "SparsityTarget", "build_plan",
        "solve_uniform_budgets", "sparsity_report",
    ],
    "recovery": [
        "PRUNE_ONLY", "PRUNE_WITH_RECOVERY", "PipelineSettings",
        "RecoveryContext", "capture_dense_targets", "recover_and_prune_module",
        "run_pipeline",
    ],
    "stats": [
        "CovarianceEstimate", "DivergenceMatrix", "ModelStats",
        "accumulate_covariance", "accumulate_divergence", "collect_stats",
    ],
}

_NAME_TO_MODULE = {name: mod for mod, names in _EXPORTS.items() for name in names}
__all__ = sorted(_NAME_TO_MODULE)


def __getattr__(name):
    module = _NAME_TO_MODULE.get(name)
    if module is None:
        raise AttributeError(f"module 'd2prune' has no attribute {name!r}")
    import importlib

    value = getattr(importlib.import_module(f".{module}", __name__), name)
    globals()[name] = value
    return value


def __dir__():
    return sorted(set(globals()) | set(__all__))
