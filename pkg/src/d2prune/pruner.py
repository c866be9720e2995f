"""Turn importance scores, head-similarity candidates, and a sparsity target
into a pruning plan.

A plan maps each depth-2 module to the inner units it keeps: whole heads for
attention (head granularity), inner channels for feed-forward. Sparsity is
the fraction of prunable weight parameters removed, where prunable means the
attention/FFN weight matrices of blocks inside the target's block range;
embeddings, norms, and biases never count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PlanError

HEAD = "head"
INNER_CHANNEL = "inner_channel"


@dataclass
class ModulePlan:
    granularity: str
    kept: list[int]
    removed: list[int]
    provenance: dict = field(default_factory=dict)

    def validate(self, n_units: int, module_id: str):
        if self.granularity not in (HEAD, INNER_CHANNEL):
            raise PlanError(f"{module_id}: unknown granularity {self.granularity!r}")
        expected = HEAD if module_id.endswith(".attn") else INNER_CHANNEL
        if self.granularity != expected:
            raise PlanError(f"{module_id}: granularity must be {expected!r} (head-granularity rule)")
        all_ids = self.kept + self.removed
        if len(set(all_ids)) != len(all_ids):
            raise PlanError(f"{module_id}: duplicate indices in plan")
        if sorted(all_ids) != list(range(n_units)):
            bad = sorted(set(all_ids) - set(range(n_units)))
            if bad:
                raise PlanError(f"{module_id}: indices out of range: {bad[:8]} (units={n_units})")
            raise PlanError(f"{module_id}: kept+removed must partition 0..{n_units - 1}")
        if not self.kept:
            raise PlanError(f"{module_id}: plan keeps no units")


@dataclass
class PruningPlan:
    modules: dict[str, ModulePlan]

    def to_json_dict(self) -> dict:
        return {
            mid: {
                "granularity": mp.granularity,
                "kept": list(map(int, mp.kept)),
                "removed": list(map(int, mp.removed)),
                "provenance": mp.provenance,
            }
            for mid, mp in self.modules.items()
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "PruningPlan":
        modules = {}
        for mid, entry in d.items():
            modules[mid] = ModulePlan(
                granularity=entry["granularity"],
                kept=[int(i) for i in entry["kept"]],
                removed=[int(i) for i in entry["removed"]],
                provenance=entry.get("provenance", {}),
            )
        return cls(modules)

    def is_identity(self) -> bool:
        return all(not mp.removed for mp in self.modules.values())


@dataclass(frozen=True)
class ModuleInfo:
    """Prunable-unit accounting for one depth-2 module."""

    module_id: str
    kind: str  # "attn" | "ffn"
    block: int
    n_units: int
    unit_params: int  # weight parameters removed per unit


@dataclass(frozen=True)
class SparsityTarget:
    global_ratio: float
    block_range: tuple[int, int] | None = None  # [first, last), None = all blocks
    kinds: tuple[str, ...] = ("attn", "ffn")
    tolerance: float = 0.005

    def __post_init__(self):
        if not (0.0 <= self.global_ratio < 1.0):
            raise PlanError(f"global_ratio must be in [0, 1), got {self.global_ratio}")
        if self.block_range is not None and self.block_range[0] >= self.block_range[1]:
            raise PlanError(f"empty block range {self.block_range}")


def modules_from_graph(graph, target: SparsityTarget) -> list[ModuleInfo]:
    """Enumerate in-scope depth-2 modules of a (dense) model graph."""
    cfg = graph.config
    lo, hi = (0, cfg.n_layers) if target.block_range is None else target.block_range
    if lo < 0 or hi > cfg.n_layers:
        raise PlanError(f"block range [{lo}, {hi}) outside 0..{cfg.n_layers}")
    gated = cfg.ffn_kind == "gated"
    infos = []
    for b in range(lo, hi):
        block = graph.blocks[b]
        if "attn" in target.kinds:
            infos.append(
                ModuleInfo(
                    f"blocks.{b}.attn", "attn", b,
                    n_units=block.attn.n_heads,
                    unit_params=4 * cfg.d_model * block.attn.d_head,
                )
            )
        if "ffn" in target.kinds:
            infos.append(
                ModuleInfo(
                    f"blocks.{b}.ffn", "ffn", b,
                    n_units=block.ffn.wu.shape[1],
                    unit_params=(3 if gated else 2) * cfg.d_model,
                )
            )
    if not infos:
        raise PlanError("no prunable modules in scope")
    return infos


def _budget_at(ratio: float, info: ModuleInfo) -> int:
    # floor(x + 0.5) rounding; at least one unit always survives
    b = int(np.floor(ratio * info.n_units + 0.5))
    return min(b, info.n_units - 1)


def solve_uniform_budgets(modules: list[ModuleInfo], target: SparsityTarget) -> dict[str, int]:
    """Per-module removal budgets from a single uniform ratio.

    The ratio is found by bisection so the removed/prunable parameter
    fraction lands within target.tolerance of target.global_ratio.
    """
    total = sum(m.n_units * m.unit_params for m in modules)

    def achieved(r: float) -> float:
        return sum(_budget_at(r, m) * m.unit_params for m in modules) / total

    g, tol = target.global_ratio, target.tolerance
    if g == 0.0:
        return {m.module_id: 0 for m in modules}
    lo, hi = 0.0, 1.0
    if achieved(hi) < g - tol:
        raise PlanError(
            f"target sparsity {g:.4f} unattainable: max achievable "
            f"{achieved(hi):.4f} with one unit kept per module"
        )
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if achieved(mid) >= g - tol:
            hi = mid
        else:
            lo = mid
    got = achieved(hi)
    if got > g + tol:
        raise PlanError(
            f"target sparsity {g:.4f} unattainable within ±{tol:.3f}: "
            f"unit granularity jumps to {got:.4f}"
        )
    return {m.module_id: _budget_at(hi, m) for m in modules}


def select_removed(
    scores: np.ndarray,
    budget: int,
    similarity_order: list[tuple[int, float]] | None = None,
) -> tuple[list[int], list[int]]:
    """(kept, removed) unit ids for one module.

    Similarity candidates (pairs of unit id and witness divergence) are
    removed first, most redundant first; any remaining budget is filled by
    ascending score. Ties break by ascending index.
    """
    n = len(scores)
    if budget >= n:
        raise PlanError(f"budget {budget} would empty a module of {n} units")
    removed: list[int] = []
    if similarity_order:
        for head, div in sorted(similarity_order, key=lambda t: (t[1], t[0])):
            if len(removed) == budget:
                break
            if head not in removed:
                removed.append(head)
    if len(removed) < budget:
        taken = set(removed)
        order = np.argsort(np.asarray(scores, dtype=np.float64), kind="stable")
        for idx in order:
            if len(removed) == budget:
                break
            if int(idx) not in taken:
                removed.append(int(idx))
    removed_sorted = sorted(removed)
    kept = sorted(set(range(n)) - set(removed_sorted))
    return kept, removed_sorted


def build_plan(
    scores: dict[str, np.ndarray],
    similarity: dict[str, list[tuple[int, float]]] | None,
    target: SparsityTarget,
    modules: list[ModuleInfo],
    provenance: dict | None = None,
) -> PruningPlan:
    """Global plan from per-module scores under a uniform per-module ratio."""
    budgets = solve_uniform_budgets(modules, target)
    plan_modules: dict[str, ModulePlan] = {}
    for info in modules:
        if info.module_id not in scores:
            raise PlanError(f"scores missing for in-scope module {info.module_id}")
        s = np.asarray(scores[info.module_id], dtype=np.float64)
        if len(s) != info.n_units:
            raise PlanError(
                f"{info.module_id}: {len(s)} scores for {info.n_units} units"
            )
        sim = (similarity or {}).get(info.module_id) if info.kind == "attn" else None
        kept, removed = select_removed(s, budgets[info.module_id], sim)
        plan_modules[info.module_id] = ModulePlan(
            granularity=HEAD if info.kind == "attn" else INNER_CHANNEL,
            kept=kept,
            removed=removed,
            provenance=dict(provenance or {}),
        )
    return PruningPlan(plan_modules)


def sparsity_report(graph, plan: PruningPlan) -> dict:
    """Removed-parameter accounting per module and globally.

    Counts weight matrices only (the prunable set); the totals line also
    reports the full parameter count including embeddings, norms, biases.
    """
    cfg = graph.config
    gated = cfg.ffn_kind == "gated"
    per_module = {}
    removed_params = 0
    prunable_params = 0
    for mid, mp in sorted(plan.modules.items()):
        block = int(mid.split(".")[1])
        if mid.endswith(".attn"):
            unit = 4 * cfg.d_model * graph.blocks[block].attn.d_head
        else:
            unit = (3 if gated else 2) * cfg.d_model
        units = len(mp.kept) + len(mp.removed)
        mod_removed = len(mp.removed) * unit
        mod_prunable = units * unit
        removed_params += mod_removed
        prunable_params += mod_prunable
        per_module[mid] = {
            "units": units,
            "removed_units": len(mp.removed),
            "removed_params": mod_removed,
            "prunable_params": mod_prunable,
            "ratio": mod_removed / mod_prunable,
        }
    total_params = graph.param_count()
    return {
        "modules": per_module,
        "removed_params": removed_params,
        "prunable_params": prunable_params,
        "prunable_ratio": removed_params / prunable_params if prunable_params else 0.0,
        "total_params": total_params,
    }
