"""Importance scores for inner channels and attention heads.

The channel metric is the expected squared contribution of an inner channel
to its module output: ||B_i||^2 (A_i^T Sigma A_i), where A_i is the channel's
level-1 column, B_i its level-2 row, and Sigma the input second moment. A 1/2
coefficient is applied for ReLU-family activations (GELU and SiLU are treated
as ReLU). With Sigma = I the metric degenerates to the data-free weight-norm
product. Attention heads are scored per head through the value path, with
the softmax-mixed input treated as the input to the value projection; heads
are additionally screened for redundancy by pairwise divergence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .stats import CovarianceEstimate, DivergenceMatrix

RELU_FAMILY = ("relu", "gelu", "silu")
HALF_COEFF = 0.5


@dataclass
class ImportanceScores:
    module_id: str
    granularity: str  # "inner_channel" | "head"
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(self.scores)) or np.any(self.scores < 0):
            raise ValueError(f"{self.module_id}: scores must be finite and >= 0")

    def to_json_dict(self) -> dict:
        return {
            "module": self.module_id,
            "granularity": self.granularity,
            "scores": [float(s) for s in self.scores],
        }


@dataclass
class SimilarityCandidates:
    module_id: str
    tau: float
    heads: list[int]
    witnesses: list[tuple[int, float]]  # (partner head, divergence), parallel to heads

    def ordering(self) -> list[tuple[int, float]]:
        """(head, witness divergence) pairs for removal ordering."""
        return [(h, w[1]) for h, w in zip(self.heads, self.witnesses)]


def activation_coefficient(activation: str) -> float:
    return HALF_COEFF if activation in RELU_FAMILY else 1.0


def second_moment_ffn(
    wu: np.ndarray,
    wg: np.ndarray | None,
    wd: np.ndarray,
    sigma: CovarianceEstimate | np.ndarray,
    activation: str,
    module_id: str = "ffn",
    gated_single_output_norm: bool = False,
) -> ImportanceScores:
    """Per-inner-channel scores for a feed-forward module.

    Standard FFN: coeff * ||D_i||^2 (u_i^T Sigma u_i). Gated FFN: product of
    the up-path metric (linear, no 1/2) and the gate-path metric (with 1/2);
    gated_single_output_norm drops one of the two ||D_i||^2 factors.
    """
    if isinstance(sigma, CovarianceEstimate):
        if sigma.dim != wu.shape[0]:
            raise ValueError(f"sigma dim {sigma.dim} != input dim {wu.shape[0]}")
        sig = sigma.second_moment
    else:
        sig = np.asarray(sigma, dtype=np.float64)
    u = wu.astype(np.float64)
    base_u = np.einsum("di,de,ei->i", u, sig, u)
    d_norm2 = np.sum(wd.astype(np.float64) ** 2, axis=1)
    if wg is None:
        scores = activation_coefficient(activation) * d_norm2 * base_u
    else:
        g = wg.astype(np.float64)
        base_g = np.einsum("di,de,ei->i", g, sig, g)
        m_up = d_norm2 * base_u
        m_gate = HALF_COEFF * d_norm2 * base_g
        scores = m_up * m_gate
        if gated_single_output_norm:
            scores = scores / np.where(d_norm2 > 0, d_norm2, 1.0)
    return ImportanceScores(module_id, "inner_channel", np.maximum(scores, 0.0))


def second_moment_attention(
    attn,
    per_head_sigma: list[CovarianceEstimate] | CovarianceEstimate,
    module_id: str = "attn",
) -> ImportanceScores:
    """Per-head scores: sum over the head's inner channels of
    ||O_c||^2 (v_c^T Sigma_head v_c), the value path being linear (no 1/2).

    per_head_sigma holds one estimate of the softmax-mixed input per head; a
    single shared estimate is accepted as a memory-saving approximation.
    """
    h, d_head = attn.n_heads, attn.d_head
    shared = isinstance(per_head_sigma, CovarianceEstimate)
    if not shared and len(per_head_sigma) != h:
        raise ValueError(f"{module_id}: {len(per_head_sigma)} covariances for {h} heads")
    scores = np.zeros(h, dtype=np.float64)
    o_norm2 = np.sum(attn.wo.astype(np.float64) ** 2, axis=1)
    for i in range(h):
        cols = attn.head_cols(i)
        sigma = per_head_sigma if shared else per_head_sigma[i]
        v_forms = sigma.quadratic_form(attn.wv[:, cols])
        scores[i] = float(np.dot(o_norm2[cols], v_forms))
    return ImportanceScores(module_id, "head", np.maximum(scores, 0.0))


def similarity_candidates(dm: DivergenceMatrix, tau: float, module_id: str = "attn") -> SimilarityCandidates:
    """Candidate heads for removal: scan pairs (i, j), i < j, in row-major
    order; append i when D[i][j] < tau and neither i nor j was appended yet."""
    d = dm.matrix
    heads: list[int] = []
    witnesses: list[tuple[int, float]] = []
    taken: set[int] = set()
    for i in range(dm.h):
        for j in range(i + 1, dm.h):
            if d[i, j] < tau and i not in taken and j not in taken:
                heads.append(i)
                witnesses.append((j, float(d[i, j])))
                taken.add(i)
    return SimilarityCandidates(module_id, tau, heads, witnesses)


def _head_concat_norms(attn, kind: str) -> np.ndarray:
    """Per-head magnitude over the head's level-1 columns and level-2 rows."""
    scores = np.zeros(attn.n_heads, dtype=np.float64)
    for i in range(attn.n_heads):
        cols = attn.head_cols(i)
        parts = [attn.wq[:, cols], attn.wk[:, cols], attn.wv[:, cols], attn.wo[cols, :]]
        flat = np.concatenate([p.astype(np.float64).ravel() for p in parts])
        scores[i] = np.abs(flat).sum() if kind == "l1" else float(np.sqrt(np.sum(flat**2)))
    return scores


def _channel_concat_norms(ffn, kind: str) -> np.ndarray:
    parts = [ffn.wu.astype(np.float64).T, ffn.wd.astype(np.float64)]
    if ffn.wg is not None:
        parts.insert(1, ffn.wg.astype(np.float64).T)
    flat = np.concatenate(parts, axis=1)  # one row per inner channel
    if kind == "l1":
        return np.abs(flat).sum(axis=1)
    return np.sqrt(np.sum(flat**2, axis=1))


def baseline_scores(module, kind: str, module_id: str, seed: int = 0) -> ImportanceScores:
    """L1/L2 magnitude or seeded-random scores, at the module's granularity."""
    is_attn = hasattr(module, "wq")
    granularity = "head" if is_attn else "inner_channel"
    n_units = module.n_heads if is_attn else module.wu.shape[1]
    if kind == "random":
        rng = np.random.default_rng(seed)
        scores = rng.uniform(size=n_units)
    elif kind in ("l1", "l2"):
        scores = _head_concat_norms(module, kind) if is_attn else _channel_concat_norms(module, kind)
    else:
        raise ValueError(f"unknown baseline kind {kind!r}")
    return ImportanceScores(module_id, granularity, scores)
