"""Streaming statistical accumulators over calibration activations.

CovarianceEstimate tracks the raw second moment E[x x^T] of module-input
rows (no mean subtraction: hidden states post-norm are treated as zero-mean,
so the estimate is exactly the expectation the channel metric needs).
DivergenceMatrix tracks the pairwise Jensen-Shannon distance between
attention heads, averaged over attention rows, with base-2 logs so every
entry lands in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS_LOG = 1e-12
ROW_SUM_TOL = 1e-4


class CovarianceEstimate:
    """Second moment X^T X / n accumulated in float64."""

    def __init__(self, dim: int):
        self.dim = dim
        self.n_rows = 0
        self._acc = np.zeros((dim, dim), dtype=np.float64)

    def update(self, x_rows: np.ndarray):
        x = np.asarray(x_rows)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"expected rows of dim {self.dim}, got shape {x.shape}")
        x64 = x.astype(np.float64, copy=False)
        self._acc += x64.T @ x64
        self.n_rows += x.shape[0]

    def merge(self, other: "CovarianceEstimate"):
        if other.dim != self.dim:
            raise ValueError(f"dim mismatch: {self.dim} vs {other.dim}")
        self._acc += other._acc
        self.n_rows += other.n_rows

    @property
    def second_moment(self) -> np.ndarray:
        if self.n_rows == 0:
            raise ValueError("no rows accumulated")
        m = self._acc / self.n_rows
        return 0.5 * (m + m.T)

    def quadratic_form(self, vectors: np.ndarray) -> np.ndarray:
        """v_i^T Sigma v_i for each column v_i of vectors."""
        sigma = self.second_moment
        v = np.asarray(vectors, dtype=np.float64)
        return np.einsum("di,de,ei->i", v, sigma, v)


def accumulate_covariance(est: CovarianceEstimate, x_rows: np.ndarray) -> CovarianceEstimate:
    est.update(x_rows)
    return est


class DivergenceMatrix:
    """Pairwise head divergence: mean over rows of the base-2 JS distance."""

    def __init__(self, h: int):
        self.h = h
        self.n_rows = 0
        self._acc = np.zeros((h, h), dtype=np.float64)

    def update(self, attn_probs: np.ndarray):
        """Fold a batch of attention probabilities [N, h, s, s].

        Each row must be a probability distribution over its causal support
        (future positions exactly 0). Rows t = 0 with single-point support
        are included; their divergence is 0 for every pair.
        """
        p = np.asarray(attn_probs)
        if p.ndim == 3:
            p = p[None]
        if p.ndim != 4 or p.shape[1] != self.h:
            raise ValueError(f"expected [N, {self.h}, s, s] probabilities, got {p.shape}")
        n, h, s, _ = p.shape
        sums = p.sum(axis=-1, dtype=np.float64)
        worst = float(np.abs(sums - 1.0).max())
        if worst > ROW_SUM_TOL:
            raise ValueError(f"attention row not normalized: |sum-1| = {worst:.3g}")
        for si in range(n):
            rows = p[si].astype(np.float64)  # [h, s, s]
            for i in range(h):
                for j in range(i + 1, h):
                    d = _js_distance_rows(rows[i], rows[j]).sum()
                    self._acc[i, j] += d
                    self._acc[j, i] += d
        self.n_rows += n * s

    def merge(self, other: "DivergenceMatrix"):
        if other.h != self.h:
            raise ValueError(f"head count mismatch: {self.h} vs {other.h}")
        self._acc += other._acc
        self.n_rows += other.n_rows

    @property
    def matrix(self) -> np.ndarray:
        if self.n_rows == 0:
            raise ValueError("no rows accumulated")
        d = self._acc / self.n_rows
        np.fill_diagonal(d, 0.0)
        return np.clip(d, 0.0, 1.0)

    def edge_list(self, tau: float) -> list[tuple[int, int, float]]:
        """Head pairs (i < j) whose divergence falls below tau."""
        d = self.matrix
        return [
            (i, j, float(d[i, j]))
            for i in range(self.h)
            for j in range(i + 1, self.h)
            if d[i, j] < tau
        ]

    def to_json_dict(self, tau: float | None = None) -> dict:
        out = {"h": self.h, "n_rows": self.n_rows, "matrix": self.matrix.tolist()}
        if tau is not None:
            out["tau"] = tau
            out["edges"] = [[i, j, v] for i, j, v in self.edge_list(tau)]
        return out

    def to_dot(self, tau: float, name: str = "heads") -> str:
        lines = [f'graph "{name}" {{']
        for i in range(self.h):
            lines.append(f"  h{i};")
        for i, j, v in self.edge_list(tau):
            lines.append(f'  h{i} -- h{j} [label="{v:.3f}"];')
        lines.append("}")
        return "\n".join(lines)


def _kl_terms(p: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Sum_k p_k log2(p_k / m_k) per row; zero-probability terms contribute 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.log2(np.maximum(p, EPS_LOG)) - np.log2(np.maximum(m, EPS_LOG))
    return np.where(p > 0.0, p * logs, 0.0).sum(axis=-1)


def _js_distance_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Base-2 Jensen-Shannon distance per row of two row-stochastic matrices."""
    m = 0.5 * (p + q)
    js = 0.5 * _kl_terms(p, m) + 0.5 * _kl_terms(q, m)
    return np.sqrt(np.maximum(js, 0.0))


def accumulate_divergence(dm: DivergenceMatrix, attn_batch: np.ndarray) -> DivergenceMatrix:
    dm.update(attn_batch)
    return dm


@dataclass
class ModelStats:
    """Per-module calibration statistics collected in one forward pass."""

    ffn_input_cov: dict[str, CovarianceEstimate] = field(default_factory=dict)
    attn_head_cov: dict[str, list[CovarianceEstimate]] = field(default_factory=dict)
    attn_divergence: dict[str, DivergenceMatrix] = field(default_factory=dict)
    n_rows: int = 0


def collect_stats(
    graph,
    tokens: np.ndarray,
    blocks: frozenset[int] | None = None,
    divergence: bool = True,
    head_cov: bool = True,
    ffn_cov: bool = True,
) -> ModelStats:
    """Run calibration tokens through the model, folding per-module statistics.

    Samples stream one at a time so the full [N, h, s, s] attention tensor is
    never materialized across blocks.
    """
    from .model import TapRequest, forward

    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None]
    stats = ModelStats()
    d_model = graph.config.d_model

    def observer(bi: int, bt):
        mid_a, mid_f = f"blocks.{bi}.attn", f"blocks.{bi}.ffn"
        if divergence:
            dm = stats.attn_divergence.setdefault(
                mid_a, DivergenceMatrix(graph.blocks[bi].attn.n_heads)
            )
            dm.update(bt.attn_probs)
        if head_cov:
            covs = stats.attn_head_cov.setdefault(
                mid_a,
                [CovarianceEstimate(d_model) for _ in range(graph.blocks[bi].attn.n_heads)],
            )
            for est, xhat in zip(covs, bt.head_value_inputs):
                est.update(xhat)
        if ffn_cov:
            est = stats.ffn_input_cov.setdefault(mid_f, CovarianceEstimate(d_model))
            est.update(bt.ffn_input)

    req = TapRequest(
        blocks=blocks,
        module_inputs=ffn_cov,
        attn_probs=divergence,
        head_value_inputs=head_cov,
        block_observer=observer,
    )
    for si in range(tokens.shape[0]):
        forward(graph, tokens[si : si + 1], req)
        stats.n_rows += tokens.shape[1]
    return stats
