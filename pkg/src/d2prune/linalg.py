"""Dense float32 kernels with float64 accumulation where precision matters.

Values are plain numpy arrays: float32 storage, row-major. Dot products,
Gram/cross-product accumulation, and softmax sums run in float64 because
least-squares reconstruction quality is sensitive to accumulation error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import SingularSystemError

SQRT_2_OVER_PI = 0.7978845608028654


def as_f32(x) -> np.ndarray:
    """Coerce to a C-contiguous float32 array."""
    return np.ascontiguousarray(x, dtype=np.float32)


@dataclass(frozen=True)
class SolveOptions:
    """Damping for normal-equation solves, as a fraction of mean(diag(gram))."""

    ridge_fraction: float = 1e-2

    def __post_init__(self):
        if self.ridge_fraction < 0:
            raise ValueError(f"ridge_fraction must be >= 0, got {self.ridge_fraction}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """c = a @ b with float64 accumulation, float32 result."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    c = a.astype(np.float64, copy=False) @ b.astype(np.float64, copy=False)
    return c.astype(np.float32)


def transpose(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.T)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return a * b


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; sums accumulated in float64.

    -inf entries are allowed (masked positions) and map to exactly 0.
    """
    return _softmax_rows_owned(np.array(x, dtype=np.float32))


def _softmax_rows_owned(x: np.ndarray) -> np.ndarray:
    """In-place softmax over a float32 array the caller owns."""
    m = np.max(x, axis=-1, keepdims=True)
    # rows that are entirely -inf would produce nan; not a supported input
    np.subtract(x, m, out=x)
    np.exp(x, out=x)
    s = np.sum(x, axis=-1, keepdims=True, dtype=np.float64)
    np.divide(x, s, out=x)
    return x


def solve_least_squares(gram: np.ndarray, xty: np.ndarray, opts: SolveOptions) -> np.ndarray:
    """Solve (gram + lam*I) W = xty by Cholesky, lam = ridge_fraction * mean(diag).

    gram must be symmetric PSD (an accumulated X^T X); columns of xty are
    solved jointly. Raises SingularSystemError if factorization fails.
    """
    g = np.asarray(gram, dtype=np.float64)
    y = np.asarray(xty, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ValueError(f"gram must be square, got {g.shape}")
    if y.ndim != 2 or y.shape[0] != g.shape[0]:
        raise ValueError(f"xty rows ({y.shape}) must match gram dim ({g.shape[0]})")
    lam = opts.ridge_fraction * float(np.mean(np.diag(g)))
    damped = g + lam * np.eye(g.shape[0])
    try:
        factor = scipy.linalg.cho_factor(damped, lower=True, check_finite=False)
        w = scipy.linalg.cho_solve(factor, y, check_finite=False)
    except (scipy.linalg.LinAlgError, np.linalg.LinAlgError) as exc:
        raise SingularSystemError(
            f"Cholesky factorization failed with ridge_fraction={opts.ridge_fraction}: {exc}"
        ) from exc
    return w.astype(np.float32)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float) -> np.ndarray:
    """Row-wise layer normalization over the last axis."""
    mean = np.mean(x, axis=-1, keepdims=True, dtype=np.float64)
    var = np.var(x.astype(np.float64, copy=False), axis=-1, keepdims=True)
    y = (x - mean) / np.sqrt(var + eps)
    return (y * gain + bias).astype(np.float32)


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    """Row-wise RMS normalization over the last axis."""
    ms = np.mean(np.square(x, dtype=np.float64), axis=-1, keepdims=True)
    y = x / np.sqrt(ms + eps)
    return (y * gain).astype(np.float32)


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation (the variant used by public GPT-2 checkpoints)."""
    x = x.astype(np.float32, copy=False)
    inner = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)
    return (0.5 * x * (1.0 + np.tanh(inner))).astype(np.float32)


def silu(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float32, copy=False)
    return (x / (1.0 + np.exp(-x.astype(np.float64)))).astype(np.float32)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0).astype(np.float32)


def argsort_descending(values: np.ndarray) -> np.ndarray:
    """Indices sorting values descending; equal values keep ascending index order."""
    v = np.asarray(values)
    if v.ndim != 1:
        raise ValueError(f"argsort_descending expects a vector, got shape {v.shape}")
    return np.argsort(-v, kind="stable")
