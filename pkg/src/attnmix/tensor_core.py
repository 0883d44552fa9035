"""Dense float64 arithmetic and the causal scaled-dot-product attention kernel.

Tensors are plain ``numpy.ndarray`` objects. Every public function checks
shapes explicitly and never relies on broadcasting between operands.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

# Finite stand-in for -inf. exp(NEG_INF - rowmax) underflows to exactly 0.0.
NEG_INF = -1e30
# Any logit at or below this is treated as masked when checking degenerate rows.
_MASKED_BELOW = NEG_INF / 2

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(ValueError):
    """A softmax row has every entry masked."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf escaped a computation."""


def as_tensor(x, ndim: int | None = None, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    return arr


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a, 2, "a")
    b = as_tensor(b, 2, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return _check_finite(a @ b, "matmul")


@dataclass(frozen=True)
class CausalMask:
    """Additive mask: 0 where key j <= query i, NEG_INF where j > i."""

    length: int

    def __post_init__(self):
        if self.length < 1:
            raise DimensionError("causal mask length must be >= 1")

    @cached_property
    def additive(self) -> np.ndarray:
        m = np.triu(np.full((self.length, self.length), NEG_INF, dtype=DTYPE), k=1)
        m.setflags(write=False)
        return m

    def admissible(self, i: int, j: int) -> bool:
        return j <= i


def _softmax_lastaxis(x: np.ndarray) -> np.ndarray:
    row_max = x.max(axis=-1, keepdims=True)
    if (row_max <= _MASKED_BELOW).any():
        raise DegenerateRowError("softmax row is entirely masked")
    e = np.exp(x - row_max)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x) -> np.ndarray:
    """Row-wise softmax with max subtraction. NEG_INF entries map to exactly 0."""
    x = as_tensor(x, 2, "x")
    if np.isnan(x).any() or np.isposinf(x).any():
        raise NonFiniteError("softmax input contains NaN or +inf")
    # a genuine -inf is accepted and treated like the sentinel
    x = np.maximum(x, NEG_INF)
    return _check_finite(_softmax_lastaxis(x), "softmax_rows")


def masked_attention(q, k, v, mask: CausalMask) -> tuple[np.ndarray, np.ndarray]:
    """Single-head causal attention. Returns (weights L×L, output L×d_v)."""
    q = as_tensor(q, 2, "q")
    k = as_tensor(k, 2, "k")
    v = as_tensor(v, 2, "v")
    L, d_k = q.shape
    if L == 0:
        raise DimensionError("empty sequence")
    if k.shape != (L, d_k):
        raise DimensionError(f"k shape {k.shape} does not match q shape {q.shape}")
    if v.shape[0] != L:
        raise DimensionError(f"v has {v.shape[0]} rows, expected {L}")
    if mask.length != L:
        raise DimensionError(f"mask length {mask.length} != sequence length {L}")
    logits = matmul(q, k.T) / np.sqrt(d_k) + mask.additive
    weights = softmax_rows(logits)
    return weights, matmul(weights, v)


def multihead_causal_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                               mask: CausalMask) -> tuple[np.ndarray, np.ndarray]:
    """Head-batched form of :func:`masked_attention` on H×L×d arrays.

    Used by the decoder stack; numerically the same per-head computation.
    """
    H, L, d_k = q.shape
    if k.shape != (H, L, d_k) or v.shape[:2] != (H, L):
        raise DimensionError(f"q {q.shape}, k {k.shape}, v {v.shape} disagree")
    if mask.length != L:
        raise DimensionError(f"mask length {mask.length} != sequence length {L}")
    logits = np.matmul(q, k.transpose(0, 2, 1)) / np.sqrt(d_k) + mask.additive
    weights = _softmax_lastaxis(logits)
    out = np.matmul(weights, v)
    return weights, _check_finite(out, "attention output")
