"""Dense float32 kernels the engine is built on.

Every kernel is deterministic and, crucially, row-independent: the result
bits of output row i depend only on input row i (and the full right-hand
operand), never on how many other rows were batched into the same call.
`matmul` guarantees this by iterating rows explicitly and delegating each
row to one fixed GEMV routine, so caching a projection and recomputing it
later from the same inputs gives bit-identical values. The equivalence
oracles rely on this and compare bitwise.

Transcendentals (cos/sin for the rotary tables) are memoized per position
so the same position always yields the same bits regardless of batch shape;
+,-,*,/ and sqrt are correctly rounded by IEEE-754 and need no such care.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

# A Matrix is a 2-D C-contiguous float32 ndarray throughout the engine.
Matrix = np.ndarray

F32 = np.float32


def as_matrix(x, name: str = "matrix") -> Matrix:
    """Validate/coerce to a 2-D C-contiguous float32 array."""
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


@dataclass(frozen=True)
class CausalMask:
    """Lower-triangular visibility: row i sees columns j <= i + row_offset.

    row_offset=0 is the square prefill mask; a single decode row over L
    cached positions uses row_offset=L-1 (everything visible).
    """

    row_offset: int = 0


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Fixed-order product: out[i] = a[i] @ b, one GEMV per row.

    The per-row delegation (not a single GEMM) is what makes the result
    independent of the number of rows in `a`; do not "optimize" this into
    np.matmul, it would break the bitwise cache-vs-recompute contracts.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ValidationError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ValidationError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.float32)
    for i in range(a.shape[0]):
        out[i] = a[i] @ b
    return out


def masked_softmax_rows(logits: Matrix, mask: CausalMask | None, scale: float) -> Matrix:
    """Row softmax of scale*logits with causal masking.

    Masked positions are exactly 0 in the output; rows are stabilized by
    subtracting the row max over visible positions before exponentiation.
    """
    if scale <= 0:
        raise ValidationError(f"softmax scale must be positive, got {scale}")
    if logits.ndim != 2:
        raise ValidationError("logits must be 2-D")
    if mask is not None and mask.row_offset < 0:
        raise ValidationError("row_offset must be non-negative (every row needs a visible column)")
    rows, cols = logits.shape
    scaled = logits * F32(scale)
    if mask is not None:
        col = np.arange(cols)
        row = np.arange(rows)[:, None] + mask.row_offset
        visible = col[None, :] <= row
        scaled = np.where(visible, scaled, F32(-np.inf))
    m = np.max(scaled, axis=1, keepdims=True)
    e = np.exp(scaled - m)
    if mask is not None:
        e = np.where(visible, e, F32(0.0))
    denom = np.sum(e, axis=1, keepdims=True)
    return e / denom


def rms_norm(x: Matrix, gain: np.ndarray, eps: float) -> Matrix:
    """Divide each row by sqrt(mean of squares + eps), then scale by gain."""
    if eps <= 0:
        raise ValidationError(f"rms_norm eps must be positive, got {eps}")
    gain = np.asarray(gain, dtype=np.float32)
    if gain.ndim != 1 or gain.shape[0] != x.shape[1]:
        raise ValidationError(
            f"gain length {gain.shape} does not match row width {x.shape[1]}"
        )
    ms = np.mean(x * x, axis=1, keepdims=True)
    inv = F32(1.0) / np.sqrt(ms + F32(eps))
    return x * inv * gain


# Memoized rotary tables: (theta_base, half_dim) -> {position: (cos_row, sin_row)}.
# Rows are computed one position at a time with an identical call shape, so a
# position's table bits never depend on which other positions were requested.
_ROPE_TABLES: dict[tuple[float, int], dict[int, tuple[np.ndarray, np.ndarray]]] = {}
_ROPE_FREQS: dict[tuple[float, int], np.ndarray] = {}


def _rope_rows(theta_base: float, half: int, positions) -> tuple[np.ndarray, np.ndarray]:
    key = (float(theta_base), half)
    freqs = _ROPE_FREQS.get(key)
    if freqs is None:
        exponents = np.arange(half, dtype=np.float64) * (2.0 / (2 * half))
        freqs = theta_base ** (-exponents)
        _ROPE_FREQS[key] = freqs
    table = _ROPE_TABLES.setdefault(key, {})
    cos = np.empty((len(positions), half), dtype=np.float32)
    sin = np.empty((len(positions), half), dtype=np.float32)
    for i, p in enumerate(positions):
        p = int(p)
        row = table.get(p)
        if row is None:
            angle = p * freqs
            row = (np.cos(angle).astype(np.float32), np.sin(angle).astype(np.float32))
            table[p] = row
        cos[i] = row[0]
        sin[i] = row[1]
    return cos, sin


def apply_rope(qk: Matrix, positions, theta_base: float) -> Matrix:
    """Rotary rotation of adjacent column pairs by position-dependent angles.

    Position 0 is the identity; every rotation preserves the row norm. The
    output is a fresh contiguous array.
    """
    if theta_base <= 0:
        raise ValidationError("theta_base must be positive")
    if qk.ndim != 2 or qk.shape[1] % 2 != 0:
        raise ValidationError(f"apply_rope needs an even column count, got shape {qk.shape}")
    if len(positions) != qk.shape[0]:
        raise ValidationError(
            f"positions length {len(positions)} != row count {qk.shape[0]}"
        )
    half = qk.shape[1] // 2
    cos, sin = _rope_rows(theta_base, half, positions)
    x1 = qk[:, 0::2]
    x2 = qk[:, 1::2]
    out = np.empty_like(qk)
    out[:, 0::2] = x1 * cos - x2 * sin
    out[:, 1::2] = x1 * sin + x2 * cos
    return np.ascontiguousarray(out)


def silu(x: Matrix) -> Matrix:
    return x * (F32(1.0) / (F32(1.0) + np.exp(-x)))


def attention_scale(d_head: int) -> float:
    return 1.0 / math.sqrt(d_head)
