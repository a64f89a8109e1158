"""Dense float32 primitives shared by the model, kernel and engine.

Matrices are plain 2-D ``np.float32`` arrays. ``matmul`` is the reference
product with a fixed accumulation order; ``fast_matmul`` goes through BLAS and
is what the hot paths use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DTYPE = np.float32
# Substituted for masked logits; exp(MASK_VALUE - m) underflows to exactly 0.
MASK_VALUE = -1e30
DEFAULT_THETA = 10000.0


class ShapeError(ValueError):
    pass


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def _check_product(a: np.ndarray, b: np.ndarray) -> None:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul dimension mismatch: {a.shape[0]}x{a.shape[1]} @ {b.shape[0]}x{b.shape[1]}"
        )


def matmul(a, b) -> np.ndarray:
    """Reference product: out[i, j] = sum_k a[i, k] * b[k, j], summed k = 0, 1, ...

    Every partial product and partial sum is rounded to float32 in order, so the
    result is bit-identical to a scalar triple loop doing the same thing.
    """
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    _check_product(a, b)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=DTYPE)
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def fast_matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    _check_product(a, b)
    return a @ b


@dataclass(frozen=True)
class RopeTable:
    max_positions: int
    head_dim: int
    theta: float
    sin: np.ndarray  # (max_positions, head_dim // 2)
    cos: np.ndarray


def build_rope_table(max_positions: int, head_dim: int, theta: float = DEFAULT_THETA) -> RopeTable:
    if head_dim <= 0 or head_dim % 2:
        raise ValueError(f"head_dim must be a positive even number, got {head_dim}")
    if max_positions < 1:
        raise ValueError(f"max_positions must be >= 1, got {max_positions}")
    if theta <= 0:
        raise ValueError(f"theta must be positive, got {theta}")
    j = np.arange(head_dim // 2, dtype=np.float64)
    inv_freq = theta ** (-2.0 * j / head_dim)
    angles = np.arange(max_positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return RopeTable(
        max_positions=max_positions,
        head_dim=head_dim,
        theta=float(theta),
        sin=np.sin(angles).astype(DTYPE),
        cos=np.cos(angles).astype(DTYPE),
    )


def apply_rope(x, positions, table: RopeTable, head_dim: int | None = None, inverse: bool = False) -> np.ndarray:
    """Rotate each (2j, 2j+1) pair of every head slice by its row's absolute position.

    ``inverse`` rotates by the negated angles. The input is never modified.
    """
    x = as_matrix(x, "x")
    head_dim = table.head_dim if head_dim is None else head_dim
    if head_dim != table.head_dim:
        raise ShapeError(f"table built for head_dim={table.head_dim}, asked for {head_dim}")
    if x.shape[1] % head_dim:
        raise ShapeError(f"x has {x.shape[1]} columns, not a multiple of head_dim={head_dim}")
    pos = np.asarray(positions, dtype=np.int64).reshape(-1)
    if pos.shape[0] != x.shape[0]:
        raise ShapeError(f"{pos.shape[0]} positions for {x.shape[0]} rows")
    if pos.size and (pos.min() < 0 or pos.max() >= table.max_positions):
        raise IndexError(
            f"position {int(pos.max())} outside rope table of {table.max_positions} positions"
        )
    rows, cols = x.shape
    half = head_dim // 2
    pairs = x.reshape(rows, cols // head_dim, half, 2)
    sin = table.sin[pos][:, None, :]
    cos = table.cos[pos][:, None, :]
    if inverse:
        sin = -sin
    even, odd = pairs[..., 0], pairs[..., 1]
    out = np.empty_like(pairs)
    out[..., 0] = even * cos - odd * sin
    out[..., 1] = even * sin + odd * cos
    return out.reshape(rows, cols)


@dataclass
class AttentionState:
    """Running softmax statistics and both value accumulators for M query rows."""

    m: np.ndarray  # (M,)
    l: np.ndarray  # (M,)
    acc: np.ndarray  # (M, D_v)
    acc_r: np.ndarray  # (M, R)

    @classmethod
    def initial(cls, rows: int, value_dim: int, rank: int) -> "AttentionState":
        return cls(
            m=np.full(rows, -np.inf, dtype=DTYPE),
            l=np.zeros(rows, dtype=DTYPE),
            acc=np.zeros((rows, value_dim), dtype=DTYPE),
            acc_r=np.zeros((rows, rank), dtype=DTYPE),
        )

    def copy(self) -> "AttentionState":
        return AttentionState(self.m.copy(), self.l.copy(), self.acc.copy(), self.acc_r.copy())


def online_softmax_update(state: AttentionState, logits, v_base_block, v_res_block) -> AttentionState:
    logits = as_matrix(logits, "logits")
    v_base_block = as_matrix(v_base_block, "v_base_block")
    v_res_block = np.asarray(v_res_block, dtype=DTYPE).reshape(v_base_block.shape[0], -1)
    rows, keys = logits.shape
    if state.m.shape[0] != rows or v_base_block.shape[0] != keys:
        raise ShapeError(
            f"state for {state.m.shape[0]} rows, logits {logits.shape}, values {v_base_block.shape}"
        )
    if v_base_block.shape[1] != state.acc.shape[1] or v_res_block.shape[1] != state.acc_r.shape[1]:
        raise ShapeError("value block widths do not match the accumulators")
    m_new = np.maximum(state.m, logits.max(axis=1))
    scale = np.exp(state.m - m_new)
    p = np.exp(logits - m_new[:, None])
    l_new = state.l * scale + p.sum(axis=1, dtype=DTYPE)
    acc = state.acc * scale[:, None] + fast_matmul(p, v_base_block)
    acc_r = state.acc_r * scale[:, None] + fast_matmul(p, v_res_block)
    return AttentionState(m=m_new, l=l_new, acc=acc, acc_r=acc_r)


def rms_norm(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    ms = np.mean(np.square(x, dtype=DTYPE), axis=-1, keepdims=True)
    return (x / np.sqrt(ms + DTYPE(eps))).astype(DTYPE)


def relative_error(value, reference) -> float:
    """max |value - reference| over max |reference| (normwise, not elementwise)."""
    value = np.asarray(value, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    denom = max(float(np.max(np.abs(reference), initial=0.0)), 1e-30)
    return float(np.max(np.abs(value - reference), initial=0.0)) / denom
