"""Blocked attention over a base/residual split KV layout.

Keys are rebuilt block by block as ``K_base + RoPE(K_res @ B_k)``; the base and
residual value accumulators share one online-softmax state and the residual
one is projected through ``B_v`` a single time after the last block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    DTYPE,
    MASK_VALUE,
    AttentionState,
    RopeTable,
    ShapeError,
    apply_rope,
    as_matrix,
    fast_matmul,
    online_softmax_update,
)


class NoAttendableKeys(ValueError):
    pass


@dataclass(frozen=True)
class AttentionConfig:
    num_heads: int
    num_kv_heads: int
    head_dim: int
    rank: int
    scale: float | None = None
    causal: bool = True
    block_size_keys: int = 16

    def __post_init__(self):
        if self.head_dim % 2:
            raise ValueError(f"head_dim must be even, got {self.head_dim}")
        if self.num_kv_heads < 1 or self.num_heads % self.num_kv_heads:
            raise ValueError(
                f"num_heads={self.num_heads} is not a multiple of num_kv_heads={self.num_kv_heads}"
            )
        if self.block_size_keys < 1:
            raise ValueError("block_size_keys must be >= 1")
        if self.rank < 0:
            raise ValueError("rank must be >= 0")

    @property
    def softmax_scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim) if self.scale is None else self.scale

    def kv_head_for(self, head: int) -> int:
        return head * self.num_kv_heads // self.num_heads


@dataclass
class DisaggKeyValueBlocks:
    """Key/value blocks for one kv head, base and residual covering the same tokens."""

    k_base: list[np.ndarray] = field(default_factory=list)
    v_base: list[np.ndarray] = field(default_factory=list)
    k_res: list[np.ndarray] = field(default_factory=list)
    v_res: list[np.ndarray] = field(default_factory=list)
    starts: list[int] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.starts)
        if not (len(self.k_base) == len(self.v_base) == len(self.k_res) == len(self.v_res) == n):
            raise ShapeError("base and residual block lists must have the same length")
        for kb, vb, kr, vr in zip(self.k_base, self.v_base, self.k_res, self.v_res):
            if not (kb.shape[0] == vb.shape[0] == kr.shape[0] == vr.shape[0]):
                raise ShapeError("base and residual blocks must cover the same token count")

    @classmethod
    def from_rows(cls, k_base, v_base, k_res, v_res, block_size: int, start: int = 0) -> "DisaggKeyValueBlocks":
        k_base, v_base = as_matrix(k_base, "k_base"), as_matrix(v_base, "v_base")
        total = k_base.shape[0]
        k_res = np.asarray(k_res, dtype=DTYPE).reshape(total, -1)
        v_res = np.asarray(v_res, dtype=DTYPE).reshape(total, -1)
        out = cls()
        for lo in range(0, total, block_size):
            hi = min(lo + block_size, total)
            out.k_base.append(k_base[lo:hi])
            out.v_base.append(v_base[lo:hi])
            out.k_res.append(k_res[lo:hi])
            out.v_res.append(v_res[lo:hi])
            out.starts.append(start + lo)
        return out

    @property
    def num_keys(self) -> int:
        return sum(b.shape[0] for b in self.k_base)

    def positions(self) -> np.ndarray:
        parts = [s + np.arange(b.shape[0]) for s, b in zip(self.starts, self.k_base)]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    def rows(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        def cat(blocks, width):
            return np.concatenate(blocks) if blocks else np.zeros((0, width), dtype=DTYPE)

        return (
            cat(self.k_base, 0),
            cat(self.v_base, 0),
            cat(self.k_res, 0),
            cat(self.v_res, 0),
        )


def reconstruct_key_block(k_base, k_res, b_k_head, positions, rope: RopeTable) -> np.ndarray:
    k_base = as_matrix(k_base, "k_base")
    k_lora = fast_matmul(np.asarray(k_res, dtype=DTYPE).reshape(k_base.shape[0], -1), b_k_head)
    if k_lora.shape != k_base.shape:
        raise ShapeError(f"K_res @ B_k gives {k_lora.shape}, base block is {k_base.shape}")
    return k_base + apply_rope(k_lora, positions, rope, k_base.shape[1])


def _as_rank_rows(b, rank: int, dtype) -> np.ndarray:
    # reshape(rank, -1) cannot infer the width when rank == 0
    b = np.asarray(b, dtype=dtype)
    return b if b.ndim == 2 and b.shape[0] == rank else b.reshape(rank, -1)


def _causal_bias(q_positions: np.ndarray, key_positions: np.ndarray) -> np.ndarray:
    return key_positions[None, :] > q_positions[:, None]


def _check_attendable(q_positions, blocks: DisaggKeyValueBlocks, causal: bool, rows: int) -> None:
    if blocks.num_keys == 0:
        raise NoAttendableKeys("attention over an empty key set")
    if causal:
        first = min(s for s, b in zip(blocks.starts, blocks.k_base) if b.shape[0])
        if q_positions.size and q_positions.min() < first:
            raise NoAttendableKeys(
                f"query at position {int(q_positions.min())} has no key at or before it"
            )


def residual_attention(
    q,
    blocks: DisaggKeyValueBlocks,
    b_k_head,
    b_v_head,
    cfg: AttentionConfig,
    rope: RopeTable,
    q_positions=None,
) -> np.ndarray:
    """softmax(Q K^T * scale) (V_base + V_res B_v) for one head, streamed over key blocks.

    ``q`` is already position-encoded. With ``cfg.causal`` a key at position p
    is visible to a query at position t only when p <= t.
    """
    q = as_matrix(q, "q")
    rows = q.shape[0]
    b_k_head = np.asarray(b_k_head, dtype=DTYPE).reshape(-1, q.shape[1])
    b_v_head = _as_rank_rows(b_v_head, b_k_head.shape[0], DTYPE)
    rank = b_k_head.shape[0]
    if cfg.causal:
        if q_positions is None:
            raise ValueError("causal attention needs query positions")
        q_positions = np.asarray(q_positions, dtype=np.int64).reshape(-1)
        if q_positions.shape[0] != rows:
            raise ShapeError(f"{q_positions.shape[0]} query positions for {rows} rows")
    _check_attendable(q_positions, blocks, cfg.causal, rows)

    scale = DTYPE(cfg.softmax_scale)
    state = AttentionState.initial(rows, blocks.v_base[0].shape[1], rank)
    last_q = int(q_positions.max()) if cfg.causal else None
    for kb, vb, kr, vr, start in zip(blocks.k_base, blocks.v_base, blocks.k_res, blocks.v_res, blocks.starts):
        size = kb.shape[0]
        if size == 0 or (cfg.causal and start > last_q):
            continue
        key_pos = start + np.arange(size)
        k = reconstruct_key_block(kb, kr, b_k_head, key_pos, rope)
        s = fast_matmul(q, k.T) * scale
        if cfg.causal:
            s = np.where(_causal_bias(q_positions, key_pos), DTYPE(MASK_VALUE), s)
        state = online_softmax_update(state, s, vb, vr)
    fused = state.acc + fast_matmul(state.acc_r, b_v_head)
    return (fused / state.l[:, None]).astype(DTYPE)


def _rope_complex(x: np.ndarray, positions: np.ndarray, theta: float) -> np.ndarray:
    # Pairs (2j, 2j+1) as complex numbers times e^{i p theta^(-2j/d)}, in float64.
    d = x.shape[1]
    z = x[:, 0::2] + 1j * x[:, 1::2]
    freqs = theta ** (-2.0 * np.arange(d // 2) / d)
    z = z * np.exp(1j * positions[:, None].astype(np.float64) * freqs[None, :])
    out = np.empty(x.shape, dtype=np.float64)
    out[:, 0::2] = z.real
    out[:, 1::2] = z.imag
    return out


def naive_attention_oracle(
    q,
    blocks: DisaggKeyValueBlocks,
    b_k_head,
    b_v_head,
    cfg: AttentionConfig,
    rope: RopeTable,
    q_positions=None,
) -> np.ndarray:
    """Materialize full K and V and apply one full-row softmax, in float64.

    Shares no code with ``residual_attention``: RoPE is redone with complex
    arithmetic and the blocking is ignored.
    """
    q = np.asarray(q, dtype=np.float64)
    if blocks.num_keys == 0:
        raise NoAttendableKeys("attention over an empty key set")
    kb, vb, kr, vr = (np.asarray(a, dtype=np.float64) for a in blocks.rows())
    pos = blocks.positions()
    b_k = np.asarray(b_k_head, dtype=np.float64).reshape(-1, q.shape[1])
    b_v = _as_rank_rows(b_v_head, b_k.shape[0], np.float64)
    k = kb + _rope_complex(kr.reshape(len(pos), -1) @ b_k, pos, rope.theta)
    v = vb + vr.reshape(len(pos), -1) @ b_v
    logits = (q @ k.T) * cfg.softmax_scale
    if cfg.causal:
        qp = np.asarray(q_positions, dtype=np.int64).reshape(-1)
        visible = pos[None, :] <= qp[:, None]
        if not visible.any(axis=1).all():
            raise NoAttendableKeys("a query row has no visible key")
        logits = np.where(visible, logits, -np.inf)
    logits = logits - logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w @ v


def split_heads(x: np.ndarray, heads: int, head_dim: int) -> list[np.ndarray]:
    if x.shape[1] != heads * head_dim:
        raise ShapeError(f"width {x.shape[1]} != {heads} heads x {head_dim}")
    return [x[:, h * head_dim : (h + 1) * head_dim] for h in range(heads)]


def multi_head_attention(
    q,
    k_base,
    v_base,
    k_res,
    v_res,
    b_k,
    b_v,
    cfg: AttentionConfig,
    rope: RopeTable,
    q_positions=None,
    key_start: int = 0,
    w_o=None,
    kernel=residual_attention,
) -> np.ndarray:
    """Run the per-head kernel over full-width rows and concatenate the heads.

    ``k_res``/``v_res`` are the shared rank-R rows; each kv head uses its own
    column slice of ``b_k``/``b_v``. Query head h reads kv head
    ``h * num_kv_heads // num_heads``. ``w_o``, when given, is applied last.
    """
    q = as_matrix(q, "q")
    hd = cfg.head_dim
    q_heads = split_heads(q, cfg.num_heads, hd)
    kb_heads = split_heads(as_matrix(k_base, "k_base"), cfg.num_kv_heads, hd)
    vb_heads = split_heads(as_matrix(v_base, "v_base"), cfg.num_kv_heads, hd)
    total = kb_heads[0].shape[0]
    k_res = np.asarray(k_res, dtype=DTYPE).reshape(total, -1)
    v_res = np.asarray(v_res, dtype=DTYPE).reshape(total, -1)
    rank = k_res.shape[1]
    b_k = _as_rank_rows(b_k, rank, DTYPE)
    b_v = _as_rank_rows(b_v, rank, DTYPE)
    bk_heads = split_heads(b_k, cfg.num_kv_heads, hd)
    bv_heads = split_heads(b_v, cfg.num_kv_heads, hd)

    kv_blocks = {}
    outs = []
    for h in range(cfg.num_heads):
        g = cfg.kv_head_for(h)
        if g not in kv_blocks:
            kv_blocks[g] = DisaggKeyValueBlocks.from_rows(
                kb_heads[g], vb_heads[g], k_res, v_res, cfg.block_size_keys, key_start
            )
        outs.append(kernel(q_heads[h], kv_blocks[g], bk_heads[g], bv_heads[g], cfg, rope, q_positions))
    out = np.concatenate(outs, axis=1).astype(DTYPE)
    if w_o is not None:
        out = fast_matmul(out, w_o)
    return out
