from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disaggkv.attention import (
    AttentionConfig,
    DisaggKeyValueBlocks,
    NoAttendableKeys,
    multi_head_attention,
    naive_attention_oracle,
    residual_attention,
)
from disaggkv.numerics import DTYPE, apply_rope, build_rope_table, relative_error
from disaggkv.verify import BLOCK_SIZES, attention_cases, eager_fusion_attention, make_attention_case


def run(case, kernel=residual_attention, block=None):
    return kernel(case.q, case.blocks(block), case.b_k, case.b_v, case.cfg, case.rope, case.q_positions)


def test_instance_set_covers_every_shape_axis():
    cases = attention_cases(100)
    assert {c.cfg.head_dim for c in cases} == {16, 32, 64}
    assert {c.cfg.rank for c in cases} == {4, 8, 16}
    assert {c.cfg.block_size_keys for c in cases} == set(BLOCK_SIZES)
    assert {c.cfg.causal for c in cases} == {True, False}
    assert all(1 <= c.q.shape[0] <= 8 and 1 <= len(c.key_positions) <= 512 for c in cases)


@pytest.mark.parametrize("seed", range(0, 100, 9))
def test_kernel_matches_dense_oracle(seed):
    case = make_attention_case(seed)
    ref = run(case, naive_attention_oracle)
    assert relative_error(run(case), ref) <= 1e-5


@pytest.mark.parametrize("seed", range(3, 100, 11))
def test_late_fusion_equals_in_loop_fusion(seed):
    case = make_attention_case(seed)
    assert relative_error(run(case), run(case, eager_fusion_attention)) <= 1e-6


@pytest.mark.parametrize("seed", [1, 17, 40])
def test_result_does_not_depend_on_block_size(seed):
    case = make_attention_case(seed)
    outs = [run(case, block=b) for b in BLOCK_SIZES]
    for out in outs[1:]:
        assert relative_error(out, outs[0]) <= 1e-5


def test_three_keys_by_hand():
    # head_dim 2, rank 1, positions 0..2, non-causal, scale 1; every sum written out.
    rope = build_rope_table(4, 2)
    cfg = AttentionConfig(num_heads=1, num_kv_heads=1, head_dim=2, rank=1, scale=1.0, causal=False, block_size_keys=2)
    k_base = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    v_base = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    k_res = np.array([[1.0], [0.0], [-1.0]])
    v_res = np.array([[0.5], [1.0], [0.0]])
    b_k, b_v = np.array([[0.5, 0.0]]), np.array([[2.0, -2.0]])
    q = np.array([[1.0, 0.5]])
    blocks = DisaggKeyValueBlocks.from_rows(k_base, v_base, k_res, v_res, cfg.block_size_keys)
    out = residual_attention(q, blocks, b_k, b_v, cfg, rope)

    logits, values = [], []
    for p in range(3):
        c, s = math.cos(p), math.sin(p)
        lx, ly = k_res[p, 0] * b_k[0, 0], k_res[p, 0] * b_k[0, 1]
        key = (k_base[p, 0] + lx * c - ly * s, k_base[p, 1] + lx * s + ly * c)
        logits.append(q[0, 0] * key[0] + q[0, 1] * key[1])
        values.append(v_base[p] + v_res[p, 0] * b_v[0])
    w = [math.exp(z) for z in logits]
    expect = sum(wi * v for wi, v in zip(w, values)) / sum(w)
    np.testing.assert_allclose(out[0], expect, rtol=1e-6)


def test_causal_rows_ignore_future_keys():
    case = make_attention_case(5)
    rng = np.random.default_rng(0)
    hd, keys = case.cfg.head_dim, 40
    case.rope = build_rope_table(keys, hd)
    cfg = AttentionConfig(num_heads=1, num_kv_heads=1, head_dim=hd, rank=case.cfg.rank, causal=True, block_size_keys=7)
    x = rng.standard_normal((keys, 32)).astype(DTYPE)
    rows = lambda x: (  # noqa: E731
        apply_rope(x @ case.w_k, np.arange(len(x)), case.rope), x @ case.w_v, x @ case.a_k, x @ case.a_v
    )
    q_pos = np.array([10, 20])
    q = rng.standard_normal((2, hd)).astype(DTYPE)
    full = residual_attention(q, DisaggKeyValueBlocks.from_rows(*rows(x), 7), case.b_k, case.b_v, cfg, case.rope, q_pos)
    garbled = x.copy()
    garbled[21:] = rng.standard_normal((keys - 21, 32))
    other = residual_attention(q, DisaggKeyValueBlocks.from_rows(*rows(garbled), 7), case.b_k, case.b_v, cfg, case.rope, q_pos)
    assert np.array_equal(full[1], other[1])
    garbled[11:] = rng.standard_normal((keys - 11, 32))
    third = residual_attention(q, DisaggKeyValueBlocks.from_rows(*rows(garbled), 7), case.b_k, case.b_v, cfg, case.rope, q_pos)
    assert np.array_equal(full[0], third[0])


def test_empty_and_unattendable_keys_raise():
    rope = build_rope_table(8, 2)
    cfg = AttentionConfig(num_heads=1, num_kv_heads=1, head_dim=2, rank=1, causal=True, block_size_keys=2)
    with pytest.raises(NoAttendableKeys):
        residual_attention(np.ones((1, 2)), DisaggKeyValueBlocks(), np.ones((1, 2)), np.ones((1, 2)), cfg, rope, [0])
    late = DisaggKeyValueBlocks.from_rows(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 1)), np.ones((2, 1)), 2, start=4)
    with pytest.raises(NoAttendableKeys):
        residual_attention(np.ones((1, 2)), late, np.ones((1, 2)), np.ones((1, 2)), cfg, rope, [3])


def _gqa_inputs(seed, heads=4, kv_heads=2, hd=8, rank=2, keys=12):
    rng = np.random.default_rng(seed)
    f = lambda *s: rng.standard_normal(s).astype(DTYPE)  # noqa: E731
    cfg = AttentionConfig(num_heads=heads, num_kv_heads=kv_heads, head_dim=hd, rank=rank, causal=False, block_size_keys=5)
    return cfg, f(3, heads * hd), f(keys, kv_heads * hd), f(keys, kv_heads * hd), f(keys, rank), f(keys, rank), f(rank, kv_heads * hd), f(rank, kv_heads * hd)


def test_grouped_query_heads_read_their_own_kv_group():
    cfg, q, kb, vb, kr, vr, bk, bv = _gqa_inputs(0)
    rope = build_rope_table(16, cfg.head_dim)
    out = multi_head_attention(q, kb, vb, kr, vr, bk, bv, cfg, rope)
    # Overwrite kv group 1 with sentinel values: only heads 2 and 3 may change.
    vb2 = vb.copy()
    vb2[:, cfg.head_dim :] = 1e3
    out2 = multi_head_attention(q, kb, vb2, kr, vr, bk, bv, cfg, rope)
    hd = cfg.head_dim
    assert np.array_equal(out[:, : 2 * hd], out2[:, : 2 * hd])
    assert np.all(np.abs(out2[:, 2 * hd :]) > 100)


def test_multi_head_matches_per_head_oracle():
    cfg, q, kb, vb, kr, vr, bk, bv = _gqa_inputs(3)
    rope = build_rope_table(16, cfg.head_dim)
    out = multi_head_attention(q, kb, vb, kr, vr, bk, bv, cfg, rope)
    hd = cfg.head_dim
    for h in range(cfg.num_heads):
        g = cfg.kv_head_for(h)
        cols = slice(g * hd, (g + 1) * hd)
        blocks = DisaggKeyValueBlocks.from_rows(kb[:, cols], vb[:, cols], kr, vr, 3)
        ref = naive_attention_oracle(q[:, h * hd : (h + 1) * hd], blocks, bk[:, cols], bv[:, cols], cfg, rope)
        assert relative_error(out[:, h * hd : (h + 1) * hd], ref) <= 1e-5


def test_rank_zero_is_plain_attention():
    rng = np.random.default_rng(2)
    cfg = AttentionConfig(num_heads=2, num_kv_heads=2, head_dim=4, rank=0, causal=False, block_size_keys=4)
    rope = build_rope_table(8, 4)
    q, kb, vb = (rng.standard_normal((n, 8)).astype(DTYPE) for n in (2, 6, 6))
    z = np.zeros((6, 0), dtype=DTYPE)
    out = multi_head_attention(q, kb, vb, z, z, np.zeros((0, 8)), np.zeros((0, 8)), cfg, rope)
    for h in range(2):
        s = q[:, 4 * h : 4 * h + 4] @ kb[:, 4 * h : 4 * h + 4].T / 2.0
        w = np.exp(s - s.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(out[:, 4 * h : 4 * h + 4], w @ vb[:, 4 * h : 4 * h + 4], rtol=1e-5, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), block=st.sampled_from(BLOCK_SIZES))
def test_block_lists_cover_rows_in_order(seed, block):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 80))
    rows = [rng.standard_normal((n, w)) for w in (4, 4, 2, 2)]
    blocks = DisaggKeyValueBlocks.from_rows(*rows, block, start=3)
    assert blocks.num_keys == n
    assert np.array_equal(blocks.positions(), 3 + np.arange(n))
    for got, want in zip(blocks.rows(), rows):
        np.testing.assert_array_equal(got, want.astype(DTYPE))
