from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disaggkv.numerics import (
    DTYPE,
    AttentionState,
    ShapeError,
    apply_rope,
    build_rope_table,
    fast_matmul,
    matmul,
    online_softmax_update,
    relative_error,
    rms_norm,
)


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]), dtype=DTYPE)
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = DTYPE(0)
            for k in range(a.shape[1]):
                acc = DTYPE(acc + DTYPE(a[i, k] * b[k, j]))
            out[i, j] = acc
    return out


@pytest.mark.parametrize("shape", [(1, 1, 1), (3, 5, 2), (4, 7, 6), (2, 16, 3)])
def test_matmul_is_bit_identical_to_scalar_loop(shape):
    rng = np.random.default_rng(sum(shape))
    m, k, n = shape
    a = rng.standard_normal((m, k)).astype(DTYPE)
    b = rng.standard_normal((k, n)).astype(DTYPE)
    assert np.array_equal(matmul(a, b), triple_loop(a, b))


def test_fast_matmul_tracks_reference():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((9, 64)).astype(DTYPE)
    b = rng.standard_normal((64, 33)).astype(DTYPE)
    assert relative_error(fast_matmul(a, b), matmul(a, b)) < 1e-6


def test_matmul_rejects_bad_shapes():
    with pytest.raises(ShapeError, match="2x3 @ 4x1"):
        matmul(np.ones((2, 3)), np.ones((4, 1)))
    with pytest.raises(ShapeError):
        fast_matmul(np.ones(3), np.ones((3, 1)))


def test_rope_single_pair_values():
    # head_dim 2: one pair rotated by exactly p radians.
    table = build_rope_table(8, 2)
    out = apply_rope(np.array([[1.0, 0.0], [0.0, 1.0]]), [1, 3], table)
    np.testing.assert_allclose(out[0], [math.cos(1), math.sin(1)], atol=1e-7)
    np.testing.assert_allclose(out[1], [-math.sin(3), math.cos(3)], atol=1e-7)


def test_rope_second_pair_uses_slower_frequency():
    table = build_rope_table(4, 4, theta=100.0)
    # pair 1 of a 4-wide head turns at 100^(-1/2) = 0.1 rad per position
    out = apply_rope(np.array([[0.0, 0.0, 1.0, 0.0]]), [2], table)
    np.testing.assert_allclose(out[0, 2:], [math.cos(0.2), math.sin(0.2)], atol=1e-7)


def test_rope_validates_inputs():
    table = build_rope_table(4, 4)
    with pytest.raises(IndexError):
        apply_rope(np.ones((1, 4)), [4], table)
    with pytest.raises(ShapeError):
        apply_rope(np.ones((1, 6)), [0], table)
    with pytest.raises(ShapeError):
        apply_rope(np.ones((2, 4)), [0], table)
    with pytest.raises(ValueError):
        build_rope_table(4, 3)


vectors = st.integers(0, 2**31 - 1)


@settings(max_examples=60, deadline=None)
@given(seed=vectors, pos=st.integers(0, 511), heads=st.integers(1, 3))
def test_rope_preserves_pair_norms_and_inverts(seed, pos, heads):
    table = build_rope_table(512, 8)
    x = np.random.default_rng(seed).standard_normal((1, 8 * heads)).astype(DTYPE)
    y = apply_rope(x, [pos], table)
    pairs = lambda v: np.hypot(v[0, 0::2], v[0, 1::2])  # noqa: E731
    np.testing.assert_allclose(pairs(y), pairs(x), rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(apply_rope(y, [pos], table, inverse=True), x, atol=1e-5)


@settings(max_examples=60, deadline=None)
@given(seed=vectors, p=st.integers(0, 200), k=st.integers(0, 200), shift=st.integers(0, 200))
def test_rope_dot_products_depend_only_on_offset(seed, p, k, shift):
    table = build_rope_table(512, 16)
    rng = np.random.default_rng(seed)
    q, key = rng.standard_normal((2, 1, 16)).astype(DTYPE)
    d1 = (apply_rope(q, [p], table) @ apply_rope(key, [k], table).T).item()
    d2 = (apply_rope(q, [p + shift], table) @ apply_rope(key, [k + shift], table).T).item()
    assert d1 == pytest.approx(d2, rel=1e-4, abs=1e-4)


@settings(max_examples=40, deadline=None)
@given(seed=vectors, a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_rope_is_linear_at_a_fixed_position(seed, a, b):
    table = build_rope_table(64, 8)
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 3, 8)).astype(DTYPE)
    pos = rng.integers(0, 64, size=3)
    lhs = apply_rope(a * x + b * y, pos, table)
    rhs = a * apply_rope(x, pos, table) + b * apply_rope(y, pos, table)
    np.testing.assert_allclose(lhs, rhs, atol=1e-4)


def test_rope_does_not_modify_input():
    x = np.ones((2, 4), dtype=DTYPE)
    apply_rope(x, [1, 2], build_rope_table(4, 4))
    assert np.all(x == 1)


@settings(max_examples=50, deadline=None)
@given(seed=vectors, keys=st.integers(1, 40), cuts=st.lists(st.integers(1, 39), max_size=5))
def test_online_softmax_matches_full_softmax(seed, keys, cuts):
    rng = np.random.default_rng(seed)
    logits = (rng.standard_normal((3, keys)) * 4).astype(DTYPE)
    v = rng.standard_normal((keys, 5)).astype(DTYPE)
    vr = rng.standard_normal((keys, 2)).astype(DTYPE)
    bounds = sorted({0, keys, *(c for c in cuts if c < keys)})
    state = AttentionState.initial(3, 5, 2)
    for lo, hi in zip(bounds, bounds[1:]):
        state = online_softmax_update(state, logits[:, lo:hi], v[lo:hi], vr[lo:hi])
    w = np.exp(logits.astype(np.float64) - logits.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(state.acc / state.l[:, None], w @ v, atol=1e-5)
    np.testing.assert_allclose(state.acc_r / state.l[:, None], w @ vr, atol=1e-5)


def test_online_softmax_state_is_not_mutated():
    state = AttentionState.initial(1, 2, 1)
    before = state.copy()
    online_softmax_update(state, np.zeros((1, 2)), np.ones((2, 2)), np.ones((2, 1)))
    assert np.array_equal(state.l, before.l) and np.all(np.isneginf(state.m))


def test_online_softmax_shape_checks():
    state = AttentionState.initial(2, 3, 1)
    with pytest.raises(ShapeError):
        online_softmax_update(state, np.zeros((1, 4)), np.zeros((4, 3)), np.zeros((4, 1)))
    with pytest.raises(ShapeError):
        online_softmax_update(state, np.zeros((2, 4)), np.zeros((4, 2)), np.zeros((4, 1)))


def test_rms_norm_gives_unit_rms():
    x = np.random.default_rng(0).standard_normal((4, 32)).astype(DTYPE) * 7
    np.testing.assert_allclose(np.sqrt(np.mean(rms_norm(x) ** 2, axis=1)), 1.0, rtol=1e-4)


def test_relative_error_is_normwise():
    assert relative_error([1.0, 10.0], [1.0, 10.0]) == 0.0
    # error 1 on the small entry, scaled by the largest reference magnitude
    assert relative_error([2.0, 10.0], [1.0, 10.0]) == pytest.approx(0.1)
