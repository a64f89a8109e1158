"""LoRA projection split, the memory-ratio formula, and a small seeded decoder.

The decoder exists so that cache modes can be compared end to end: ``exact``
keeps each agent's own merged K/V, ``shared_base`` reuses another agent's base
rows and adds its own residual rows, ``full_reuse`` reuses another agent's
merged rows outright.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .attention import AttentionConfig, multi_head_attention
from .numerics import (
    DEFAULT_THETA,
    DTYPE,
    RopeTable,
    ShapeError,
    apply_rope,
    as_matrix,
    build_rope_table,
    fast_matmul,
    rms_norm,
)


class Mode(str, Enum):
    EXACT = "exact"
    SHARED_BASE = "shared_base"
    FULL_REUSE = "full_reuse"


class PartialMiss(RuntimeError):
    """Shared base rows are missing and this caller may not compute them."""


@dataclass(frozen=True)
class ModelGeometry:
    num_layers: int = 2
    hidden: int = 64
    num_heads: int = 4
    num_kv_heads: int = 4
    head_dim: int = 16
    ffn_hidden: int = 128
    vocab: int = 256
    max_positions: int = 8192
    theta: float = DEFAULT_THETA

    def __post_init__(self):
        if self.head_dim % 2:
            raise ValueError(f"head_dim must be even, got {self.head_dim}")
        if self.num_heads % self.num_kv_heads:
            raise ValueError("num_heads must be a multiple of num_kv_heads")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")

    @property
    def n_q(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def n_kv(self) -> int:
        return self.num_kv_heads * self.head_dim

    def attention_config(self, rank: int, block_size_keys: int = 64) -> AttentionConfig:
        return AttentionConfig(
            num_heads=self.num_heads,
            num_kv_heads=self.num_kv_heads,
            head_dim=self.head_dim,
            rank=rank,
            causal=True,
            block_size_keys=block_size_keys,
        )

    def weight_bytes(self) -> int:
        m, per_layer = self.hidden, 0
        per_layer += m * (self.n_q + 2 * self.n_kv) + self.n_q * m
        per_layer += 2 * m * self.ffn_hidden
        return 4 * (self.num_layers * per_layer + 2 * self.vocab * m)


@dataclass(frozen=True)
class LayerWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_1: np.ndarray
    w_2: np.ndarray


@dataclass(frozen=True)
class BaseModel:
    geometry: ModelGeometry
    seed: int
    embedding: np.ndarray
    layers: tuple[LayerWeights, ...]
    head: np.ndarray
    rope: RopeTable


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(DTYPE)


def make_base_model(geometry: ModelGeometry | None = None, seed: int = 0) -> BaseModel:
    g = geometry or ModelGeometry()
    rng = np.random.default_rng(seed)
    m = g.hidden
    layers = []
    for _ in range(g.num_layers):
        layers.append(
            LayerWeights(
                w_q=_normal(rng, (m, g.n_q), m**-0.5),
                w_k=_normal(rng, (m, g.n_kv), m**-0.5),
                w_v=_normal(rng, (m, g.n_kv), m**-0.5),
                w_o=_normal(rng, (g.n_q, m), g.n_q**-0.5),
                w_1=_normal(rng, (m, g.ffn_hidden), m**-0.5),
                w_2=_normal(rng, (g.ffn_hidden, m), g.ffn_hidden**-0.5),
            )
        )
    return BaseModel(
        geometry=g,
        seed=seed,
        embedding=_normal(rng, (g.vocab, m), 1.0),
        layers=tuple(layers),
        head=_normal(rng, (m, g.vocab), m**-0.5),
        rope=build_rope_table(g.max_positions, g.head_dim, g.theta),
    )


@dataclass(frozen=True)
class LoraLayer:
    a_q: np.ndarray
    b_q: np.ndarray
    a_k: np.ndarray
    b_k: np.ndarray
    a_v: np.ndarray
    b_v: np.ndarray


@dataclass(frozen=True)
class LoraAdapter:
    adapter_id: str
    rank: int
    layers: tuple[LoraLayer, ...]
    # alpha/rank is folded into every B at construction, so this stays 1.0.
    scaling: float = 1.0

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("adapter rank must be >= 1")
        shapes = None
        for layer in self.layers:
            s = tuple(getattr(layer, f).shape for f in ("a_q", "b_q", "a_k", "b_k", "a_v", "b_v"))
            if shapes is not None and s != shapes:
                raise ShapeError(f"adapter {self.adapter_id}: layer shapes differ")
            shapes = s
            for a, b in ((layer.a_q, layer.b_q), (layer.a_k, layer.b_k), (layer.a_v, layer.b_v)):
                if a.shape[1] != self.rank or b.shape[0] != self.rank:
                    raise ShapeError(f"adapter {self.adapter_id}: A/B do not have rank {self.rank}")
                if self.rank >= b.shape[1]:
                    raise ValueError(
                        f"adapter {self.adapter_id}: rank {self.rank} is not below projection width {b.shape[1]}"
                    )

    @property
    def is_zero(self) -> bool:
        return all(
            not np.any(fast_matmul(a, b))
            for layer in self.layers
            for a, b in ((layer.a_q, layer.b_q), (layer.a_k, layer.b_k), (layer.a_v, layer.b_v))
        )


def adapter_seed(base_seed: int, adapter_id: str) -> int:
    return (base_seed * 1_000_003 + zlib.crc32(adapter_id.encode())) % (2**32)


def make_adapter(
    geometry: ModelGeometry,
    adapter_id: str,
    rank: int,
    seed: int,
    strength: float = 0.5,
    alpha: float | None = None,
) -> LoraAdapter:
    """Random adapter whose update x A B has roughly ``strength`` times the scale of x W.

    ``alpha`` (classic LoRA scaling alpha/rank) is folded into B when given.
    ``strength=0`` yields an all-zero adapter.
    """
    rng = np.random.default_rng(seed)
    m = geometry.hidden
    fold = 1.0 if alpha is None else alpha / rank
    b_std = strength / np.sqrt(rank) * fold
    layers = []
    for _ in range(geometry.num_layers):
        parts = {}
        for proj, width in (("q", geometry.n_q), ("k", geometry.n_kv), ("v", geometry.n_kv)):
            a = _normal(rng, (m, rank), m**-0.5)
            b = _normal(rng, (rank, width), b_std)
            if strength == 0:
                a = np.zeros_like(a)
            parts[f"a_{proj}"], parts[f"b_{proj}"] = a, b
        layers.append(LoraLayer(**parts))
    return LoraAdapter(adapter_id=adapter_id, rank=rank, layers=tuple(layers))


def zero_adapter(geometry: ModelGeometry, adapter_id: str, rank: int) -> LoraAdapter:
    return make_adapter(geometry, adapter_id, rank, seed=0, strength=0.0)


def project_disaggregated(x, w, a) -> tuple[np.ndarray, np.ndarray]:
    """(x W, x A): the shareable base rows and the adapter's residual rows."""
    x, w, a = as_matrix(x, "x"), as_matrix(w, "W"), as_matrix(a, "A")
    if not (x.shape[1] == w.shape[0] == a.shape[0]):
        raise ShapeError(f"x {x.shape}, W {w.shape} and A {a.shape} disagree on the input width")
    return fast_matmul(x, w), fast_matmul(x, a)


def reconstruct_full(b, r, bmat) -> np.ndarray:
    b, r, bmat = as_matrix(b, "b"), as_matrix(r, "r"), as_matrix(bmat, "B")
    if r.shape[1] != bmat.shape[0] or b.shape[1] != bmat.shape[1] or b.shape[0] != r.shape[0]:
        raise ShapeError(f"cannot rebuild from base {b.shape}, residual {r.shape}, B {bmat.shape}")
    return b + fast_matmul(r, bmat)


@dataclass(frozen=True)
class MemoryRatioInputs:
    agents: int
    rank: int
    width: int
    seq_len: int = 1

    def __post_init__(self):
        if self.agents < 1 or self.seq_len < 1:
            raise ValueError("agents and seq_len must be >= 1")
        if not (0 <= self.rank < self.width):
            raise ValueError(f"need 0 <= rank < width, got rank={self.rank} width={self.width}")


def memory_ratio(inputs: MemoryRatioInputs) -> float:
    """Disaggregated over unified bytes for N agents on one shared context: 1/N + r/n."""
    return 1.0 / inputs.agents + inputs.rank / inputs.width


# --- layer forward -----------------------------------------------------------


@dataclass
class LayerKV:
    """K/V rows for a run of consecutive positions.

    Split format keeps base and rank-r residual rows apart; merged format has
    zero-width residuals and the adapter update already folded into the base.
    """

    k_base: np.ndarray
    v_base: np.ndarray
    k_res: np.ndarray
    v_res: np.ndarray

    @classmethod
    def empty(cls, width: int, rank: int) -> "LayerKV":
        z = lambda w: np.zeros((0, w), dtype=DTYPE)  # noqa: E731
        return cls(z(width), z(width), z(rank), z(rank))

    def __len__(self) -> int:
        return self.k_base.shape[0]

    @property
    def rank(self) -> int:
        return self.k_res.shape[1]

    def concat(self, other: "LayerKV") -> "LayerKV":
        return LayerKV(
            np.concatenate([self.k_base, other.k_base]),
            np.concatenate([self.v_base, other.v_base]),
            np.concatenate([self.k_res, other.k_res]),
            np.concatenate([self.v_res, other.v_res]),
        )

    def slice(self, lo: int, hi: int) -> "LayerKV":
        return LayerKV(self.k_base[lo:hi], self.v_base[lo:hi], self.k_res[lo:hi], self.v_res[lo:hi])


@dataclass
class CacheContext:
    """What the cache already holds for one layer.

    ``past`` covers positions [0, start). ``known_base`` and ``known_res`` cover
    a prefix of the new rows [start, ...): base rows from whoever published
    them, residual rows this agent wrote earlier.
    """

    start: int = 0
    past: LayerKV | None = None
    known_base: LayerKV | None = None
    known_res: LayerKV | None = None
    compute_base: bool = True


@dataclass
class LayerOutput:
    x: np.ndarray
    kv: LayerKV
    base_rows_computed: int
    res_rows_computed: int
    flops: int

    def as_tuple(self):
        return self.x, self.kv.k_base, self.kv.k_res, self.kv.v_base, self.kv.v_res


def projection_flops(rows: int, m: int, width: int) -> int:
    return 2 * rows * m * width


def layer_flops(
    geometry: ModelGeometry,
    rank: int,
    split: bool,
    rows: int,
    total_keys: int,
    base_rows: int,
    res_rows: int,
) -> int:
    """FLOPs of one layer forward over ``rows`` query rows attending to ``total_keys`` keys.

    ``split`` selects the base/residual layout (K/V from x W and x A, keys
    rebuilt through B_k) over merged rows (x W + x A B computed up front).
    """
    g, m, n = geometry, geometry.hidden, geometry.n_kv
    flops = projection_flops(rows, m, g.n_q) + projection_flops(rows, m, rank) + projection_flops(rows, rank, g.n_q)
    flops += projection_flops(base_rows, m, 2 * n)
    if split:
        flops += projection_flops(res_rows, m, 2 * rank)
        flops += 2 * total_keys * rank * 2 * n
    else:
        flops += projection_flops(base_rows, m, 2 * rank) + projection_flops(base_rows, rank, 2 * n)
    flops += 4 * rows * total_keys * g.n_q
    flops += projection_flops(rows, g.n_q, m) + 2 * projection_flops(rows, m, g.ffn_hidden)
    return flops


def head_flops(geometry: ModelGeometry) -> int:
    return projection_flops(1, geometry.hidden, geometry.vocab)


def _known(kv: LayerKV | None, limit: int) -> int:
    return 0 if kv is None else min(len(kv), limit)


def forward_layer(
    model: BaseModel,
    layer_idx: int,
    x,
    adapter: LoraAdapter,
    mode: Mode | str,
    ctx: CacheContext | None = None,
    block_size_keys: int = 64,
) -> LayerOutput:
    mode = Mode(mode)
    ctx = ctx or CacheContext()
    g = model.geometry
    w = model.layers[layer_idx]
    lo = adapter.layers[layer_idx]
    x = as_matrix(x, "x")
    if x.shape[1] != g.hidden:
        raise ShapeError(f"x width {x.shape[1]} != hidden {g.hidden}")
    s, m, n, r = x.shape[0], g.hidden, g.n_kv, adapter.rank
    positions = ctx.start + np.arange(s)
    if ctx.past is not None and len(ctx.past) != ctx.start:
        raise ShapeError(f"past covers {len(ctx.past)} rows but start is {ctx.start}")

    h = rms_norm(x)
    q = apply_rope(fast_matmul(h, w.w_q) + fast_matmul(fast_matmul(h, lo.a_q), lo.b_q), positions, model.rope)

    a = _known(ctx.known_base, s)
    if a < s and mode is not Mode.EXACT and not ctx.compute_base:
        raise PartialMiss(f"layer {layer_idx}: base rows [{ctx.start + a}, {ctx.start + s}) are not cached")
    hb = h[a:]
    if mode is Mode.SHARED_BASE:
        b = _known(ctx.known_res, s)
        hr = h[b:]
        kb_new = apply_rope(fast_matmul(hb, w.w_k), positions[a:], model.rope)
        vb_new = fast_matmul(hb, w.w_v)
        kr_new = fast_matmul(hr, lo.a_k)
        vr_new = fast_matmul(hr, lo.a_v)
        known_b = ctx.known_base.slice(0, a) if a else LayerKV.empty(n, r)
        known_r = ctx.known_res.slice(0, b) if b else LayerKV.empty(n, r)
        new = LayerKV(
            np.concatenate([known_b.k_base, kb_new]),
            np.concatenate([known_b.v_base, vb_new]),
            np.concatenate([known_r.k_res, kr_new]),
            np.concatenate([known_r.v_res, vr_new]),
        )
        base_rows, res_rows = s - a, s - b
        b_k, b_v = lo.b_k, lo.b_v
    else:
        k_new = fast_matmul(hb, w.w_k) + fast_matmul(fast_matmul(hb, lo.a_k), lo.b_k)
        k_new = apply_rope(k_new, positions[a:], model.rope)
        v_new = fast_matmul(hb, w.w_v) + fast_matmul(fast_matmul(hb, lo.a_v), lo.b_v)
        known = ctx.known_base.slice(0, a) if a else LayerKV.empty(n, 0)
        new = LayerKV(
            np.concatenate([known.k_base, k_new]),
            np.concatenate([known.v_base, v_new]),
            np.zeros((s, 0), dtype=DTYPE),
            np.zeros((s, 0), dtype=DTYPE),
        )
        base_rows = res_rows = s - a
        b_k = b_v = np.zeros((0, n), dtype=DTYPE)

    keys = new if ctx.past is None else ctx.past.concat(new)
    if keys.rank != new.rank:
        raise ShapeError("past rows and new rows use different storage formats")
    cfg = g.attention_config(keys.rank, block_size_keys)
    attn = multi_head_attention(
        q, keys.k_base, keys.v_base, keys.k_res, keys.v_res, b_k, b_v, cfg, model.rope,
        q_positions=positions, w_o=w.w_o,
    )
    flops = layer_flops(g, r, mode is Mode.SHARED_BASE, s, len(keys), base_rows, res_rows)
    x = x + attn
    x = x + fast_matmul(np.maximum(fast_matmul(rms_norm(x), w.w_1), 0), w.w_2)
    return LayerOutput(x=x.astype(DTYPE), kv=new, base_rows_computed=base_rows, res_rows_computed=res_rows, flops=flops)


@dataclass
class ForwardResult:
    layer_inputs: list[np.ndarray]
    outputs: list[LayerOutput]
    hidden: np.ndarray
    logits_last: np.ndarray

    @property
    def next_token(self) -> int:
        return int(np.argmax(self.logits_last))


def embed(model: BaseModel, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.geometry.vocab):
        raise ValueError("token id outside the vocabulary")
    return model.embedding[tokens]


def run_layers(
    model: BaseModel,
    adapter: LoraAdapter,
    tokens,
    mode: Mode | str,
    contexts: list[CacheContext] | None = None,
    block_size_keys: int = 64,
) -> ForwardResult:
    """Forward ``tokens`` through every layer; contexts[l] feeds layer l."""
    x = embed(model, tokens)
    inputs, outs = [], []
    for layer in range(model.geometry.num_layers):
        inputs.append(x)
        ctx = contexts[layer] if contexts is not None else None
        out = forward_layer(model, layer, x, adapter, mode, ctx, block_size_keys)
        outs.append(out)
        x = out.x
    logits = fast_matmul(rms_norm(x[-1:]), model.head)[0]
    return ForwardResult(layer_inputs=inputs, outputs=outs, hidden=x, logits_last=logits)


def _mean_cosine(a: np.ndarray, b: np.ndarray) -> float:
    a64, b64 = a.astype(np.float64), b.astype(np.float64)
    num = np.sum(a64 * b64, axis=1)
    den = np.linalg.norm(a64, axis=1) * np.linalg.norm(b64, axis=1)
    return float(np.mean(num / np.maximum(den, 1e-300)))


def divergence_report(model: BaseModel, adapters: list[LoraAdapter], tokens) -> list[dict]:
    """Per-layer cosine similarity of layer inputs, shared-base run vs exact run.

    The first adapter publishes the base rows; every other adapter is run
    against them and compared with its own exact run. Layers are 1-based.
    """
    if len(adapters) < 2:
        raise ValueError("divergence_report needs at least two adapters")
    publisher = run_layers(model, adapters[0], tokens, Mode.SHARED_BASE)
    rows = []
    for adapter in adapters[1:]:
        exact = run_layers(model, adapter, tokens, Mode.EXACT)
        ctxs = [CacheContext(known_base=out.kv) for out in publisher.outputs]
        shared = run_layers(model, adapter, tokens, Mode.SHARED_BASE, ctxs)
        for layer, (xs, xe) in enumerate(zip(shared.layer_inputs, exact.layer_inputs), start=1):
            rows.append({"layer": layer, "adapter_id": adapter.adapter_id, "cosine": _mean_cosine(xs, xe)})
        rows.append(
            {
                "layer": model.geometry.num_layers + 1,
                "adapter_id": adapter.adapter_id,
                "cosine": _mean_cosine(shared.hidden, exact.hidden),
            }
        )
    return rows
