"""Randomized self-checks behind ``disaggkv verify``.

Each suite returns a SuiteResult with the worst observed error and the seeds
of any failing cases, so a failure can be replayed in isolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionConfig, DisaggKeyValueBlocks, naive_attention_oracle, reconstruct_key_block, residual_attention
from .dual_radix import DualRadixTree, PartialHitPlan, RadixTree, SlotRef
from .engine import AgentRequest, Engine, EngineConfig, EngineMode
from .kv_pool import BlockPool, KVPools, NeedsEviction, PoolKind
from .lora import MemoryRatioInputs, ModelGeometry, memory_ratio, projection_flops
from .workloads import Trace, gen_trace
from .numerics import DTYPE, AttentionState, apply_rope, build_rope_table, online_softmax_update, relative_error

ATTENTION_TOL = 1e-5
ROPE_TOL = 1e-6
FUSION_TOL = 1e-6
HEAD_DIMS = (16, 32, 64)
RANKS = (4, 8, 16)
BLOCK_SIZES = (1, 7, 16, 64)


@dataclass
class SuiteResult:
    name: str
    cases: int = 0
    max_error: float = 0.0
    tolerance: float = 0.0
    failures: list[int] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.cases > 0 and not self.failures

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        line = f"[{status}] {self.name}: {self.cases} cases, max error {self.max_error:.3e} (tol {self.tolerance:.0e})"
        if self.failures:
            line += f", failing seeds {self.failures[:10]}"
        return "\n".join([line] + [f"    {n}" for n in self.notes])


@dataclass
class AttentionCase:
    seed: int
    cfg: AttentionConfig
    q: np.ndarray
    q_positions: np.ndarray
    x: np.ndarray  # source rows the keys/values were projected from
    w_k: np.ndarray
    w_v: np.ndarray
    a_k: np.ndarray
    a_v: np.ndarray
    b_k: np.ndarray
    b_v: np.ndarray
    key_positions: np.ndarray
    rope: object

    def blocks(self, block_size: int | None = None) -> DisaggKeyValueBlocks:
        k_base = apply_rope(self.x @ self.w_k, self.key_positions, self.rope)
        return DisaggKeyValueBlocks.from_rows(
            k_base,
            self.x @ self.w_v,
            self.x @ self.a_k,
            self.x @ self.a_v,
            block_size or self.cfg.block_size_keys,
        )


def make_attention_case(seed: int) -> AttentionCase:
    """One random single-head instance; shapes are drawn from the ranges the suites cover."""
    rng = np.random.default_rng(seed)
    hd = int(rng.choice(HEAD_DIMS))
    rank = int(rng.choice(RANKS))
    keys = int(rng.integers(1, 513))
    rows = int(rng.integers(1, 9))
    causal = bool(rng.integers(0, 2))
    block = int(rng.choice(BLOCK_SIZES))
    m = 32
    cfg = AttentionConfig(num_heads=1, num_kv_heads=1, head_dim=hd, rank=rank, causal=causal, block_size_keys=block)
    rope = build_rope_table(keys + 8, hd)

    def mat(*shape, std=1.0):
        return (rng.standard_normal(shape) * std).astype(DTYPE)

    if causal:
        # Queries sit at the tail of the sequence, as during prefill or decode.
        q_pos = np.sort(rng.choice(np.arange(max(0, keys - 4 * rows), keys), size=min(rows, keys), replace=False))
        rows = q_pos.shape[0]
    else:
        q_pos = rng.integers(0, keys, size=rows)
    return AttentionCase(
        seed=seed,
        cfg=cfg,
        q=apply_rope(mat(rows, hd), q_pos, rope),
        q_positions=q_pos,
        x=mat(keys, m),
        w_k=mat(m, hd, std=m**-0.5),
        w_v=mat(m, hd, std=m**-0.5),
        a_k=mat(m, rank, std=m**-0.5),
        a_v=mat(m, rank, std=m**-0.5),
        b_k=mat(rank, hd, std=rank**-0.5),
        b_v=mat(rank, hd, std=rank**-0.5),
        key_positions=np.arange(keys),
        rope=rope,
    )


def attention_cases(n: int = 100, seed: int = 0) -> list[AttentionCase]:
    return [make_attention_case(seed * 100_003 + i) for i in range(n)]


def attention_suite(n: int = 100, seed: int = 0) -> SuiteResult:
    """Blocked residual kernel against the dense float64 oracle."""
    res = SuiteResult("attention: residual kernel vs naive oracle", tolerance=ATTENTION_TOL)
    shapes = set()
    for case in attention_cases(n, seed):
        blocks = case.blocks()
        out = residual_attention(case.q, blocks, case.b_k, case.b_v, case.cfg, case.rope, case.q_positions)
        ref = naive_attention_oracle(case.q, blocks, case.b_k, case.b_v, case.cfg, case.rope, case.q_positions)
        err = relative_error(out, ref)
        res.cases += 1
        res.max_error = max(res.max_error, err)
        shapes.add((case.cfg.head_dim, case.cfg.rank, case.cfg.block_size_keys, case.cfg.causal))
        if not err <= ATTENTION_TOL:
            res.failures.append(case.seed)
    res.notes.append(f"{len(shapes)} distinct (head_dim, rank, block, causal) combinations")
    return res


def deferred_rope_suite(n: int = 100, seed: int = 0) -> SuiteResult:
    """K_base + RoPE(K_res B_k) against RoPE(x W_k + x A_k B_k) built eagerly."""
    res = SuiteResult("attention: deferred RoPE key reconstruction", tolerance=ROPE_TOL)
    for case in attention_cases(n, seed):
        pos = case.key_positions
        k_base = apply_rope(case.x @ case.w_k, pos, case.rope)
        got = reconstruct_key_block(k_base, case.x @ case.a_k, case.b_k, pos, case.rope)
        eager = apply_rope(case.x @ case.w_k + (case.x @ case.a_k) @ case.b_k, pos, case.rope)
        err = relative_error(got, eager)
        res.cases += 1
        res.max_error = max(res.max_error, err)
        if not err <= ROPE_TOL:
            res.failures.append(case.seed)
    return res


def eager_fusion_attention(q, blocks: DisaggKeyValueBlocks, b_k_head, b_v_head, cfg: AttentionConfig, rope,
                           q_positions=None) -> np.ndarray:
    """Same streaming loop, but V_res B_v is folded into each value block inside the loop."""
    q = np.asarray(q, dtype=DTYPE)
    b_k = np.asarray(b_k_head, dtype=DTYPE).reshape(-1, q.shape[1])
    b_v = np.asarray(b_v_head, dtype=DTYPE).reshape(b_k.shape[0], -1)
    state = AttentionState.initial(q.shape[0], b_v.shape[1], 0)
    for kb, vb, kr, vr, start in zip(blocks.k_base, blocks.v_base, blocks.k_res, blocks.v_res, blocks.starts):
        pos = start + np.arange(kb.shape[0])
        k = reconstruct_key_block(kb, kr, b_k, pos, rope)
        s = (q @ k.T) * DTYPE(cfg.softmax_scale)
        if cfg.causal:
            s = np.where(pos[None, :] > np.asarray(q_positions)[:, None], DTYPE(-1e30), s)
        v = vb + vr @ b_v
        state = online_softmax_update(state, s, v, np.zeros((v.shape[0], 0), dtype=DTYPE))
    return state.acc / state.l[:, None]


def fusion_suite(n: int = 100, seed: int = 0) -> SuiteResult:
    """Late fusion (acc + acc_r B_v after the loop) against per-block value reconstruction."""
    res = SuiteResult("attention: late vs in-loop value fusion", tolerance=FUSION_TOL)
    for case in attention_cases(n, seed):
        blocks = case.blocks()
        args = (case.q, blocks, case.b_k, case.b_v, case.cfg, case.rope, case.q_positions)
        err = relative_error(residual_attention(*args), eager_fusion_attention(*args))
        res.cases += 1
        res.max_error = max(res.max_error, err)
        if not err <= FUSION_TOL:
            res.failures.append(case.seed)
    return res


def lcp(a, b) -> int:
    n = min(len(a), len(b))
    i = 0
    while i < n and a[i] == b[i]:
        i += 1
    return i


def _tree_with_pool(capacity: int, blocks: int = 1 << 16) -> tuple[RadixTree, BlockPool]:
    pool = BlockPool(PoolKind.BASE, blocks, capacity, 1, store_rows=False)
    pools = KVPools(pool, BlockPool(PoolKind.RESIDUAL, 0, capacity, 1, store_rows=False))
    return RadixTree(PoolKind.BASE, pools, capacity, num_layers=1), pool


def insert_sequence(tree: RadixTree, pool: BlockPool, namespace: str, seq) -> int:
    """Insert ``seq`` the way the engine does: match, allocate the tail, link, drop our refs."""
    seq = list(seq)
    found = tree.match_prefix(namespace, seq)
    start = found.matched_len
    slots = [
        SlotRef((pool.alloc(),), min(tree.capacity, len(seq) - lo)) for lo in range(start, len(seq), tree.capacity)
    ]
    for ref in slots:
        pool.advance(ref.slot[0], ref.rows)
    _, linked = tree.insert(namespace, seq, found.slots + slots, 0)
    for ref in slots:
        pool.release(ref.slot[0])
    return linked


def refcounts_match_tree(tree: RadixTree, pool: BlockPool) -> bool:
    """Shadow refcount: every live block is referenced exactly as often as the tree holds it."""
    shadow: dict = {}
    for h in tree.held_handles():
        shadow[h] = shadow.get(h, 0) + 1
    live = pool.live_handles()
    return set(live) == set(shadow) and all(pool.refcount(h) == shadow[h] for h in live)


def radix_suite(n: int = 1000, seed: int = 0) -> SuiteResult:
    """match_prefix against a linear-scan longest-common-prefix oracle.

    With capacity 1 the match must equal the LCP exactly; with larger blocks
    it must be the LCP rounded down to the block grid, give or take the
    partial last block of a stored sequence.
    """
    res = SuiteResult("radix: prefix match vs linear-scan LCP, refcount shadow", tolerance=0.0)
    worst = 0
    exact_cases = 0
    for case in range(n + n // 2):
        case_seed = seed * 1_000_003 + case
        crng = np.random.default_rng(case_seed)
        # The first n cases use single-token blocks, where the match must be exact.
        capacity = 1 if case < n else int(crng.choice([2, 4, 16]))
        exact_cases += capacity == 1
        tree, pool = _tree_with_pool(capacity)
        stored: list[list[int]] = []
        base = crng.integers(0, 16, size=int(crng.integers(1, 257))).tolist()
        for _ in range(int(crng.integers(1, 8))):
            cut = int(crng.integers(0, len(base) + 1))
            seq = base[:cut] + crng.integers(0, 16, size=int(crng.integers(1, 64))).tolist()
            seq = seq[:256]
            insert_sequence(tree, pool, "", seq)
            stored.append(seq)
        cut = int(crng.integers(0, len(base) + 1))
        query = (base[:cut] + crng.integers(0, 16, size=int(crng.integers(1, 64))).tolist())[:256]
        expect = max(lcp(query, s) for s in stored)
        got = tree.match_prefix("", query).matched_len
        res.cases += 1
        if capacity == 1:
            ok = got == expect
        else:
            ok = got <= expect and (expect - got < capacity)
        ok = ok and refcounts_match_tree(tree, pool)
        worst = max(worst, expect - got)
        if not ok:
            res.failures.append(case_seed)
    res.notes.append(f"{exact_cases} exact cases at capacity 1; largest block-truncation loss {worst} token(s)")
    return res


def random_dual_tree(seed: int, capacity: int = 4, blocks: int = 256) -> tuple[DualRadixTree, list]:
    """A dual tree after a random mix of forks, partial decodes and releases, plus the views left open."""
    rng = np.random.default_rng(seed)
    pools = KVPools(
        BlockPool(PoolKind.BASE, blocks, capacity, 1, store_rows=False),
        BlockPool(PoolKind.RESIDUAL, blocks, capacity, 1, store_rows=False),
    )
    dual = DualRadixTree(pools, capacity, num_layers=1)
    open_views = []
    prefix = rng.integers(0, 8, size=int(rng.integers(0, 24))).tolist()
    for i in range(int(rng.integers(2, 7))):
        agent = f"agent{int(rng.integers(0, 4))}"
        cut = int(rng.integers(0, len(prefix) + 1))
        tokens = prefix[:cut] + rng.integers(0, 8, size=int(rng.integers(1, 12))).tolist()
        try:
            view, _ = dual.fork_agent(agent, f"lora-{agent}", tokens, decode_tokens=3, allow_evict=True)
        except NeedsEviction:
            continue
        n = len(view.tokens)
        dual.write_rows(view, PoolKind.BASE, 0, view.matched_base_len, n - view.matched_base_len)
        dual.write_rows(view, PoolKind.RESIDUAL, 0, view.matched_residual_len, n - view.matched_residual_len)
        dual.commit(view)
        for _ in range(int(rng.integers(0, 4))):
            dual.append_generated(view, [int(rng.integers(0, 8))])
        if rng.random() < 0.8:
            dual.release_view(view)
        else:
            open_views.append(view)
    return dual, open_views


def eviction_decoupling_suite(n: int = 200, seed: int = 0) -> SuiteResult:
    """Evicting from one tree leaves the other tree's dump byte-identical."""
    res = SuiteResult("radix: eviction in one tree leaves the other untouched", tolerance=0.0)
    evictions = 0
    for case in range(n):
        case_seed = seed * 1_000_003 + case
        dual, _ = random_dual_tree(case_seed)
        kind = PoolKind.BASE if case % 2 == 0 else PoolKind.RESIDUAL
        other = dual.tree(PoolKind.RESIDUAL if kind is PoolKind.BASE else PoolKind.BASE)
        before = other.dump()
        other_free = dual.pools[other.kind].free_blocks
        want = int(np.random.default_rng(case_seed).integers(1, 8))
        evictions += dual.evict(kind, want).evicted_nodes
        res.cases += 1
        if other.dump() != before or dual.pools[other.kind].free_blocks != other_free:
            res.failures.append(case_seed)
    res.notes.append(f"{evictions} node evictions across {n} scenarios")
    return res


def memory_suite(agents: int = 16, context: int = 2048, rank: int = 16, width: int = 1024, capacity: int = 16) -> SuiteResult:
    """Measured disaggregated/unified bytes per agent against 1/N + r/n."""
    res = SuiteResult("memory: block-counted ratio vs 1/N + r/n", tolerance=0.0)
    ratio, slack = measured_memory_ratio(agents, context, rank, width, capacity)
    expect = memory_ratio(MemoryRatioInputs(agents=agents, rank=rank, width=width, seq_len=context))
    err = abs(ratio - expect)
    res.cases = 1
    res.max_error = err
    res.tolerance = slack
    if err > slack:
        res.failures.append(0)
    res.notes.append(f"measured {ratio:.6f}, formula {expect:.6f}, reduction {1 / ratio:.2f}x")
    return res


def memory_geometry(width: int, head_dim: int = 64) -> ModelGeometry:
    heads = width // head_dim
    return ModelGeometry(
        num_layers=1, hidden=64, num_heads=heads, num_kv_heads=heads, head_dim=head_dim,
        ffn_hidden=64, vocab=256, max_positions=8192,
    )


def unified_agent_bytes(context: int, width: int, capacity: int, max_new_tokens: int = 1, num_layers: int = 1) -> int:
    """Bytes one unified-mode agent holds: prompt blocks plus its reserved decode blocks."""
    blocks = math.ceil(context / capacity) + math.ceil((max_new_tokens - 1) / capacity)
    return blocks * num_layers * capacity * 2 * width * 4


def shared_context_engine(mode: EngineMode, agents: int, context: int, rank: int, width: int, capacity: int,
                          pool_bytes: int | None = None, residual_fraction: float = 0.25,
                          max_new_tokens: int = 1, numerics: bool = False, seed: int = 0) -> Engine:
    """N agents with distinct adapters all arriving at t=0 on one shared context."""
    g = memory_geometry(width)
    if pool_bytes is None:
        pool_bytes = 2 * agents * math.ceil(context / capacity) * capacity * 2 * width * 4 * g.num_layers
    cfg = EngineConfig(
        mode=mode, geometry=g, rank=rank, block_capacity=capacity, pool_bytes=pool_bytes,
        residual_fraction=residual_fraction, numerics=numerics, seed=seed, num_adapters=agents,
    )
    engine = Engine(cfg)
    tokens = np.random.default_rng(seed).integers(0, g.vocab, size=context).tolist()
    for i in range(agents):
        engine.submit(AgentRequest("wf0", f"agent{i}", f"lora-{i}", 0.0, list(tokens), max_new_tokens))
    return engine


def measured_memory_ratio(agents: int, context: int, rank: int, width: int, capacity: int) -> tuple[float, float]:
    """(measured ratio, allowed slack of one block per agent relative to the unified footprint)."""
    per_agent = {}
    for mode in (EngineMode.UNIFIED, EngineMode.DISAGGREGATED):
        engine = shared_context_engine(mode, agents, context, rank, width, capacity)
        per_agent[mode] = engine.run().per_agent_bytes
    unified = per_agent[EngineMode.UNIFIED]
    slack = (capacity * 2 * width * 4) / unified
    return per_agent[EngineMode.DISAGGREGATED] / unified, slack


@dataclass
class PartialHitOutcome:
    plan: PartialHitPlan
    base_flops: int  # base projection FLOPs of the re-fork's prefill
    residual_flops: int
    expected_base_flops: int  # projection cost of exactly the evicted rows
    evicted_blocks: int
    first_run_tokens: list[int]
    second_run_tokens: list[int]


def partial_hit_scenario(context: int = 100, published: int = 64, seed: int = 0) -> PartialHitOutcome:
    """Agent A publishes a prefix, agent B extends it, B's base tail is evicted, B comes back.

    B's residual rows survive in its own tree, so the return visit should
    recompute base rows for the evicted tail only and no residual rows.
    """
    g = ModelGeometry()
    cfg = EngineConfig(mode=EngineMode.DISAGGREGATED, geometry=g, pool_bytes=8 * 2**20, seed=seed)
    engine = Engine(cfg)
    tokens = np.random.default_rng(seed).integers(0, g.vocab, size=context).tolist()

    def visit(agent: str, adapter: str, prompt: list[int], rid: int) -> tuple[PartialHitPlan, int, int]:
        m = engine.metrics
        base0, res0 = m.base_recompute_flops, m.residual_recompute_flops
        engine.submit(AgentRequest("wf0", agent, adapter, engine.clock, prompt, 2, request_id=rid))
        engine.step()
        plan = engine.active[rid].plan
        base, res = m.base_recompute_flops - base0, m.residual_recompute_flops - res0
        engine.run()
        return plan, base, res

    visit("A", "lora-0", tokens[:published], 0)
    visit("B", "lora-1", tokens, 1)
    base_tree = engine.tree.tree(PoolKind.BASE)
    cached = lambda n: any(seq[:n] == tuple(tokens[:n]) for seq in base_tree.sequences())  # noqa: E731
    evicted = 0
    # LRU order reaches the decode tails first; stop once B's prompt tail is gone.
    while cached(context):
        evicted += len(base_tree.evict(1).freed)
    if not cached(published):
        raise AssertionError("eviction reached the published prefix")
    plan, base, res = visit("B", "lora-1", tokens, 2)
    engine.check_hygiene()
    outputs = engine.generated_tokens()
    return PartialHitOutcome(
        plan=plan,
        base_flops=base,
        residual_flops=res,
        expected_base_flops=g.num_layers * projection_flops(context - published, g.hidden, 2 * g.n_kv),
        evicted_blocks=evicted,
        first_run_tokens=outputs[1][context:],
        second_run_tokens=outputs[2][context:],
    )


# Decode is bound by weight reads here (about 9:1 over one agent's KV at 8K tokens),
# roughly the balance of a 7-8B GQA model rather than the toy default.
THROUGHPUT_GEOMETRY = ModelGeometry(
    num_layers=2, hidden=1024, num_heads=16, num_kv_heads=2, head_dim=64, ffn_hidden=8192,
    vocab=256, max_positions=16384,
)


def react_throughput_case(workflows: int = 8, agents: int = 4, context: int = 8192, dynamic: int = 32,
                          max_new_tokens: int = 256, budget_agents: float = 2.0, seed: int = 0,
                          numerics: bool = False) -> tuple[EngineConfig, Trace]:
    """ReAct trace plus a disaggregated config whose pool holds ``budget_agents`` unified root agents.

    Pass the config through ``with_mode`` for the other modes; the pool stays the same.
    """
    g = THROUGHPUT_GEOMETRY
    trace = gen_trace("react", workflows, agents, context, dynamic, seed, max_new_tokens=max_new_tokens)
    capacity = 16
    per_agent = unified_agent_bytes(context + dynamic, g.n_kv, capacity, max_new_tokens, g.num_layers)
    cfg = EngineConfig(
        mode=EngineMode.DISAGGREGATED, geometry=g, block_capacity=capacity,
        pool_bytes=int(budget_agents * per_agent), numerics=numerics, seed=seed,
        num_adapters=workflows * agents, block_size_keys=256,
    )
    return cfg, trace


SUITES = {
    "attention": lambda: [attention_suite(), deferred_rope_suite(), fusion_suite()],
    "radix": lambda: [radix_suite(), eviction_decoupling_suite()],
    "memory": lambda: [memory_suite()],
}


def run_suites(name: str) -> list[SuiteResult]:
    if name == "all":
        return [r for key in ("attention", "radix", "memory") for r in SUITES[key]()]
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}")
    return SUITES[name]()
